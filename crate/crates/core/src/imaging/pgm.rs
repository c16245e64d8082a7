//! Binary PGM (`P5`) reading and writing.
//!
//! Samples are big-endian 16-bit when maxval exceeds 255, one byte otherwise.
//! The writer always emits maxval 65535.

use std::fs;
use std::path::Path;

use super::RawImage;
use crate::error::{Error, Result};

const MAX_COMMENT_BYTES: usize = 1024;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    let start = self.pos;
                    while let Some(&b) = self.bytes.get(self.pos) {
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                        self.pos += 1;
                    }
                    if self.pos - start > MAX_COMMENT_BYTES {
                        return Err(Error::format(
                            "pgm",
                            format!("comment longer than {MAX_COMMENT_BYTES} bytes"),
                        ));
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("pgm", format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("pgm", format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("pgm", "missing P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm", format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("pgm", "missing whitespace after maxval"));
    }
    h.pos += 1;
    let wide = maxval > 255;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("pgm", "image dimensions overflow"))?;
    let need = if wide { n * 2 } else { n };
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(Error::format(
            "pgm",
            format!("expected {need} sample bytes, found {}", body.len()),
        ));
    }
    let pixels: Vec<u16> = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        body[..need].iter().map(|&b| u16::from(b)).collect()
    };
    if pixels.iter().any(|&p| usize::from(p) > maxval) {
        return Err(Error::format("pgm", "sample exceeds maxval"));
    }
    RawImage::new(width, height, pixels)
}

pub fn encode_pgm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    out.reserve(img.pixels().len() * 2);
    for &p in img.pixels() {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { kind, detail } => Error::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_big_endian() {
        let img = RawImage::new(3, 2, vec![0, 1, 256, 65535, 4660, 7]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        let body = &bytes[bytes.len() - 12..];
        assert_eq!(&body[4..6], &[0x01, 0x00]);
        assert_eq!(&body[8..10], &[0x12, 0x34]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn accepts_comments_and_eight_bit() {
        let mut bytes = b"P5\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 200]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[10, 200]);
    }

    #[test]
    fn rejects_long_comment() {
        let mut bytes = b"P5\n#".to_vec();
        bytes.extend(std::iter::repeat_n(b'x', 1100));
        bytes.extend_from_slice(b"\n1 1\n65535\n\0\0");
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n70000\n\0\0").is_err());
    }
}
