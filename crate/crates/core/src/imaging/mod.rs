//! Grayscale image ingestion, normalization and augmentation.

mod augment;
mod pgm;

pub use augment::{augment, tta_average, AugmentPolicy};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw 16-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image must be nonempty, got {width}x{height}")));
        }
        if width * height != pixels.len() {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RawImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }
}

/// Square image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedImage {
    side: usize,
    pixels: Vec<f64>,
}

impl ProcessedImage {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::invalid(format!(
                "{side}x{side} image needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("processed pixels must be finite and within [0, 1]"));
        }
        Ok(ProcessedImage { side, pixels })
    }

    pub(crate) fn from_unchecked(side: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), side * side);
        ProcessedImage { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// `[1, side, side]` tensor for the network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.side, self.side], self.pixels.clone()).expect("square image")
    }

    /// Square crop with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<ProcessedImage> {
        if size == 0 || row + size > self.side || col + size > self.side {
            return Err(Error::invalid(format!(
                "crop of size {size} at ({row}, {col}) exceeds {}x{} image",
                self.side, self.side
            )));
        }
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            out.extend_from_slice(&self.pixels[r * self.side + col..r * self.side + col + size]);
        }
        Ok(ProcessedImage::from_unchecked(size, out))
    }

    pub fn resized(&self, side: usize) -> ProcessedImage {
        let out = resize_bilinear(&self.pixels, self.side, self.side, side, side);
        ProcessedImage::from_unchecked(side, out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Quantizes to 16 bits, mapping `[0, 1]` onto `[0, 65535]`.
    pub fn to_raw(&self) -> RawImage {
        let px = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        RawImage::new(self.side, self.side, px).expect("square image")
    }
}

/// Intensity clipping percentiles applied before min-max scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeConfig {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            lower_percentile: 0.01,
            upper_percentile: 0.99,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lower_percentile)
            && (0.0..=1.0).contains(&self.upper_percentile)
            && self.lower_percentile < self.upper_percentile;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "percentiles must satisfy 0 <= lower < upper <= 1, got {} and {}",
                self.lower_percentile, self.upper_percentile
            )))
        }
    }
}

/// Nearest-rank percentile: the element at index `round(q * (n - 1))` of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(q * (sorted.len() - 1) as f64).round() as usize]
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
/// Resizing to the same dimensions returns the input unchanged.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_width: usize, out_height: usize) -> Vec<f64> {
    if width == out_width && height == out_height {
        return src.to_vec();
    }
    let sx = width as f64 / out_width as f64;
    let sy = height as f64 / out_height as f64;
    let axis = |d: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_width).map(|x| axis(x, sx, width)).collect();
    let mut out = Vec::with_capacity(out_width * out_height);
    for y in 0..out_height {
        let (y0, y1, fy) = axis(y, sy, height);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Full preprocessing of a raw exam image to a `side x side` network input.
pub fn preprocess(raw: &RawImage, side: usize, norm: &NormalizeConfig) -> Result<ProcessedImage> {
    let values: Vec<f64> = raw.pixels.iter().map(|&p| f64::from(p)).collect();
    preprocess_values(&values, raw.width, raw.height, side, norm)
}

/// Preprocessing on floating-point intensities: strip all-zero border rows and
/// columns, center-crop to the largest square, bilinearly rescale to `side`,
/// clip at the configured percentiles and min-max scale into `[0, 1]`.
/// A degenerate intensity range yields an all-zero image.
pub fn preprocess_values(
    values: &[f64],
    width: usize,
    height: usize,
    side: usize,
    norm: &NormalizeConfig,
) -> Result<ProcessedImage> {
    norm.validate()?;
    if side == 0 {
        return Err(Error::invalid("output side must be positive"));
    }
    if width == 0 || height == 0 || values.len() != width * height {
        return Err(Error::invalid(format!(
            "{width}x{height} image with {} values",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image intensities".into()));
    }
    let row_live = |r: usize| values[r * width..(r + 1) * width].iter().any(|&v| v != 0.0);
    let col_live = |c: usize| (0..height).any(|r| values[r * width + c] != 0.0);
    let Some(top) = (0..height).find(|&r| row_live(r)) else {
        return Err(Error::BlankImage);
    };
    let bottom = (0..height).rev().find(|&r| row_live(r)).expect("nonblank");
    let left = (0..width).find(|&c| col_live(c)).expect("nonblank");
    let right = (0..width).rev().find(|&c| col_live(c)).expect("nonblank");
    let (h, w) = (bottom - top + 1, right - left + 1);
    let sq = h.min(w);
    let r0 = top + (h - sq) / 2;
    let c0 = left + (w - sq) / 2;
    let mut square = Vec::with_capacity(sq * sq);
    for r in r0..r0 + sq {
        square.extend_from_slice(&values[r * width + c0..r * width + c0 + sq]);
    }
    let mut img = resize_bilinear(&square, sq, sq, side, side);
    let lo = percentile(&img, norm.lower_percentile);
    let hi = percentile(&img, norm.upper_percentile);
    if hi > lo {
        let range = hi - lo;
        for v in &mut img {
            *v = (v.clamp(lo, hi) - lo) / range;
        }
    } else {
        img.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(ProcessedImage::from_unchecked(side, img))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(side: usize) -> RawImage {
        let px = (0..side * side).map(|i| 1000 + (i as u16) * 7).collect();
        RawImage::new(side, side, px).unwrap()
    }

    #[test]
    fn square_image_keeps_pixel_order() {
        let raw = gradient(12);
        let out = preprocess(&raw, 12, &NormalizeConfig::default()).unwrap();
        for (a, b) in raw.pixels().windows(2).zip(out.pixels().windows(2)) {
            assert!(a[0] < a[1] && b[0] <= b[1]);
        }
        assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(out.pixels()[0], 0.0);
        assert_eq!(*out.pixels().last().unwrap(), 1.0);
    }

    #[test]
    fn zero_padding_is_stripped() {
        let core = gradient(10);
        let mut padded = vec![0u16; 14 * 14];
        for r in 0..10 {
            for c in 0..10 {
                padded[(r + 2) * 14 + c + 1] = core.pixels()[r * 10 + c];
            }
        }
        let padded = RawImage::new(14, 14, padded).unwrap();
        let norm = NormalizeConfig::default();
        assert_eq!(
            preprocess(&padded, 8, &norm).unwrap(),
            preprocess(&core, 8, &norm).unwrap()
        );
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let raw = RawImage::new(5, 7, vec![321; 35]).unwrap();
        let out = preprocess(&raw, 4, &NormalizeConfig::default()).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn blank_image_fails() {
        let raw = RawImage::new(4, 4, vec![0; 16]).unwrap();
        let err = preprocess(&raw, 4, &NormalizeConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "blank image");
    }

    #[test]
    fn rectangular_image_center_cropped() {
        let mut px = vec![5u16; 4 * 8];
        for r in 0..4 {
            for c in 2..6 {
                px[r * 8 + c] = 100 + (r * 4 + c) as u16;
            }
        }
        let raw = RawImage::new(8, 4, px).unwrap();
        let out = preprocess(&raw, 4, &NormalizeConfig::default()).unwrap();
        let inner = RawImage::new(4, 4, (0..16).map(|i| 100 + (i / 4 * 4 + i % 4 + 2) as u16).collect()).unwrap();
        assert_eq!(out, preprocess(&inner, 4, &NormalizeConfig::default()).unwrap());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        assert_eq!(resize_bilinear(&src, 4, 3, 4, 3), src);
        let up = resize_bilinear(&[0.0, 1.0], 2, 1, 4, 1);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn crop_bounds_checked() {
        let img = ProcessedImage::new(4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let c = img.crop(1, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[6.0 / 15.0, 7.0 / 15.0, 10.0 / 15.0, 11.0 / 15.0]);
        assert!(img.crop(3, 3, 2).is_err());
    }
}
