use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ProcessedImage;
use crate::error::{Error, Result};

/// Random flip, rotation and translation applied to training and test-time copies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    flip_probability: f64,
    rotation_degrees: (f64, f64),
    max_translation_fraction: f64,
    seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_probability: 0.5,
            rotation_degrees: (-45.0, 45.0),
            max_translation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn new(
        flip_probability: f64,
        rotation_degrees: (f64, f64),
        max_translation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(Error::invalid(format!(
                "flip probability {flip_probability} outside [0, 1]"
            )));
        }
        let (lo, hi) = rotation_degrees;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!(
                "rotation range ({lo}, {hi}) is not an interval"
            )));
        }
        if !(0.0..=1.0).contains(&max_translation_fraction) {
            return Err(Error::invalid(format!(
                "translation fraction {max_translation_fraction} outside [0, 1]"
            )));
        }
        Ok(AugmentPolicy {
            flip_probability,
            rotation_degrees,
            max_translation_fraction,
            seed,
        })
    }

    /// Policy that never alters the image.
    pub fn identity(seed: u64) -> Self {
        AugmentPolicy {
            flip_probability: 0.0,
            rotation_degrees: (0.0, 0.0),
            max_translation_fraction: 0.0,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn flip_probability(&self) -> f64 {
        self.flip_probability
    }

    pub fn rotation_degrees(&self) -> (f64, f64) {
        self.rotation_degrees
    }

    pub fn max_translation_fraction(&self) -> f64 {
        self.max_translation_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn flip_columns(img: &ProcessedImage) -> ProcessedImage {
    let n = img.side();
    let mut out = img.pixels().to_vec();
    for row in out.chunks_exact_mut(n) {
        row.reverse();
    }
    ProcessedImage::from_unchecked(n, out)
}

/// One augmented copy. Every call consumes exactly four uniform draws from a
/// stream keyed by `(policy.seed, draw_index)`: flip, angle, and the two offsets.
pub fn augment(img: &ProcessedImage, policy: &AugmentPolicy, draw_index: u64) -> ProcessedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(draw_index);
    let flip = rng.random::<f64>() < policy.flip_probability;
    let (lo, hi) = policy.rotation_degrees;
    let angle = (lo + (hi - lo) * rng.random::<f64>()).to_radians();
    let n = img.side();
    let max_shift = policy.max_translation_fraction * n as f64;
    let tx = (2.0 * rng.random::<f64>() - 1.0) * max_shift;
    let ty = (2.0 * rng.random::<f64>() - 1.0) * max_shift;

    let base = if flip { flip_columns(img) } else { img.clone() };
    if angle == 0.0 && tx == 0.0 && ty == 0.0 {
        return base;
    }
    let (sin, cos) = angle.sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let src = base.pixels();
    let sample = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= n as isize || col >= n as isize {
            0.0
        } else {
            src[r as usize * n + col as usize]
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // Inverse map: undo the translation, then rotate by -angle about the center.
            let dx = x as f64 - c - tx;
            let dy = y as f64 - c - ty;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx;
            let bottom = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    ProcessedImage::from_unchecked(n, out)
}

/// Mean of `forward` over `n` augmented copies with draw indices `0..n`.
pub fn tta_average<F>(forward: F, img: &ProcessedImage, policy: &AugmentPolicy, n: usize) -> Result<Vec<f64>>
where
    F: Fn(&ProcessedImage) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::invalid("test-time augmentation needs at least one draw"));
    }
    let mut total: Option<Vec<f64>> = None;
    for i in 0..n {
        let pred = forward(&augment(img, policy, i as u64))?;
        match total.as_mut() {
            None => total = Some(pred),
            Some(acc) => {
                if acc.len() != pred.len() {
                    return Err(Error::invalid(format!(
                        "prediction length changed from {} to {}",
                        acc.len(),
                        pred.len()
                    )));
                }
                acc.iter_mut().zip(&pred).for_each(|(a, p)| *a += p);
            }
        }
    }
    let mut mean = total.expect("n >= 1");
    mean.iter_mut().for_each(|v| *v /= n as f64);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> ProcessedImage {
        ProcessedImage::new(n, (0..n * n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let img = ramp(9);
        let out = augment(&img, &AugmentPolicy::identity(3), 17);
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_restores() {
        let img = ramp(6);
        let once = flip_columns(&img);
        assert_eq!(once.at(0, 0), img.at(0, 5));
        assert_eq!(flip_columns(&once), img);
        let always = AugmentPolicy::new(1.0, (0.0, 0.0), 0.0, 1).unwrap();
        assert_eq!(augment(&augment(&img, &always, 0), &always, 1), img);
    }

    #[test]
    fn same_draw_is_reproducible() {
        let img = ramp(16);
        let policy = AugmentPolicy::default().with_seed(42);
        assert_eq!(augment(&img, &policy, 5), augment(&img, &policy, 5));
        assert_ne!(augment(&img, &policy, 5), augment(&img, &policy, 6));
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let mut px = vec![0.0; 25];
        px[2] = 1.0;
        let img = ProcessedImage::new(5, px).unwrap();
        let policy = AugmentPolicy::new(0.0, (90.0, 90.0), 0.0, 0).unwrap();
        let out = augment(&img, &policy, 0);
        let hot: Vec<usize> = out
            .pixels()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot.len(), 1);
        // (row 0, col 2) rotated a quarter turn about the center lands on the middle row's edge.
        assert!(hot[0] == 10 || hot[0] == 14, "{hot:?}");
    }

    #[test]
    fn tta_rules() {
        let img = ramp(8);
        let policy = AugmentPolicy::default().with_seed(9);
        let constant = tta_average(|_| Ok(vec![0.3, 0.7]), &img, &policy, 10).unwrap();
        assert!((constant[0] - 0.3).abs() < 1e-15 && (constant[1] - 0.7).abs() < 1e-15);

        let plain = |x: &ProcessedImage| Ok(vec![x.pixels().iter().sum::<f64>()]);
        let single = tta_average(plain, &img, &AugmentPolicy::identity(0), 1).unwrap();
        assert_eq!(single, plain(&img).unwrap());

        let linear = |x: &ProcessedImage| {
            Ok(vec![x
                .pixels()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (i % 5) as f64)
                .sum::<f64>()])
        };
        let tta = tta_average(linear, &img, &policy, 6).unwrap()[0];
        let manual: f64 = (0..6)
            .map(|i| linear(&augment(&img, &policy, i)).unwrap()[0])
            .sum::<f64>()
            / 6.0;
        assert!((tta - manual).abs() < 1e-12);
        assert!(tta_average(linear, &img, &policy, 0).is_err());
    }

    #[test]
    fn rejects_bad_policy() {
        assert!(AugmentPolicy::new(1.5, (0.0, 0.0), 0.0, 0).is_err());
        assert!(AugmentPolicy::new(0.5, (10.0, -10.0), 0.0, 0).is_err());
        assert!(AugmentPolicy::new(0.5, (0.0, 0.0), -0.1, 0).is_err());
    }
}
