//! Logistic-regression baseline fitted by full-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

use super::Dataset;

const STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// Training-column means, used for standardization and to impute missing values.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn standardize<'a>(x: &'a [f64], means: &'a [f64], scales: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    x.iter()
        .zip(means.iter().zip(scales))
        .map(|(&v, (&m, &s))| if v.is_nan() { 0.0 } else { (v - m) / s })
}

/// Minimizes mean log-loss plus `l2_weight / 2 * |w|^2` on standardized,
/// mean-imputed features. Zero iterations leave the prior log-odds.
pub fn fit_logreg(data: &Dataset, l2_weight: f64, iterations: usize) -> Result<LogRegModel> {
    if data.is_empty() {
        return Err(Error::invalid("no training rows"));
    }
    if !(l2_weight >= 0.0) {
        return Err(Error::invalid(format!(
            "l2 weight must be nonnegative, got {l2_weight}"
        )));
    }
    let d = data.num_features();
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for f in 0..d {
        let col: Vec<f64> = data.rows.iter().map(|r| r[f]).filter(|v| !v.is_nan()).collect();
        if col.is_empty() {
            continue;
        }
        means[f] = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - means[f]).powi(2)).sum::<f64>() / col.len() as f64;
        if var > 0.0 {
            scales[f] = var.sqrt();
        }
    }
    let positives = data.labels.iter().filter(|&&y| y).count();
    let rate = (positives as f64 / data.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let mut model = LogRegModel {
        means,
        scales,
        weights: vec![0.0; d],
        bias: (rate / (1.0 - rate)).ln(),
    };
    if positives == 0 || positives == data.len() {
        log::warn!("single-class training set; logistic regression predicts the prior");
        return Ok(model);
    }
    let xs: Vec<Vec<f64>> = data
        .rows
        .iter()
        .map(|r| standardize(r, &model.means, &model.scales).collect())
        .collect();
    let n = data.len() as f64;
    for _ in 0..iterations {
        let mut gw: Vec<f64> = model.weights.iter().map(|w| l2_weight * w).collect();
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&data.labels) {
            let z = model.bias + x.iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>();
            let r = (sigmoid(z) - f64::from(u8::from(y))) / n;
            gb += r;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += r * a;
            }
        }
        model.bias -= STEP * gb;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= STEP * g;
        }
    }
    Ok(model)
}

impl LogRegModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.weights.len()
            )));
        }
        let z = self.bias
            + standardize(x, &self.means, &self.scales)
                .zip(&self.weights)
                .map(|(a, w)| a * w)
                .sum::<f64>();
        Ok(sigmoid(z))
    }
}
