//! Minibatch Adam training loop shared by the image models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{augment, AugmentPolicy, ProcessedImage};
use crate::tensor::{AdamState, Graph, NodeId, ParamGrads, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train-time augmentation; `None` feeds images unchanged.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            augment: Some(AugmentPolicy::default()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation score per epoch (higher is better), empty without a validator.
    pub validation_scores: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

pub struct Example<'a, T> {
    pub image: &'a ProcessedImage,
    pub target: T,
}

/// Trains `store` in place. `loss` records one example's scalar loss on a fresh
/// graph. When `validate` is given the parameters from the best-scoring epoch
/// are restored at the end.
pub fn fit<T, L, V>(
    store: &mut ParamStore,
    examples: &[Example<'_, T>],
    opts: &TrainOptions,
    loss: L,
    mut validate: Option<V>,
) -> Result<TrainReport>
where
    L: Fn(&mut Graph, &ParamStore, &ProcessedImage, &T) -> Result<NodeId>,
    V: FnMut(&ParamStore) -> Result<f64>,
{
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = AdamState::new(opts.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let policy = opts.augment.map(|p| p.with_seed(opts.seed));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads = ParamGrads::zeros_like(store);
            for (j, &i) in batch.iter().enumerate() {
                let ex = &examples[i];
                let draw = (epoch * examples.len() + b * opts.batch_size + j) as u64;
                let augmented;
                let img = match &policy {
                    Some(p) => {
                        augmented = augment(ex.image, p, draw);
                        &augmented
                    }
                    None => ex.image,
                };
                let mut g = Graph::new();
                let l = loss(&mut g, store, img, &ex.target)?;
                let value = g.value(l).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}, example {i}")));
                }
                total += value;
                grads.accumulate(&g.backward(l, store)?)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(store, &grads)?;
        }
        report.epoch_losses.push(total / examples.len() as f64);
        if let Some(v) = validate.as_mut() {
            let score = v(store)?;
            log::debug!(
                "epoch {epoch}: loss {:.5}, validation {score:.5}",
                total / examples.len() as f64
            );
            report.validation_scores.push(score);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, store.clone()));
                report.best_epoch = epoch;
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        *store = params;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mean_pixel_loss(g: &mut Graph, s: &ParamStore, img: &ProcessedImage, target: &f64) -> Result<NodeId> {
        let x = g.input(
            "x",
            Tensor::scalar(img.pixels().iter().sum::<f64>() / img.pixels().len() as f64),
        )?;
        let w = g.param(s, "w")?;
        let pred = g.mul(x, w)?;
        let err = g.scale_shift(pred, 1.0, -target);
        let sq = g.mul(err, err)?;
        Ok(g.sum(sq))
    }

    #[test]
    fn fits_scalar_weight() {
        let img = ProcessedImage::new(2, vec![0.5; 4]).unwrap();
        let examples: Vec<_> = (0..10)
            .map(|_| Example {
                image: &img,
                target: 1.5,
            })
            .collect();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let opts = TrainOptions {
            epochs: 200,
            learning_rate: 0.05,
            augment: None,
            ..TrainOptions::default()
        };
        let report = fit(
            &mut store,
            &examples,
            &opts,
            mean_pixel_loss,
            None::<fn(&ParamStore) -> Result<f64>>,
        )
        .unwrap();
        assert!((store.get("w").unwrap().data()[0] - 3.0).abs() < 1e-2);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }

    #[test]
    fn restores_best_epoch() {
        let img = ProcessedImage::new(2, vec![0.5; 4]).unwrap();
        let examples = vec![Example {
            image: &img,
            target: 1.0,
        }];
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let opts = TrainOptions {
            epochs: 5,
            learning_rate: 0.1,
            augment: None,
            ..TrainOptions::default()
        };
        // Score prefers the first epoch, so its weights must come back.
        let mut calls = 0;
        let validate = |s: &ParamStore| {
            calls += 1;
            Ok(-(calls as f64) + 0.0 * s.get("w").unwrap().data()[0])
        };
        let report = fit(&mut store, &examples, &opts, mean_pixel_loss, Some(validate)).unwrap();
        assert_eq!(report.best_epoch, 0);
        assert!((store.get("w").unwrap().data()[0] - 0.1).abs() < 1e-6);
    }
}
