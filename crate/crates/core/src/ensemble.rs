//! Image/tabular ensembling, λ selection and the Monte Carlo model-selection harness.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::{auc_pr_mean, pr_auc, roc_auc};

/// Prediction windows in hours.
pub const WINDOWS: [u32; 4] = [24, 48, 72, 96];

pub type WindowScores = [f64; 4];
pub type WindowLabels = [bool; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnsembleWeights {
    pub lambda: [f64; 4],
    /// Mean tabular prediction on validation data, used when clinical variables are missing.
    pub gbm_imputation_mean: [f64; 4],
}

impl EnsembleWeights {
    pub fn new(lambda: [f64; 4], gbm_imputation_mean: [f64; 4]) -> Result<Self> {
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda:?}")));
        }
        if gbm_imputation_mean.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return Err(Error::invalid(format!(
                "imputation means must lie in (0, 1), got {gbm_imputation_mean:?}"
            )));
        }
        Ok(EnsembleWeights {
            lambda,
            gbm_imputation_mean,
        })
    }
}

/// `λ_t y_gmic + (1 - λ_t) y_gbm` per window, imputing a missing tabular prediction.
pub fn ensemble_predict(y_gmic: &WindowScores, y_gbm: Option<&WindowScores>, w: &EnsembleWeights) -> WindowScores {
    let gbm = y_gbm.unwrap_or(&w.gbm_imputation_mean);
    std::array::from_fn(|t| w.lambda[t] * y_gmic[t] + (1.0 - w.lambda[t]) * gbm[t])
}

/// Per-window mean of the tabular predictions, clamped into (0, 1).
pub fn imputation_means(gbm: &[WindowScores]) -> Result<[f64; 4]> {
    if gbm.is_empty() {
        return Err(Error::invalid("no tabular predictions to average"));
    }
    Ok(std::array::from_fn(|t| {
        (gbm.iter().map(|y| y[t]).sum::<f64>() / gbm.len() as f64).clamp(1e-6, 1.0 - 1e-6)
    }))
}

/// Grid search over λ ∈ {0, 0.01, ..., 1} per window maximizing
/// (AUC + PR AUC) / 2; the smallest maximizer wins ties.
pub fn select_lambda(gmic: &[WindowScores], gbm: &[WindowScores], labels: &[WindowLabels]) -> Result<[f64; 4]> {
    if gmic.len() != gbm.len() || gmic.len() != labels.len() {
        return Err(Error::invalid("validation arrays differ in length"));
    }
    let mut out = [0.0; 4];
    for t in 0..4 {
        let y: Vec<bool> = labels.iter().map(|l| l[t]).collect();
        if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
            return Err(Error::DegenerateLabels(format!(
                "{} h window needs both classes",
                WINDOWS[t]
            )));
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=100 {
            let lambda = k as f64 / 100.0;
            let s: Vec<f64> = gmic
                .iter()
                .zip(gbm)
                .map(|(a, b)| lambda * a[t] + (1.0 - lambda) * b[t])
                .collect();
            let score = auc_pr_mean(&s, &y)?;
            if score > best.0 + 1e-12 {
                best = (score, lambda);
            }
        }
        out[t] = best.1;
    }
    Ok(out)
}

/// Mean over windows of (AUC + PR AUC) / 2, skipping windows with a single class.
pub fn validation_score(preds: &[WindowScores], labels: &[WindowLabels]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for t in 0..4 {
        let y: Vec<bool> = labels.iter().map(|l| l[t]).collect();
        let s: Vec<f64> = preds.iter().map(|p| p[t]).collect();
        if let Ok(v) = auc_pr_mean(&s, &y) {
            total += v;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::DegenerateLabels("no window has both classes".into()));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub window_h: u32,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

pub fn window_metrics(preds: &[WindowScores], labels: &[WindowLabels]) -> Result<Vec<WindowMetrics>> {
    (0..4)
        .map(|t| {
            let y: Vec<bool> = labels.iter().map(|l| l[t]).collect();
            let s: Vec<f64> = preds.iter().map(|p| p[t]).collect();
            Ok(WindowMetrics {
                window_h: WINDOWS[t],
                roc_auc: roc_auc(&s, &y)?,
                pr_auc: pr_auc(&s, &y)?,
            })
        })
        .collect()
}

/// One hyperparameter's sampling law.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Law {
    /// `10^U(lo, hi)` times `scale`.
    LogUniform {
        lo: f64,
        hi: f64,
        scale: f64,
    },
    /// `U(lo, hi)`.
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `round(10^U(lo, hi))`.
    LogUniformInt {
        lo: f64,
        hi: f64,
    },
    /// Integer uniform on `lo..=hi`.
    UniformInt {
        lo: i64,
        hi: i64,
    },
    Choice(Vec<f64>),
}

impl Law {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Law::LogUniform { lo, hi, scale } => scale * 10f64.powf(rng.random_range(*lo..=*hi)),
            Law::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            Law::LogUniformInt { lo, hi } => 10f64.powf(rng.random_range(*lo..=*hi)).round(),
            Law::UniformInt { lo, hi } => rng.random_range(*lo..=*hi) as f64,
            Law::Choice(values) => *values.choose(rng).expect("choice law is nonempty"),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Law::LogUniform { lo, hi, scale } => lo.is_finite() && hi.is_finite() && lo <= hi && *scale > 0.0,
            Law::Uniform { lo, hi } | Law::LogUniformInt { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Law::UniformInt { lo, hi } => lo <= hi,
            Law::Choice(v) => !v.is_empty() && v.iter().all(|x| x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad sampling law {self:?}")))
        }
    }
}

/// Named sampling laws; configurations are drawn in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SearchSpace {
    pub laws: BTreeMap<String, Law>,
}

pub type Hyperparameters = BTreeMap<String, f64>;

impl SearchSpace {
    pub fn gmic() -> Self {
        Self::from_pairs([
            (
                "learning_rate",
                Law::LogUniform {
                    lo: -6.0,
                    hi: -4.0,
                    scale: 1.0,
                },
            ),
            (
                "sparsity_weight",
                Law::LogUniform {
                    lo: -6.0,
                    hi: -3.0,
                    scale: 4.0,
                },
            ),
            ("pool_fraction", Law::Uniform { lo: 0.2, hi: 0.8 }),
        ])
    }

    pub fn gbm() -> Self {
        Self::from_pairs([
            (
                "learning_rate",
                Law::LogUniform {
                    lo: -2.0,
                    hi: -1.0,
                    scale: 1.0,
                },
            ),
            ("num_trees", Law::LogUniformInt { lo: 2.0, hi: 3.0 }),
            ("max_leaves", Law::UniformInt { lo: 5, hi: 15 }),
        ])
    }

    pub fn drc() -> Self {
        Self::from_pairs([
            (
                "sparsity_weight",
                Law::LogUniform {
                    lo: -6.0,
                    hi: -4.0,
                    scale: 1.0,
                },
            ),
            ("pool_fraction", Law::Choice(vec![0.2, 0.5, 0.8])),
        ])
    }

    pub fn from_pairs<const N: usize>(pairs: [(&str, Law); N]) -> Self {
        SearchSpace {
            laws: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.laws.values().try_for_each(Law::validate)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Hyperparameters {
        self.laws.iter().map(|(k, law)| (k.clone(), law.sample(rng))).collect()
    }
}

/// A trainable model family seen by the harness through exam indices.
pub trait ModelFamily {
    type Model;

    /// Trains on `train` exams; `validation` exams may be used for epoch selection.
    fn train(&self, hp: &Hyperparameters, train: &[usize], validation: &[usize], seed: u64) -> Result<Self::Model>;

    fn predict(&self, model: &Self::Model, exams: &[usize]) -> Result<Vec<WindowScores>>;
}

/// Exam-level inputs to the harness. `train` and `test` index into the
/// per-exam arrays and must not share patients.
pub struct SelectionInput<'a> {
    pub patient_ids: &'a [String],
    pub labels: &'a [WindowLabels],
    pub train: &'a [usize],
    pub test: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOptions {
    /// Fraction of training patients drawn into the universe.
    pub universe_fraction: f64,
    pub num_configs: usize,
    pub seeds_per_config: usize,
    /// Configs kept for the final ensemble, capped at `num_configs`.
    pub top_k: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            universe_fraction: 1.0,
            num_configs: 30,
            seeds_per_config: 3,
            top_k: 3,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: usize,
    pub repeat: usize,
    pub seed: u64,
    pub validation_score: f64,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct SelectionResult<M> {
    pub universe_patients: Vec<String>,
    pub configs: Vec<Hyperparameters>,
    pub runs: Vec<RunRecord>,
    pub splits: Vec<Split>,
    /// Mean validation score per config.
    pub config_scores: Vec<f64>,
    pub top: Vec<usize>,
    /// Members in (config in `top` order, repeat) order.
    pub members: Vec<M>,
    /// Out-of-fold member predictions averaged per validation exam.
    pub validation_predictions: BTreeMap<usize, WindowScores>,
    pub test_predictions: Vec<WindowScores>,
    pub test_score: f64,
    pub test_metrics: Vec<WindowMetrics>,
}

/// Seed for a member model, distinct per (config, repeat).
pub fn member_seed(seed: u64, config: usize, repeat: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((config * 1000 + repeat) as u64 + 1)
}

/// Generator for one of the harness's random streams: 0 draws the universe,
/// 1 the configurations, `2 + config * repeats + repeat` a split.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `fraction` of the patients in `exams`, in sorted-id order before shuffling.
pub fn sample_patients(patients: &BTreeSet<&str>, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut all: Vec<&str> = patients.iter().copied().collect();
    all.shuffle(rng);
    let k = (fraction * all.len() as f64).floor() as usize;
    let mut chosen: Vec<String> = all[..k].iter().map(|s| s.to_string()).collect();
    chosen.sort();
    chosen
}

/// Splits the patients of `exams` by patient into train/validation sides.
pub fn patient_split(
    exams: &[usize],
    patient_ids: &[String],
    validation_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Split> {
    let patients: BTreeSet<&str> = exams.iter().map(|&e| patient_ids[e].as_str()).collect();
    if patients.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 patients to split, have {}",
            patients.len()
        )));
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(rng);
    let n_val = ((validation_fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let val: BTreeSet<&str> = order[..n_val].iter().copied().collect();
    let (validation, train) = exams.iter().partition(|&&e| val.contains(patient_ids[e].as_str()));
    Ok(Split { train, validation })
}

/// Monte Carlo cross-validated random search: sample a patient universe,
/// draw configurations, score each on repeated patient-level splits, then
/// evaluate the equal-weight ensemble of the best configurations' members
/// on the test exams.
pub fn run_model_selection<F: ModelFamily>(
    family: &F,
    space: &SearchSpace,
    input: &SelectionInput<'_>,
    opts: &SelectionOptions,
) -> Result<SelectionResult<F::Model>> {
    space.validate()?;
    if opts.num_configs == 0 || opts.seeds_per_config == 0 || opts.top_k == 0 {
        return Err(Error::Config(
            "selection needs at least one config, seed and kept config".into(),
        ));
    }
    if !(opts.universe_fraction > 0.0 && opts.universe_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "universe fraction must lie in (0, 1], got {}",
            opts.universe_fraction
        )));
    }
    if input.patient_ids.len() != input.labels.len() {
        return Err(Error::invalid("patient ids and labels differ in length"));
    }
    let train_patients: BTreeSet<&str> = input.train.iter().map(|&e| input.patient_ids[e].as_str()).collect();
    if input
        .test
        .iter()
        .any(|&e| train_patients.contains(input.patient_ids[e].as_str()))
    {
        return Err(Error::invalid("train and test share a patient"));
    }
    let universe = sample_patients(&train_patients, opts.universe_fraction, &mut stream_rng(opts.seed, 0));
    let in_universe: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    let exams: Vec<usize> = input
        .train
        .iter()
        .copied()
        .filter(|&e| in_universe.contains(input.patient_ids[e].as_str()))
        .collect();
    if universe.len() < 2 {
        return Err(Error::invalid(format!(
            "universe of {} patients is too small to split",
            universe.len()
        )));
    }

    let mut cfg_rng = stream_rng(opts.seed, 1);
    let configs: Vec<Hyperparameters> = (0..opts.num_configs).map(|_| space.sample(&mut cfg_rng)).collect();
    let mut runs = vec![];
    let mut splits = vec![];
    let mut config_scores = vec![];
    // Best configs so far with their members and out-of-fold predictions.
    let mut kept: Vec<(usize, f64, Vec<(F::Model, Vec<WindowScores>)>)> = vec![];
    for (i, hp) in configs.iter().enumerate() {
        let mut total = 0.0;
        let mut trained = vec![];
        for s in 0..opts.seeds_per_config {
            let stream = 2 + (i * opts.seeds_per_config + s) as u64;
            let split = patient_split(
                &exams,
                input.patient_ids,
                opts.validation_fraction,
                &mut stream_rng(opts.seed, stream),
            )?;
            let seed = member_seed(opts.seed, i, s);
            let start = Instant::now();
            let model = family.train(hp, &split.train, &split.validation, seed)?;
            let preds = family.predict(&model, &split.validation)?;
            let labels: Vec<WindowLabels> = split.validation.iter().map(|&e| input.labels[e]).collect();
            let score = validation_score(&preds, &labels)?;
            log::info!("config {i} repeat {s}: validation {score:.4}");
            runs.push(RunRecord {
                config: i,
                repeat: s,
                seed,
                validation_score: score,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            splits.push(split);
            trained.push((model, preds));
            total += score;
        }
        let mean = total / opts.seeds_per_config as f64;
        config_scores.push(mean);
        kept.push((i, mean, trained));
        kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.truncate(opts.top_k);
    }

    let top: Vec<usize> = kept.iter().map(|k| k.0).collect();
    let mut members = vec![];
    let mut oof: BTreeMap<usize, (WindowScores, usize)> = BTreeMap::new();
    for (i, _, trained) in kept {
        for (s, (model, preds)) in trained.into_iter().enumerate() {
            let split = &splits[i * opts.seeds_per_config + s];
            for (&e, p) in split.validation.iter().zip(preds) {
                let entry = oof.entry(e).or_insert(([0.0; 4], 0));
                entry.0.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                entry.1 += 1;
            }
            members.push(model);
        }
    }
    let validation_predictions = oof
        .into_iter()
        .map(|(e, (sum, n))| (e, sum.map(|v| v / n as f64)))
        .collect();
    let test_predictions = average_predictions(family, &members, input.test)?;
    let test_labels: Vec<WindowLabels> = input.test.iter().map(|&e| input.labels[e]).collect();
    let test_score = validation_score(&test_predictions, &test_labels)?;
    let test_metrics = window_metrics(&test_predictions, &test_labels)?;
    Ok(SelectionResult {
        universe_patients: universe,
        configs,
        runs,
        splits,
        config_scores,
        top,
        members,
        validation_predictions,
        test_predictions,
        test_score,
        test_metrics,
    })
}

/// Equal-weight average of member predictions.
pub fn average_predictions<F: ModelFamily>(
    family: &F,
    members: &[F::Model],
    exams: &[usize],
) -> Result<Vec<WindowScores>> {
    let mut acc = vec![[0.0; 4]; exams.len()];
    for m in members {
        for (a, p) in acc.iter_mut().zip(family.predict(m, exams)?) {
            for t in 0..4 {
                a[t] += p[t] / members.len() as f64;
            }
        }
    }
    Ok(acc)
}

/// One JSON object per (config, repeat) run, then a final summary record.
pub fn write_selection_report<W: io::Write, M>(
    mut out: W,
    result: &SelectionResult<M>,
    lambda: Option<[f64; 4]>,
) -> Result<()> {
    let io_err = |e: io::Error| Error::io("selection report", e);
    for run in &result.runs {
        let line = json!({
            "kind": "run",
            "config": run.config,
            "repeat": run.repeat,
            "seed": run.seed,
            "hyperparameters": result.configs[run.config],
            "validation_score": run.validation_score,
            "wall_time_s": run.wall_time_s,
        });
        writeln!(out, "{line}").map_err(io_err)?;
    }
    let last = json!({
        "kind": "final",
        "top": result.top,
        "config_scores": result.config_scores,
        "lambda": lambda,
        "test_score": result.test_score,
        "test_metrics": result.test_metrics,
    });
    writeln!(out, "{last}").map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_examples() {
        let w = EnsembleWeights::new([1.0, 0.0, 0.5, 0.64], [0.2; 4]).unwrap();
        let out = ensemble_predict(&[0.5; 4], Some(&[0.25; 4]), &w);
        assert_eq!(out[0], 0.5);
        assert_eq!(out[1], 0.25);
        assert!((out[3] - 0.41).abs() < 1e-15);
        let imputed = ensemble_predict(&[0.5; 4], None, &w);
        assert_eq!(imputed[1], 0.2);
        assert!(EnsembleWeights::new([1.5, 0.0, 0.0, 0.0], [0.2; 4]).is_err());
    }

    #[test]
    fn identical_members_pick_zero() {
        let preds = vec![[0.1; 4], [0.7; 4], [0.4; 4], [0.9; 4]];
        let labels = vec![[false; 4], [true; 4], [false; 4], [true; 4]];
        assert_eq!(select_lambda(&preds, &preds, &labels).unwrap(), [0.0; 4]);
        let err = select_lambda(&preds, &preds, &[[true, false, false, false]; 4]).unwrap_err();
        assert!(err.to_string().contains("24 h"));
    }

    #[test]
    fn laws_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let g = SearchSpace::gbm().sample(&mut rng);
            assert!((100.0..=1000.0).contains(&g["num_trees"]) && g["num_trees"].fract() == 0.0);
            assert!((5.0..=15.0).contains(&g["max_leaves"]));
            let m = SearchSpace::gmic().sample(&mut rng);
            assert!((4e-6..=4e-3 * (1.0 + 1e-12)).contains(&m["sparsity_weight"]));
            assert!([0.2, 0.5, 0.8].contains(&SearchSpace::drc().sample(&mut rng)["pool_fraction"]));
        }
    }
}
