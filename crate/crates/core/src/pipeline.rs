//! Glue between manifests, images, clinical tables and the three model
//! families: loading, training, prediction and evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{derive_labels, ExamLabels, Manifest, ManifestRow, SplitName, SyntheticCohort};
use crate::drc::{self, DrcModel, SurvivalLabel, TIME_GRID};
use crate::ensemble::{validation_score, WindowLabels, WindowScores};
use crate::error::{Error, Result};
use crate::gbm::{
    feature_names, featurize, fit_gbm, fit_logreg, ClinicalTable, Dataset, GbmModel, GbmParams, LogRegModel,
};
use crate::gmic::{build_forward, gmic_loss, GmicConfig, GmicModel};
use crate::imaging::{preprocess, read_pgm, tta_average, AugmentPolicy, NormalizeConfig, ProcessedImage, RawImage};
use crate::metrics::{concordance_at, reliability, ReliabilityCurve};
use crate::train::{fit, Example, TrainOptions, TrainReport};

/// Grid positions of the 24/48/72/96 h windows.
pub const WINDOW_GRID_INDEX: [usize; 4] = [2, 3, 4, 5];

/// An included exam with its preprocessed image and labels.
#[derive(Clone, Debug)]
pub struct ExamRecord {
    pub row: ManifestRow,
    pub image: ProcessedImage,
    pub labels: ExamLabels,
}

impl ExamRecord {
    /// Hours from the exam to the event, when one was observed.
    pub fn event_delay(&self) -> Option<f64> {
        self.row.event_time_h.map(|t| t - self.row.exam_time_h)
    }
}

#[derive(Clone, Debug)]
pub struct ExamSet {
    pub records: Vec<ExamRecord>,
    /// Exams dropped by the inclusion rules.
    pub excluded: usize,
}

impl ExamSet {
    fn build<F>(manifest: &Manifest, side: usize, norm: &NormalizeConfig, mut image: F) -> Result<Self>
    where
        F: FnMut(usize, &ManifestRow) -> Result<RawImage>,
    {
        let mut records = vec![];
        let mut excluded = 0;
        for (i, row) in manifest.rows.iter().enumerate() {
            let Some(labels) = derive_labels(row)? else {
                excluded += 1;
                continue;
            };
            let raw = image(i, row)?;
            let mut row = row.clone();
            row.true_risk = None;
            records.push(ExamRecord {
                row,
                image: preprocess(&raw, side, norm)?,
                labels,
            });
        }
        Ok(ExamSet { records, excluded })
    }

    /// Reads every included exam's image relative to `base_dir`.
    pub fn load(manifest: &Manifest, base_dir: &Path, side: usize, norm: &NormalizeConfig) -> Result<Self> {
        ExamSet::build(manifest, side, norm, |_, row| read_pgm(base_dir.join(&row.image_path)))
    }

    pub fn from_cohort(cohort: &SyntheticCohort, side: usize, norm: &NormalizeConfig) -> Result<Self> {
        ExamSet::build(&cohort.manifest, side, norm, |i, _| Ok(cohort.images[i].clone()))
    }

    pub fn split(&self, split: SplitName) -> Vec<&ExamRecord> {
        self.records.iter().filter(|r| r.row.split == split).collect()
    }
}

/// Deterministic patient-level holdout used for epoch selection: a patient
/// goes to validation when its position in a seeded shuffle falls in the
/// first `fraction`.
pub fn holdout<'a>(records: &[&'a ExamRecord], fraction: f64, seed: u64) -> (Vec<&'a ExamRecord>, Vec<&'a ExamRecord>) {
    let mut patients: Vec<&str> = records.iter().map(|r| r.row.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(patients.as_mut_slice(), &mut rng);
    let k = ((fraction * patients.len() as f64).round() as usize).min(patients.len());
    let held: std::collections::BTreeSet<&str> = patients[..k].iter().copied().collect();
    records.iter().partition(|r| !held.contains(r.row.patient_id.as_str()))
}

fn window_targets(labels: &WindowLabels) -> Vec<f64> {
    labels.iter().map(|&y| f64::from(u8::from(y))).collect()
}

/// Per-exam predictions, optionally averaged over augmented copies.
fn predict_images<F>(records: &[&ExamRecord], tta: Option<(&AugmentPolicy, usize)>, forward: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&ProcessedImage) -> Result<Vec<f64>>,
{
    records
        .iter()
        .map(|r| match tta {
            Some((policy, n)) => tta_average(&forward, &r.image, policy, n),
            None => forward(&r.image),
        })
        .collect()
}

pub fn gmic_scores(
    model: &GmicModel,
    records: &[&ExamRecord],
    tta: Option<(&AugmentPolicy, usize)>,
) -> Result<Vec<WindowScores>> {
    predict_images(records, tta, |img| model.predict(img))?
        .into_iter()
        .map(|p| {
            p.try_into()
                .map_err(|p: Vec<f64>| Error::invalid(format!("expected 4 outputs, got {}", p.len())))
        })
        .collect()
}

/// Trains the four-window classifier; `validation` (when nonempty) picks the
/// best epoch by mean (AUC + PR AUC) / 2.
pub fn train_gmic(
    config: &GmicConfig,
    train: &[&ExamRecord],
    validation: &[&ExamRecord],
    opts: &TrainOptions,
) -> Result<(GmicModel, TrainReport)> {
    if config.num_windows != 4 {
        return Err(Error::Config(format!(
            "classifier needs 4 windows, config has {}",
            config.num_windows
        )));
    }
    let mut store = config.init_params(&mut ChaCha8Rng::seed_from_u64(opts.seed))?;
    let examples: Vec<Example<'_, Vec<f64>>> = train
        .iter()
        .map(|r| Example {
            image: &r.image,
            target: window_targets(&r.labels.windows),
        })
        .collect();
    let labels: Vec<WindowLabels> = validation.iter().map(|r| r.labels.windows).collect();
    let validate = |store: &crate::tensor::ParamStore| {
        let model = GmicModel {
            config: config.clone(),
            params: store.clone(),
        };
        validation_score(&gmic_scores(&model, validation, None)?, &labels)
    };
    let loss = |g: &mut crate::tensor::Graph, s: &crate::tensor::ParamStore, img: &ProcessedImage, y: &Vec<f64>| {
        let nodes = build_forward(g, s, config, img)?;
        gmic_loss(g, &nodes, y, config.sparsity_weight)
    };
    let report = fit(
        &mut store,
        &examples,
        opts,
        loss,
        (!validation.is_empty()).then_some(validate),
    )?;
    Ok((GmicModel::new(config.clone(), store)?, report))
}

pub fn drc_curves(
    model: &DrcModel,
    records: &[&ExamRecord],
    tta: Option<(&AugmentPolicy, usize)>,
) -> Result<Vec<[f64; 8]>> {
    let conditionals = predict_images(records, tta, |img| Ok(model.forward(img)?.p_fusion))?;
    conditionals.iter().map(|p| drc::drc_from_conditionals(p)).collect()
}

/// Curve values at the four classification windows.
pub fn curve_window_scores(curve: &[f64; 8]) -> WindowScores {
    WINDOW_GRID_INDEX.map(|i| curve[i])
}

/// Trains the risk-curve model; `validation` (when nonempty) picks the epoch
/// with the lowest mean negative log-likelihood.
pub fn train_drc(
    config: &GmicConfig,
    train: &[&ExamRecord],
    validation: &[&ExamRecord],
    opts: &TrainOptions,
) -> Result<(DrcModel, TrainReport)> {
    if config.num_windows != drc::NUM_OUTPUTS {
        return Err(Error::Config(format!(
            "risk-curve model needs {} windows, config has {}",
            drc::NUM_OUTPUTS,
            config.num_windows
        )));
    }
    let mut store = config.init_params(&mut ChaCha8Rng::seed_from_u64(opts.seed))?;
    let examples: Vec<Example<'_, SurvivalLabel>> = train
        .iter()
        .map(|r| Example {
            image: &r.image,
            target: r.labels.survival,
        })
        .collect();
    let validate = |store: &crate::tensor::ParamStore| {
        let mut total = 0.0;
        for r in validation {
            let p = drc::drc_forward(&r.image, config, store)?.p_fusion;
            total += drc::nll(&r.labels.survival, &p)?;
        }
        Ok(-total / validation.len() as f64)
    };
    let loss = |g: &mut crate::tensor::Graph,
                s: &crate::tensor::ParamStore,
                img: &ProcessedImage,
                y: &SurvivalLabel| { drc::drc_example_loss(g, s, config, img, y) };
    let report = fit(
        &mut store,
        &examples,
        opts,
        loss,
        (!validation.is_empty()).then_some(validate),
    )?;
    Ok((DrcModel::new(config.clone(), store)?, report))
}

/// Featurizes each exam at its exam time.
pub fn tabular_rows(records: &[&ExamRecord], clinical: &ClinicalTable) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let obs = clinical.get(&r.row.patient_id).map(Vec::as_slice).unwrap_or(&[]);
            featurize(obs, r.row.exam_time_h).values
        })
        .collect()
}

fn window_dataset(rows: &[Vec<f64>], records: &[&ExamRecord], window: usize) -> Result<Dataset> {
    Dataset::new(
        feature_names(),
        rows.to_vec(),
        records.iter().map(|r| r.labels.windows[window]).collect(),
    )
}

/// One boosted model per window.
#[derive(Clone, Debug, PartialEq)]
pub struct GbmWindows {
    pub models: Vec<GbmModel>,
}

impl GbmWindows {
    pub fn fit(records: &[&ExamRecord], clinical: &ClinicalTable, params: &GbmParams) -> Result<Self> {
        let rows = tabular_rows(records, clinical);
        let models = (0..4)
            .map(|w| fit_gbm(&window_dataset(&rows, records, w)?, params))
            .collect::<Result<_>>()?;
        Ok(GbmWindows { models })
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<WindowScores>> {
        rows.iter()
            .map(|x| {
                let mut out = [0.0; 4];
                for (o, m) in out.iter_mut().zip(&self.models) {
                    *o = m.predict(x)?;
                }
                Ok(out)
            })
            .collect()
    }

    pub fn predict(&self, records: &[&ExamRecord], clinical: &ClinicalTable) -> Result<Vec<WindowScores>> {
        self.predict_rows(&tabular_rows(records, clinical))
    }
}

/// One logistic baseline per window.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRegWindows {
    pub models: Vec<LogRegModel>,
}

impl LogRegWindows {
    pub fn fit(records: &[&ExamRecord], clinical: &ClinicalTable, l2: f64, iterations: usize) -> Result<Self> {
        let rows = tabular_rows(records, clinical);
        let models = (0..4)
            .map(|w| fit_logreg(&window_dataset(&rows, records, w)?, l2, iterations))
            .collect::<Result<_>>()?;
        Ok(LogRegWindows { models })
    }

    pub fn predict(&self, records: &[&ExamRecord], clinical: &ClinicalTable) -> Result<Vec<WindowScores>> {
        tabular_rows(records, clinical)
            .iter()
            .map(|x| {
                let mut out = [0.0; 4];
                for (o, m) in out.iter_mut().zip(&self.models) {
                    *o = m.predict(x)?;
                }
                Ok(out)
            })
            .collect()
    }
}

/// Index of the 96 h point on the grid.
pub const T96: usize = 5;

/// Risk-curve evaluation at one horizon: concordance among exams with an
/// observed event and the decile reliability curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveEvaluation {
    pub t_hours: f64,
    pub concordance: f64,
    pub reliability: ReliabilityCurve,
}

pub fn evaluate_curves(records: &[&ExamRecord], curves: &[[f64; 8]], grid_index: usize) -> Result<CurveEvaluation> {
    if records.len() != curves.len() {
        return Err(Error::invalid(format!(
            "{} exams but {} curves",
            records.len(),
            curves.len()
        )));
    }
    let risk: Vec<f64> = curves.iter().map(|c| c[grid_index]).collect();
    let times: Vec<Option<f64>> = records.iter().map(|r| r.event_delay()).collect();
    let outcomes: Vec<Option<bool>> = records
        .iter()
        .map(|r| r.labels.survival.event_by(grid_index + 1))
        .collect();
    let t = TIME_GRID[grid_index];
    Ok(CurveEvaluation {
        t_hours: t,
        concordance: concordance_at(&risk, &times)?,
        reliability: reliability(t, &risk, &outcomes)?,
    })
}
