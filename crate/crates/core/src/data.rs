//! Exam manifests, label derivation and the synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::drc::{self, SurvivalLabel, TIME_GRID};
use crate::ensemble::{WindowLabels, WINDOWS};
use crate::error::{Error, Result};
use crate::gbm::{write_clinical_csv, ClinicalTable, Observation, Variable, DEMOGRAPHICS, LABS, VITALS};
use crate::imaging::{write_pgm, RawImage};
use crate::tensor::sigmoid;

pub const MANIFEST_COLUMNS: [&str; 8] = [
    "exam_id",
    "patient_id",
    "image_path",
    "exam_time_h",
    "event_time_h",
    "censor_time_h",
    "split",
    "exclude",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

/// One exam. Times are hours since admission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub exam_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub exam_time_h: f64,
    pub event_time_h: Option<f64>,
    pub censor_time_h: f64,
    pub split: SplitName,
    pub exclude: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_risk: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Validates unique exam ids and that each patient sits in one split.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut splits: BTreeMap<&str, SplitName> = BTreeMap::new();
        for row in &rows {
            if !ids.insert(row.exam_id.as_str()) {
                return Err(Error::format(
                    "manifest",
                    format!("duplicate exam id `{}`", row.exam_id),
                ));
            }
            if let Some(&s) = splits.get(row.patient_id.as_str()) {
                if s != row.split {
                    return Err(Error::format(
                        "manifest",
                        format!("patient `{}` appears in both splits", row.patient_id),
                    ));
                }
            }
            splits.insert(&row.patient_id, row.split);
        }
        Ok(Manifest { rows })
    }

    pub fn read<R: io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader
            .headers()
            .map_err(Error::csv)?
            .iter()
            .map(str::to_string)
            .collect();
        let with_risk = header.len() == MANIFEST_COLUMNS.len() + 1 && header.last().is_some_and(|h| h == "true_risk");
        if header[..header.len().min(MANIFEST_COLUMNS.len())] != MANIFEST_COLUMNS
            || (header.len() != MANIFEST_COLUMNS.len() && !with_risk)
        {
            return Err(Error::format(
                "manifest",
                format!("unexpected header `{}`", header.join(",")),
            ));
        }
        let mut rows = vec![];
        for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
            rows.push(row.map_err(|e| Error::format("manifest", format!("row {}: {e}", line + 1)))?);
        }
        Manifest::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Manifest::read(io::BufReader::new(file))
    }

    pub fn write<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
        let with_risk = self.rows.iter().any(|r| r.true_risk.is_some());
        if with_risk {
            header.push("true_risk");
        }
        w.write_record(&header).map_err(Error::csv)?;
        let num = |v: f64| v.to_string();
        for r in &self.rows {
            let mut rec = vec![
                r.exam_id.clone(),
                r.patient_id.clone(),
                r.image_path.clone(),
                num(r.exam_time_h),
                r.event_time_h.map(num).unwrap_or_default(),
                num(r.censor_time_h),
                match r.split {
                    SplitName::Train => "train".into(),
                    SplitName::Test => "test".into(),
                },
                r.exclude.to_string(),
            ];
            if with_risk {
                rec.push(r.true_risk.map(num).unwrap_or_default());
            }
            w.write_record(&rec).map_err(Error::csv)?;
        }
        w.flush().map_err(|e| Error::format("csv", e.to_string()))
    }

    pub fn rows_in(&self, split: SplitName) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExamLabels {
    pub windows: WindowLabels,
    pub survival: SurvivalLabel,
}

/// Labels for one exam, or `None` when the exam is excluded (flagged, or
/// taken at or after the event).
pub fn derive_labels(row: &ManifestRow) -> Result<Option<ExamLabels>> {
    let bad = |detail: String| Error::format("manifest row", format!("`{}`: {detail}", row.exam_id));
    let valid = |t: f64| t.is_finite() && t >= 0.0;
    if !valid(row.exam_time_h) || !valid(row.censor_time_h) {
        return Err(bad(format!(
            "bad exam/censor time {} / {}",
            row.exam_time_h, row.censor_time_h
        )));
    }
    if let Some(ev) = row.event_time_h {
        if !valid(ev) {
            return Err(bad(format!("bad event time {ev}")));
        }
    }
    if row.exclude {
        return Ok(None);
    }
    match row.event_time_h {
        Some(ev) if row.exam_time_h >= ev => Ok(None),
        Some(ev) => {
            let dt = ev - row.exam_time_h;
            Ok(Some(ExamLabels {
                windows: WINDOWS.map(|w| dt <= f64::from(w)),
                survival: drc::to_label(Some(dt), f64::INFINITY)?,
            }))
        }
        None => {
            if row.censor_time_h < row.exam_time_h {
                return Err(bad("censored before the exam".into()));
            }
            Ok(Some(ExamLabels {
                windows: [false; 4],
                survival: drc::to_label(None, row.censor_time_h - row.exam_time_h)?,
            }))
        }
    }
}

/// Cure-mixture Weibull law in latent risk `r`: an event ever happens with
/// probability `sigmoid(a + b r)`, at a Weibull time with scale
/// `exp(c - d r)` and shape `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskLaw {
    pub cure_intercept: f64,
    pub cure_slope: f64,
    pub log_scale_intercept: f64,
    pub log_scale_slope: f64,
    pub shape: f64,
}

impl Default for RiskLaw {
    fn default() -> Self {
        RiskLaw {
            cure_intercept: -12.0,
            cure_slope: 50.0,
            log_scale_intercept: 200f64.ln(),
            log_scale_slope: 4.0,
            shape: 6.0,
        }
    }
}

/// Grid hazards are kept this far inside `(0, 1)`.
pub const HAZARD_FLOOR: f64 = 1e-12;

impl RiskLaw {
    fn logit(&self, r: f64) -> f64 {
        self.cure_intercept + self.cure_slope * r
    }

    fn scale(&self, r: f64) -> f64 {
        (self.log_scale_intercept - self.log_scale_slope * r).exp()
    }

    /// `P(T > t)`, written so that the cured mass never rounds away.
    pub fn survival(&self, r: f64, t: f64) -> f64 {
        let z = self.logit(r);
        let x = if t <= 0.0 {
            0.0
        } else {
            (t / self.scale(r)).powf(self.shape)
        };
        sigmoid(-z) + sigmoid(z) * (-x).exp()
    }

    /// Risk curve for an exam taken `elapsed` hours into follow-up, given no
    /// event so far.
    pub fn drc(&self, r: f64, elapsed: f64) -> [f64; 8] {
        if elapsed <= 0.0 {
            return drc::drc_from_conditionals(&self.hazards(r)).expect("hazards lie in (0, 1)");
        }
        let base = self.survival(r, elapsed);
        TIME_GRID.map(|t| 1.0 - self.survival(r, elapsed + t) / base)
    }

    /// Conditional event probability per grid interval.
    pub fn hazards(&self, r: f64) -> [f64; 8] {
        let mut prev = 1.0;
        TIME_GRID.map(|t| {
            let s = self.survival(r, t);
            let h = 1.0 - s / prev;
            prev = s;
            h.clamp(HAZARD_FLOOR, 1.0 - HAZARD_FLOOR)
        })
    }

    /// Walks the grid with the discrete hazards; inside the chosen interval
    /// (or past the grid) the time follows the continuous law.
    fn sample_event(&self, r: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
        let mut lo = 0.0;
        for (i, &h) in self.hazards(r).iter().enumerate() {
            if rng.random::<f64>() < h {
                return Some(self.inverse_between(r, lo, TIME_GRID[i], rng.random()));
            }
            lo = TIME_GRID[i];
        }
        let cured = sigmoid(-self.logit(r));
        let survivor = self.survival(r, lo);
        if rng.random::<f64>() * survivor < survivor - cured {
            return Some(self.inverse_between(r, lo, f64::INFINITY, rng.random()));
        }
        None
    }

    fn inverse_between(&self, r: f64, lo: f64, hi: f64, u: f64) -> f64 {
        let z = self.logit(r);
        let (slo, shi) = (self.survival(r, lo), self.survival(r, hi));
        let target = slo - u * (slo - shi);
        let x = -((target - sigmoid(-z)) / sigmoid(z)).ln();
        let t = self.scale(r) * x.max(0.0).powf(1.0 / self.shape);
        if t.is_finite() {
            t.clamp(lo, hi)
        } else {
            lo
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.cure_intercept,
            self.cure_slope,
            self.log_scale_intercept,
            self.log_scale_slope,
        ];
        if finite.iter().any(|v| !v.is_finite()) || !(self.shape > 0.0) || !self.shape.is_finite() {
            return Err(Error::Config(format!("invalid risk law {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_patients: usize,
    pub side: usize,
    /// Zero padding around the image, removed by preprocessing.
    pub border: usize,
    /// Share of patients with clear lungs and zero image risk.
    pub clear_fraction: f64,
    pub max_blobs: usize,
    pub pixel_noise: f64,
    /// When set, every patient's risk is drawn uniformly from these levels.
    pub risk_levels: Option<Vec<f64>>,
    pub law: RiskLaw,
    /// Risk = `w * image component + (1 - w) * tabular component`; below 1
    /// the two components are drawn independently.
    pub image_weight: f64,
    pub tabular_noise: f64,
    pub lab_missing_fraction: f64,
    pub vitals_missing_fraction: f64,
    pub max_exams: usize,
    pub exclude_fraction: f64,
    pub test_fraction: f64,
    pub censor_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_patients: 2000,
            side: 64,
            border: 4,
            clear_fraction: 0.3,
            max_blobs: 4,
            pixel_noise: 0.02,
            risk_levels: None,
            law: RiskLaw::default(),
            image_weight: 1.0,
            tabular_noise: 0.5,
            lab_missing_fraction: 0.25,
            vitals_missing_fraction: 0.05,
            max_exams: 1,
            exclude_fraction: 0.0,
            test_fraction: 0.5,
            censor_range: (120.0, 400.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let checks = [
            (self.num_patients >= 2, "num_patients must be at least 2"),
            (self.side >= 16, "side must be at least 16"),
            (self.max_blobs >= 1, "max_blobs must be positive"),
            (self.max_exams >= 1, "max_exams must be positive"),
            (
                self.pixel_noise >= 0.0 && self.tabular_noise >= 0.0,
                "noise levels must be nonnegative",
            ),
            (
                unit(self.clear_fraction)
                    && unit(self.image_weight)
                    && unit(self.lab_missing_fraction)
                    && unit(self.vitals_missing_fraction)
                    && unit(self.exclude_fraction),
                "fractions must lie in [0, 1]",
            ),
            (
                self.test_fraction > 0.0 && self.test_fraction < 1.0,
                "test_fraction must lie in (0, 1)",
            ),
            (
                self.censor_range.0 >= 0.0 && self.censor_range.0 <= self.censor_range.1,
                "censor_range must be ordered and nonnegative",
            ),
            (
                self.risk_levels
                    .as_ref()
                    .is_none_or(|l| !l.is_empty() && l.iter().all(|&v| unit(v))),
                "risk_levels must be nonempty values in [0, 1]",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.law.validate()?;
        Ok(())
    }
}

/// A generated cohort held in memory; `images` and `true_drc` align with
/// `manifest.rows`.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub manifest: Manifest,
    pub images: Vec<RawImage>,
    pub clinical: ClinicalTable,
    pub true_drc: Vec<[f64; 8]>,
}

impl SyntheticCohort {
    /// Writes `manifest.csv`, `clinical.csv`, `true_drc.csv` and
    /// `images/<exam_id>.pgm` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (row, img) in self.manifest.rows.iter().zip(&self.images) {
            write_pgm(dir.join(&row.image_path), img)?;
        }
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path)
                .map(io::BufWriter::new)
                .map_err(|e| Error::io(&path, e))
        };
        self.manifest.write(create("manifest.csv")?)?;
        write_clinical_csv(create("clinical.csv")?, &self.clinical)?;
        let curves: Vec<(String, [f64; 8])> = self
            .manifest
            .rows
            .iter()
            .map(|r| r.exam_id.clone())
            .zip(self.true_drc.iter().copied())
            .collect();
        drc::write_drc_csv(create("true_drc.csv")?, &curves)
    }
}

/// Clinical variable template: baseline, spread and direction of the risk
/// effect (0 for pure noise).
const TABULAR_TEMPLATE: [(&str, f64, f64, f64); 33] = [
    ("heart_rate", 85.0, 12.0, 1.0),
    ("respiratory_rate", 18.0, 4.0, 1.0),
    ("temperature", 37.2, 0.6, 1.0),
    ("systolic_bp", 128.0, 15.0, -0.5),
    ("diastolic_bp", 76.0, 9.0, 0.0),
    ("oxygen_saturation", 95.0, 3.0, -1.0),
    ("age", 60.0, 15.0, 1.0),
    ("weight", 85.0, 18.0, 0.0),
    ("bmi", 29.0, 5.0, 0.5),
    ("albumin", 3.6, 0.5, -1.0),
    ("alt", 40.0, 20.0, 0.0),
    ("ast", 45.0, 20.0, 0.5),
    ("total_bilirubin", 0.7, 0.3, 0.0),
    ("blood_urea_nitrogen", 20.0, 8.0, 1.0),
    ("calcium", 8.8, 0.5, -0.5),
    ("chloride", 101.0, 4.0, 0.0),
    ("creatinine", 1.1, 0.4, 0.5),
    ("d_dimer", 1.0, 0.6, 1.0),
    ("eosinophils_pct", 0.8, 0.5, -0.5),
    ("eosinophils_count", 0.05, 0.03, 0.0),
    ("hematocrit", 40.0, 5.0, 0.0),
    ("ldh", 320.0, 90.0, 1.0),
    ("lymphocytes_pct", 15.0, 6.0, -1.0),
    ("lymphocytes_count", 1.0, 0.4, -1.0),
    ("platelet_volume", 10.5, 1.0, 0.0),
    ("neutrophils_count", 5.5, 2.0, 1.0),
    ("neutrophils_pct", 75.0, 8.0, 0.5),
    ("platelet_count", 220.0, 60.0, 0.0),
    ("potassium", 4.1, 0.4, 0.0),
    ("procalcitonin", 0.3, 0.2, 1.0),
    ("total_protein", 7.0, 0.6, 0.0),
    ("sodium", 137.0, 3.0, 0.0),
    ("troponin", 0.02, 0.01, 0.5),
];

struct Patient {
    image_risk: f64,
    tabular_risk: f64,
    risk: f64,
}

fn draw_patient(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Patient {
    let component = |rng: &mut ChaCha8Rng| {
        if rng.random::<f64>() < spec.clear_fraction {
            0.0
        } else {
            rng.random::<f64>()
        }
    };
    if let Some(levels) = &spec.risk_levels {
        let r = levels[rng.random_range(0..levels.len())];
        return Patient {
            image_risk: r,
            tabular_risk: r,
            risk: r,
        };
    }
    let image_risk = component(rng);
    let tabular_risk = if spec.image_weight < 1.0 {
        component(rng)
    } else {
        image_risk
    };
    Patient {
        image_risk,
        tabular_risk,
        risk: spec.image_weight * image_risk + (1.0 - spec.image_weight) * tabular_risk,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Chest-like phantom: bright mediastinum band, dark lung fields with
/// textured noise and Gaussian opacities whose summed `sigma^2` is
/// proportional to `risk`.
fn render_image(spec: &SyntheticSpec, risk: f64, rng: &mut ChaCha8Rng) -> Result<RawImage> {
    let side = spec.side;
    let s = side as f64;
    let lungs = [(0.3 * s, 0.5 * s), (0.7 * s, 0.5 * s)];
    let (rx, ry) = (0.16 * s, 0.34 * s);
    let in_lung = |x: f64, y: f64| {
        lungs
            .iter()
            .any(|&(cx, cy)| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0)
    };
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut field = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = if (fx - 0.5 * s).abs() < 0.06 * s {
                0.85
            } else if in_lung(fx, fy) {
                0.15
            } else {
                0.45
            };
            let texture = 0.03 * (fx * 0.35 + phase).sin() * (fy * 0.27 - phase).cos();
            field[y * side + x] = base + texture + spec.pixel_noise * normal(rng);
        }
    }
    if risk > 0.0 {
        let count = rng.random_range(1..=spec.max_blobs);
        let weights: Vec<f64> = (0..count).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let total: f64 = weights.iter().sum();
        let budget = 0.03 * s * s * risk;
        for w in weights {
            let sigma = (budget * w / total).sqrt();
            let amplitude = rng.random_range(0.45..0.6);
            let (cx, cy) = lungs[rng.random_range(0..2)];
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = 0.6 * rng.random::<f64>().sqrt();
            let (bx, by) = (cx + radius * rx * angle.cos(), cy + radius * ry * angle.sin());
            for y in 0..side {
                for x in 0..side {
                    let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                    field[y * side + x] += amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let full = side + 2 * spec.border;
    let mut pixels = vec![0u16; full * full];
    for y in 0..side {
        for x in 0..side {
            let v = field[y * side + x].clamp(0.0, 1.0);
            pixels[(y + spec.border) * full + x + spec.border] = (v * 65535.0).round() as u16;
        }
    }
    RawImage::new(full, full, pixels)
}

fn clinical_observations(
    spec: &SyntheticSpec,
    tabular_risk: f64,
    exam_times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Observation> {
    let mut obs = vec![];
    let value = |name: &str, rng: &mut ChaCha8Rng| {
        let &(_, base, spread, direction) = TABULAR_TEMPLATE
            .iter()
            .find(|t| t.0 == name)
            .expect("template covers the schema");
        base + spread * (direction * 2.0 * (tabular_risk - 0.5) + spec.tabular_noise * normal(rng))
    };
    for name in DEMOGRAPHICS {
        let v = value(name, rng);
        obs.push((0.0, name, v));
    }
    for &exam in exam_times {
        let vitals_at = if rng.random::<f64>() < spec.vitals_missing_fraction {
            exam + rng.random_range(0.5..2.0)
        } else {
            (exam - rng.random_range(0.0..2.0)).max(0.0)
        };
        for name in VITALS {
            let v = value(name, rng);
            obs.push((vitals_at, name, v));
        }
        for name in LABS {
            if rng.random::<f64>() < spec.lab_missing_fraction {
                continue;
            }
            for _ in 0..rng.random_range(1..=2) {
                let t = (exam - rng.random_range(0.0..11.5)).max(0.0);
                let v = value(name, rng);
                obs.push((t, name, v));
            }
        }
    }
    obs.into_iter()
        .map(|(t, name, v)| Observation {
            timestamp_h: t,
            variable: Variable::parse(name).expect("schema name"),
            value: v,
        })
        .collect()
}

/// Builds a cohort fully determined by `spec` (including its seed).
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let n = spec.num_patients;
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split_rng);
    let num_test = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut is_test = vec![false; n];
    for &i in &order[..num_test] {
        is_test[i] = true;
    }

    let mut rows = vec![];
    let mut images = vec![];
    let mut true_drc = vec![];
    let mut clinical = ClinicalTable::new();
    for (p, &test) in is_test.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(p as u64 + 1);
        let patient = draw_patient(spec, &mut rng);
        let first_exam = rng.random_range(0.0..12.0);
        let event = spec.law.sample_event(patient.risk, &mut rng).map(|t| first_exam + t);
        let censor = first_exam + rng.random_range(spec.censor_range.0..=spec.censor_range.1);
        let (event_time, censor_time) = match event {
            Some(t) if t <= censor => (Some(t), t),
            _ => (None, censor),
        };
        let num_exams = rng.random_range(1..=spec.max_exams);
        let mut exam_times = vec![first_exam];
        for _ in 1..num_exams {
            let last = *exam_times.last().expect("nonempty");
            exam_times.push(last + rng.random_range(6.0..48.0));
        }
        let patient_id = format!("p{p:05}");
        for (e, &t) in exam_times.iter().enumerate() {
            let exam_id = format!("{patient_id}-e{}", e + 1);
            images.push(render_image(spec, patient.image_risk, &mut rng)?);
            true_drc.push(spec.law.drc(patient.risk, t - first_exam));
            rows.push(ManifestRow {
                image_path: format!("images/{exam_id}.pgm"),
                exam_id,
                patient_id: patient_id.clone(),
                exam_time_h: t,
                event_time_h: event_time,
                censor_time_h: censor_time,
                split: if test { SplitName::Test } else { SplitName::Train },
                exclude: rng.random::<f64>() < spec.exclude_fraction,
                true_risk: Some(patient.risk),
            });
        }
        let obs = clinical_observations(spec, patient.tabular_risk, &exam_times, &mut rng);
        clinical.insert(patient_id, obs);
    }
    Ok(SyntheticCohort {
        manifest: Manifest::new(rows)?,
        images,
        clinical,
        true_drc,
    })
}

/// [`synthesize`] followed by [`SyntheticCohort::write`].
pub fn generate_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<SyntheticCohort> {
    let cohort = synthesize(spec)?;
    cohort.write(dir)?;
    Ok(cohort)
}
