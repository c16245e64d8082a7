//! Clinical variable schema, long-format CSV ingestion and featurization.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VITALS: [&str; 6] = [
    "heart_rate",
    "respiratory_rate",
    "temperature",
    "systolic_bp",
    "diastolic_bp",
    "oxygen_saturation",
];

pub const DEMOGRAPHICS: [&str; 3] = ["age", "weight", "bmi"];

pub const LABS: [&str; 24] = [
    "albumin",
    "alt",
    "ast",
    "total_bilirubin",
    "blood_urea_nitrogen",
    "calcium",
    "chloride",
    "creatinine",
    "d_dimer",
    "eosinophils_pct",
    "eosinophils_count",
    "hematocrit",
    "ldh",
    "lymphocytes_pct",
    "lymphocytes_count",
    "platelet_volume",
    "neutrophils_count",
    "neutrophils_pct",
    "platelet_count",
    "potassium",
    "procalcitonin",
    "total_protein",
    "sodium",
    "troponin",
];

/// Lab statistics look back this many hours before the reference time.
pub const LAB_WINDOW_HOURS: f64 = 12.0;

/// Number of value features before the missingness flags.
pub const NUM_VALUES: usize = VITALS.len() + DEMOGRAPHICS.len() + 2 * LABS.len();

pub const NUM_FEATURES: usize = 2 * NUM_VALUES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    Vital(usize),
    Demographic(usize),
    Lab(usize),
}

impl Variable {
    pub fn parse(name: &str) -> Option<Variable> {
        let find = |list: &[&str]| list.iter().position(|&v| v == name);
        find(&VITALS)
            .map(Variable::Vital)
            .or_else(|| find(&DEMOGRAPHICS).map(Variable::Demographic))
            .or_else(|| find(&LABS).map(Variable::Lab))
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Variable::Vital(i) => VITALS[i],
            Variable::Demographic(i) => DEMOGRAPHICS[i],
            Variable::Lab(i) => LABS[i],
        }
    }
}

/// One row of the long-format clinical table.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub timestamp_h: f64,
    pub variable: Variable,
    pub value: f64,
}

/// Value feature names in vector order; flag names append `_missing`.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = VITALS.iter().chain(&DEMOGRAPHICS).map(|s| s.to_string()).collect();
    for lab in LABS {
        names.push(format!("{lab}_min"));
        names.push(format!("{lab}_max"));
    }
    let flags: Vec<String> = names.iter().map(|n| format!("{n}_missing")).collect();
    names.extend(flags);
    names
}

/// Fixed-order features. Missing values are NaN and their flag is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn all_missing() -> Self {
        let mut values = vec![f64::NAN; NUM_VALUES];
        values.extend(std::iter::repeat_n(1.0, NUM_VALUES));
        FeatureVector { values }
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.values[i].is_nan()
    }

    /// Whether nothing at all was recorded.
    pub fn is_empty(&self) -> bool {
        self.values[..NUM_VALUES].iter().all(|v| v.is_nan())
    }
}

/// Builds the feature vector for one patient at `reference_time`.
///
/// Vitals come from the latest measurement time at or before the reference;
/// labs are summarized by min and max over `(reference - 12 h, reference]`;
/// demographics take their latest value at or before the reference, or the
/// earliest recorded value otherwise. Without any vitals at or before the
/// reference every entry is missing.
pub fn featurize(observations: &[Observation], reference_time: f64) -> FeatureVector {
    let Some(vital_time) = observations
        .iter()
        .filter(|o| matches!(o.variable, Variable::Vital(_)) && o.timestamp_h <= reference_time)
        .map(|o| o.timestamp_h)
        .max_by(f64::total_cmp)
    else {
        return FeatureVector::all_missing();
    };
    let mut values = vec![f64::NAN; NUM_VALUES];
    let mut demo_time = [None::<(bool, f64)>; DEMOGRAPHICS.len()];
    let lab_base = VITALS.len() + DEMOGRAPHICS.len();
    for o in observations {
        match o.variable {
            Variable::Vital(i) if o.timestamp_h == vital_time => values[i] = o.value,
            Variable::Vital(_) => {}
            Variable::Demographic(i) => {
                let before = o.timestamp_h <= reference_time;
                // Prefer the latest value at or before the reference, else the earliest one.
                let better = match demo_time[i] {
                    None => true,
                    Some((was_before, t)) => match (before, was_before) {
                        (true, true) => o.timestamp_h >= t,
                        (true, false) => true,
                        (false, true) => false,
                        (false, false) => o.timestamp_h < t,
                    },
                };
                if better {
                    demo_time[i] = Some((before, o.timestamp_h));
                    values[VITALS.len() + i] = o.value;
                }
            }
            Variable::Lab(i) => {
                if o.timestamp_h > reference_time - LAB_WINDOW_HOURS && o.timestamp_h <= reference_time {
                    let (lo, hi) = (lab_base + 2 * i, lab_base + 2 * i + 1);
                    values[lo] = if values[lo].is_nan() {
                        o.value
                    } else {
                        values[lo].min(o.value)
                    };
                    values[hi] = if values[hi].is_nan() {
                        o.value
                    } else {
                        values[hi].max(o.value)
                    };
                }
            }
        }
    }
    let flags: Vec<f64> = values.iter().map(|v| f64::from(u8::from(v.is_nan()))).collect();
    values.extend(flags);
    FeatureVector { values }
}

#[derive(Debug, Deserialize, Serialize)]
struct ClinicalRow {
    patient_id: String,
    timestamp_h: f64,
    variable_name: String,
    value: f64,
}

/// Per-patient observations keyed by patient id.
pub type ClinicalTable = BTreeMap<String, Vec<Observation>>;

/// Reads `patient_id,timestamp_h,variable_name,value`. Unknown variables,
/// negative timestamps and non-finite values are rejected.
pub fn read_clinical_csv<R: io::Read>(input: R) -> Result<ClinicalTable> {
    let mut table = ClinicalTable::new();
    for (line, row) in csv::Reader::from_reader(input).deserialize::<ClinicalRow>().enumerate() {
        let row = row.map_err(Error::csv)?;
        let at = |detail: String| Error::format("clinical csv", format!("row {}: {detail}", line + 1));
        let variable = Variable::parse(&row.variable_name)
            .ok_or_else(|| at(format!("unknown variable `{}`", row.variable_name)))?;
        if !(row.timestamp_h >= 0.0) || !row.timestamp_h.is_finite() {
            return Err(at(format!("bad timestamp {}", row.timestamp_h)));
        }
        if !row.value.is_finite() {
            return Err(at(format!("non-finite value for {}", row.variable_name)));
        }
        table.entry(row.patient_id).or_default().push(Observation {
            timestamp_h: row.timestamp_h,
            variable,
            value: row.value,
        });
    }
    Ok(table)
}

pub fn load_clinical_csv(path: impl AsRef<Path>) -> Result<ClinicalTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_clinical_csv(io::BufReader::new(file))
}

pub fn write_clinical_csv<W: io::Write>(out: W, table: &ClinicalTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, obs) in table {
        for o in obs {
            w.serialize(ClinicalRow {
                patient_id: id.clone(),
                timestamp_h: o.timestamp_h,
                variable_name: o.variable.name().to_string(),
                value: o.value,
            })
            .map_err(Error::csv)?;
        }
    }
    w.flush().map_err(|e| Error::format("csv", e.to_string()))
}
