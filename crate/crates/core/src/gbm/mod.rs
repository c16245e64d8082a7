//! Clinical-variable model: featurization, boosted trees and a logistic baseline.

mod features;
mod logreg;
mod tree;

pub use features::{
    feature_names, featurize, load_clinical_csv, read_clinical_csv, write_clinical_csv, ClinicalTable, FeatureVector,
    Observation, Variable, DEMOGRAPHICS, LABS, LAB_WINDOW_HOURS, NUM_FEATURES, NUM_VALUES, VITALS,
};
pub use logreg::{fit_logreg, LogRegModel};
pub use tree::{fit_gbm, fit_gbm_traced, FitStatus, GbmModel, GbmParams, Node, Tree};

use crate::error::{Error, Result};

/// Rows of features with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != feature_names.len()) {
            return Err(Error::invalid(format!(
                "row {i} has {} features, schema has {}",
                rows[i].len(),
                feature_names.len()
            )));
        }
        if rows.iter().flatten().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Dataset {
            feature_names,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }
}
