//! Python bindings: metrics, risk-curve helpers, synthetic cohorts and
//! inference with trained image models.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use prognosis_core::config::{Family, RunConfig};
use prognosis_core::data::{generate_synthetic, SyntheticSpec};
use prognosis_core::drc::{self, DrcModel};
use prognosis_core::ensemble::{ensemble_predict, EnsembleWeights, WindowScores};
use prognosis_core::gmic::{aggregate_topr as topr, GmicModel};
use prognosis_core::imaging::{preprocess, read_pgm, NormalizeConfig};
use prognosis_core::tensor::read_checkpoint;
use prognosis_core::{metrics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn windows(v: Vec<f64>) -> PyResult<WindowScores> {
    v.try_into()
        .map_err(|_| PyValueError::new_err("expected four window probabilities"))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn pr_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::pr_auc(&scores, &labels).map_err(py_err)
}

/// Returns `(point, lo, hi)` of a percentile bootstrap interval for ROC AUC.
#[pyfunction]
#[pyo3(signature = (scores, labels, iterations = 1000, seed = 0))]
fn roc_auc_ci(scores: Vec<f64>, labels: Vec<bool>, iterations: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let ci = metrics::roc_auc_ci(&scores, &labels, iterations, seed).map_err(py_err)?;
    Ok((ci.point, ci.lo, ci.hi))
}

/// Concordance of risk scores among patients with an event (`None` = no event).
#[pyfunction]
fn concordance(risk: Vec<f64>, event_times: Vec<Option<f64>>) -> PyResult<f64> {
    metrics::concordance_at(&risk, &event_times).map_err(py_err)
}

/// Risk curve from eight per-interval conditional probabilities.
#[pyfunction]
fn risk_curve(conditionals: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(drc::drc_from_conditionals(&conditionals).map_err(py_err)?.to_vec())
}

#[pyfunction]
fn time_grid() -> Vec<f64> {
    drc::TIME_GRID.to_vec()
}

/// Mean of the top `fraction` of a saliency map.
#[pyfunction]
fn aggregate_topr(map: Vec<f64>, fraction: f64) -> PyResult<f64> {
    topr(&map, fraction).map_err(py_err)
}

/// Image/tabular blend; a missing tabular prediction is replaced by `imputation`.
#[pyfunction]
fn ensemble(image: Vec<f64>, tabular: Option<Vec<f64>>, lambda_: Vec<f64>, imputation: Vec<f64>) -> PyResult<Vec<f64>> {
    let weights = EnsembleWeights::new(windows(lambda_)?, windows(imputation)?).map_err(py_err)?;
    let tabular = tabular.map(windows).transpose()?;
    Ok(ensemble_predict(&windows(image)?, tabular.as_ref(), &weights).to_vec())
}

/// Writes a synthetic cohort to `out_dir`; returns the number of exams.
#[pyfunction]
#[pyo3(signature = (out_dir, num_patients = 2000, seed = 0, image_side = 64))]
fn synthesize(out_dir: PathBuf, num_patients: usize, seed: u64, image_side: usize) -> PyResult<usize> {
    let spec = SyntheticSpec {
        num_patients,
        seed,
        side: image_side,
        ..SyntheticSpec::default()
    };
    Ok(generate_synthetic(&spec, &out_dir).map_err(py_err)?.manifest.rows.len())
}

enum Inner {
    Gmic(GmicModel),
    Drc(DrcModel),
}

/// A trained image model loaded from a `train` output directory.
#[pyclass(frozen)]
struct ImageModel {
    inner: Inner,
}

#[pymethods]
impl ImageModel {
    #[new]
    fn new(model_dir: PathBuf) -> PyResult<Self> {
        let cfg = RunConfig::load(model_dir.join("config.txt")).map_err(py_err)?;
        let params = read_checkpoint(model_dir.join("model.ckpt")).map_err(py_err)?;
        let gcfg = cfg.gmic_config().map_err(py_err)?;
        let inner = match cfg.family() {
            Family::Gmic => Inner::Gmic(GmicModel::new(gcfg, params).map_err(py_err)?),
            Family::Drc => Inner::Drc(DrcModel::new(gcfg, params).map_err(py_err)?),
            other => return Err(PyValueError::new_err(format!("`{other}` is not an image model"))),
        };
        Ok(ImageModel { inner })
    }

    #[getter]
    fn family(&self) -> &'static str {
        match self.inner {
            Inner::Gmic(_) => "gmic",
            Inner::Drc(_) => "drc",
        }
    }

    /// Per-window probabilities for a PGM image (read off the curve for `drc`).
    fn predict(&self, image: PathBuf) -> PyResult<Vec<f64>> {
        let raw = read_pgm(&image).map_err(py_err)?;
        let norm = NormalizeConfig::default();
        match &self.inner {
            Inner::Gmic(m) => m
                .predict(&preprocess(&raw, m.config.input_side, &norm).map_err(py_err)?)
                .map_err(py_err),
            Inner::Drc(m) => {
                let img = preprocess(&raw, m.config.input_side, &norm).map_err(py_err)?;
                let curve = m.predict_curve(&img).map_err(py_err)?;
                Ok(prognosis_core::pipeline::curve_window_scores(&curve).to_vec())
            }
        }
    }

    /// Eight-point risk curve; `drc` models only.
    fn risk_curve(&self, image: PathBuf) -> PyResult<Vec<f64>> {
        let Inner::Drc(m) = &self.inner else {
            return Err(PyValueError::new_err("risk curves need a drc model"));
        };
        let raw = read_pgm(&image).map_err(py_err)?;
        let img = preprocess(&raw, m.config.input_side, &NormalizeConfig::default()).map_err(py_err)?;
        Ok(m.predict_curve(&img).map_err(py_err)?.to_vec())
    }
}

#[pymodule]
fn prognosis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc_ci, m)?)?;
    m.add_function(wrap_pyfunction!(concordance, m)?)?;
    m.add_function(wrap_pyfunction!(risk_curve, m)?)?;
    m.add_function(wrap_pyfunction!(time_grid, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_topr, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<ImageModel>()?;
    Ok(())
}
