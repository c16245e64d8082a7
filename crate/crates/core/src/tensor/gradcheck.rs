//! Central finite-difference oracle for checking reverse-mode gradients.

use super::{Graph, NodeId, ParamGrads, ParamStore};
use crate::error::Result;

/// Worst element-wise disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `build`'s backward pass against central differences with the
/// given `step`, perturbing every scalar of every parameter (or at most
/// `max_per_param` evenly spaced entries per tensor when set).
pub fn check_gradients<F>(
    store: &ParamStore,
    step: f64,
    max_per_param: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    Ok(run(store, step, max_per_param, false, build)?.expect("kinks are not screened"))
}

/// Like [`check_gradients`], but returns `None` when any perturbation changes
/// the graph's [`Graph::branch_signature`], i.e. when the point lies within
/// `step` of a non-differentiable kink (ReLU zero, pooling tie, ROI switch).
pub fn check_gradients_away_from_kinks<F>(
    store: &ParamStore,
    step: f64,
    max_per_param: Option<usize>,
    build: F,
) -> Result<Option<GradCheckReport>>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    run(store, step, max_per_param, true, build)
}

fn run<F>(
    store: &ParamStore,
    step: f64,
    max_per_param: Option<usize>,
    screen: bool,
    build: F,
) -> Result<Option<GradCheckReport>>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (graph, loss) = build(store)?;
    let base = if screen { graph.branch_signature() } else { Vec::new() };
    let analytic: ParamGrads = graph.backward(loss, store)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = store.clone();
    for (name, tensor) in store.iter() {
        let n = tensor.numel();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let grad = analytic.get(name).expect("gradient for every parameter");
        for idx in (0..n).step_by(stride) {
            let original = tensor.data()[idx];
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original + step;
            let (g_plus, l_plus) = build(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original - step;
            let (g_minus, l_minus) = build(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[idx] = original;
            if screen && (g_plus.branch_signature() != base || g_minus.branch_signature() != base) {
                return Ok(None);
            }
            let numeric = (g_plus.value(l_plus).data()[0] - g_minus.value(l_minus).data()[0]) / (2.0 * step);
            let err = relative_error(grad.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst_parameter = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(Some(report))
}
