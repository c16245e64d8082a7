//! Discrete-time deterioration risk curves.
//!
//! The network emits nine sigmoid outputs. Entries `1..=8` are the
//! conditional event probabilities `P(T <= t_i | T > t_{i-1})` on
//! [`TIME_GRID`]; the ninth only enters the saliency penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmic::{build_forward, forward_outputs, ForwardNodes, GmicConfig, GmicOutputs};
use crate::imaging::ProcessedImage;
use crate::tensor::{sigmoid, AdamState, Graph, NodeId, ParamStore, Tensor};

/// Interval boundaries in hours.
pub const TIME_GRID: [f64; 8] = [3.0, 12.0, 24.0, 48.0, 72.0, 96.0, 144.0, 192.0];

/// Number of network outputs for the risk-curve head.
pub const NUM_OUTPUTS: usize = 9;

pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SurvivalLabel {
    /// First event in `(t_{i-1}, t_i]`, `interval` in `1..=8`.
    Event { interval: usize },
    /// Event-free through `t_index`, `index` in `0..=8`.
    Censored { index: usize },
}

impl SurvivalLabel {
    pub fn is_event(&self) -> bool {
        matches!(self, SurvivalLabel::Event { .. })
    }

    /// Whether the record is known to have an event by grid point `i` (1-based).
    pub fn event_by(&self, i: usize) -> Option<bool> {
        match *self {
            SurvivalLabel::Event { interval } => Some(interval <= i),
            SurvivalLabel::Censored { index } => (index >= i).then_some(false),
        }
    }
}

/// Maps event/censor times (hours since the exam) to a grid label. Events
/// past the last grid point are censored at index 8.
pub fn to_label(event_time: Option<f64>, censor_time: f64) -> Result<SurvivalLabel> {
    if !(censor_time >= 0.0) || event_time.is_some_and(|t| !(t >= 0.0)) {
        return Err(Error::invalid(format!(
            "times must be nonnegative, got event {event_time:?} and censor {censor_time}"
        )));
    }
    match event_time {
        Some(t) if t <= TIME_GRID[7] => {
            let interval = TIME_GRID.iter().position(|&b| t <= b).expect("t <= last boundary") + 1;
            Ok(SurvivalLabel::Event { interval })
        }
        Some(_) => Ok(SurvivalLabel::Censored { index: 8 }),
        None => Ok(SurvivalLabel::Censored {
            index: TIME_GRID.iter().take_while(|&&b| b <= censor_time).count(),
        }),
    }
}

fn check_conditionals(p: &[f64]) -> Result<()> {
    if p.len() < 8 {
        return Err(Error::invalid(format!(
            "need at least 8 conditional probabilities, got {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("conditional probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// `DRC(t_i) = 1 - prod_{j <= i} (1 - p_j)` over the first eight entries.
pub fn drc_from_conditionals(p: &[f64]) -> Result<[f64; 8]> {
    check_conditionals(p)?;
    // Accumulating the hazard mass keeps DRC(t_1) == p_1 bit for bit.
    let mut curve = [0.0; 8];
    let mut acc = 0.0;
    for (c, &pj) in curve.iter_mut().zip(p) {
        acc += (1.0 - acc) * pj;
        *c = acc;
    }
    Ok(curve)
}

/// Negative log-likelihood of one label; log arguments are clamped below at [`LOG_EPS`].
pub fn nll(label: &SurvivalLabel, p: &[f64]) -> Result<f64> {
    check_conditionals(p)?;
    let ln = |v: f64| v.max(LOG_EPS).ln();
    Ok(match *label {
        SurvivalLabel::Event { interval } => {
            -p[..interval - 1].iter().map(|&q| ln(1.0 - q)).sum::<f64>() - ln(p[interval - 1])
        }
        SurvivalLabel::Censored { index } => -p[..index].iter().map(|&q| ln(1.0 - q)).sum::<f64>(),
    })
}

/// Graph form of [`nll`] on a probability node with at least eight entries.
pub fn nll_node(g: &mut Graph, p: NodeId, label: &SurvivalLabel) -> Result<NodeId> {
    let n = g.shape(p)[0];
    if g.shape(p).len() != 1 || n < 8 {
        return Err(Error::shape(
            g.node_label(p),
            format!("expected [>=8] probabilities, got {:?}", g.shape(p)),
        ));
    }
    let (survived, event) = match *label {
        SurvivalLabel::Event { interval } => (interval - 1, Some(interval - 1)),
        SurvivalLabel::Censored { index } => (index, None),
    };
    let mut terms = Vec::with_capacity(2);
    if survived > 0 {
        let q = g.scale_shift(p, -1.0, 1.0);
        let lq = g.ln_clamped(q, LOG_EPS);
        let mask = g.constant(Tensor::new(
            vec![n],
            (0..n).map(|j| f64::from(u8::from(j < survived))).collect(),
        )?);
        let picked = g.mul(lq, mask)?;
        terms.push(g.sum(picked));
    }
    if let Some(i) = event {
        let lp = g.ln_clamped(p, LOG_EPS);
        let mask = g.constant(Tensor::new(
            vec![n],
            (0..n).map(|j| f64::from(u8::from(j == i))).collect(),
        )?);
        let picked = g.mul(lp, mask)?;
        terms.push(g.sum(picked));
    }
    if terms.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale_shift(total, -1.0, 0.0))
}

/// Sum of the three head likelihoods plus `beta` times the L1 norm of all nine saliency maps.
pub fn drc_loss(g: &mut Graph, nodes: &ForwardNodes, label: &SurvivalLabel, beta: f64) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(4);
    for head in [nodes.global.y_global, nodes.y_local, nodes.y_fusion] {
        terms.push(nll_node(g, head, label)?);
    }
    if beta != 0.0 {
        let abs = g.abs(nodes.global.saliency);
        let l1 = g.sum(abs);
        terms.push(g.scale_shift(l1, beta, 0.0));
    }
    g.add_all(&terms)
}

/// Records the forward pass and the risk-curve loss for one example.
pub fn drc_example_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GmicConfig,
    img: &ProcessedImage,
    label: &SurvivalLabel,
) -> Result<NodeId> {
    let nodes = build_forward(g, store, cfg, img)?;
    drc_loss(g, &nodes, label, cfg.sparsity_weight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrcOutputs {
    pub p_global: Vec<f64>,
    pub p_local: Vec<f64>,
    pub p_fusion: Vec<f64>,
    /// Curve from the fusion head.
    pub curve: [f64; 8],
    pub gmic: GmicOutputs,
}

/// Evaluates all three heads and the fusion curve.
pub fn drc_forward(img: &ProcessedImage, cfg: &GmicConfig, params: &ParamStore) -> Result<DrcOutputs> {
    if cfg.num_windows != NUM_OUTPUTS {
        return Err(Error::Config(format!(
            "risk-curve model needs {NUM_OUTPUTS} output channels, config has {}",
            cfg.num_windows
        )));
    }
    let out = forward_outputs(cfg, params, img)?;
    Ok(DrcOutputs {
        curve: drc_from_conditionals(&out.y_fusion)?,
        p_global: out.y_global.clone(),
        p_local: out.y_local.clone(),
        p_fusion: out.y_fusion.clone(),
        gmic: out,
    })
}

/// Writes `exam_id,t_hours,drc_value`, one row per exam and grid point.
pub fn write_drc_csv<W: std::io::Write>(out: W, curves: &[(String, [f64; 8])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["exam_id", "t_hours", "drc_value"])
        .map_err(Error::csv)?;
    for (id, curve) in curves {
        for (t, v) in TIME_GRID.iter().zip(curve) {
            w.write_record([id.as_str(), &t.to_string(), &v.to_string()])
                .map_err(Error::csv)?;
        }
    }
    w.flush().map_err(|e| Error::format("csv", e.to_string()))
}

#[derive(Clone, Debug)]
pub struct DrcModel {
    pub config: GmicConfig,
    pub params: ParamStore,
}

impl DrcModel {
    pub fn new(config: GmicConfig, params: ParamStore) -> Result<Self> {
        if config.num_windows != NUM_OUTPUTS {
            return Err(Error::Config(format!(
                "risk-curve model needs {NUM_OUTPUTS} output channels, config has {}",
                config.num_windows
            )));
        }
        let checked = crate::gmic::GmicModel::new(config, params)?;
        Ok(DrcModel {
            config: checked.config,
            params: checked.params,
        })
    }

    pub fn forward(&self, img: &ProcessedImage) -> Result<DrcOutputs> {
        drc_forward(img, &self.config, &self.params)
    }

    pub fn predict_curve(&self, img: &ProcessedImage) -> Result<[f64; 8]> {
        Ok(self.forward(img)?.curve)
    }
}

/// Closed-form per-interval hazards `d_j / n_j`: events in interval `j` over
/// records still at risk at its start (censored records count while their
/// censor index is at least `j`). `None` where nobody is at risk.
pub fn empirical_hazards(labels: &[SurvivalLabel]) -> [Option<f64>; 8] {
    let mut out = [None; 8];
    for (j, slot) in out.iter_mut().enumerate() {
        let i = j + 1;
        let mut events = 0usize;
        let mut at_risk = 0usize;
        for l in labels {
            match *l {
                SurvivalLabel::Event { interval } if interval >= i => {
                    at_risk += 1;
                    events += usize::from(interval == i);
                }
                SurvivalLabel::Censored { index } if index >= i => at_risk += 1,
                _ => {}
            }
        }
        if at_risk > 0 {
            *slot = Some(events as f64 / at_risk as f64);
        }
    }
    out
}

/// Maximum-likelihood fit of a constant-input head: nine bias logits trained
/// by Adam on the mean likelihood of `labels`. Returns the nine probabilities.
pub fn fit_constant_hazards(labels: &[SurvivalLabel], steps: usize, learning_rate: f64, seed: u64) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("no labels to fit"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    let mut store = ParamStore::new();
    store.insert_uniform("bias", &[NUM_OUTPUTS], 1, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut adam = AdamState::new(learning_rate)?;
    let n = labels.len() as f64;
    for step in 0..steps {
        // Decay keeps the last iterates from oscillating around the optimum.
        adam.learning_rate = learning_rate / (1.0 + step as f64 / 250.0);
        let mut g = Graph::new();
        let b = g.param(&store, "bias")?;
        let p = g.sigmoid(b);
        let mut terms = Vec::with_capacity(counts.len());
        for (label, &c) in &counts {
            let l = nll_node(&mut g, p, label)?;
            terms.push(g.scale_shift(l, c as f64 / n, 0.0));
        }
        let loss = g.add_all(&terms)?;
        let grads = g.backward(loss, &store)?;
        adam.step(&mut store, &grads)?;
    }
    Ok(store.require("bias")?.data().iter().map(|&v| sigmoid(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        assert_eq!(to_label(Some(2.0), 2.0).unwrap(), SurvivalLabel::Event { interval: 1 });
        assert_eq!(
            to_label(Some(95.0), 100.0).unwrap(),
            SurvivalLabel::Event { interval: 6 }
        );
        assert_eq!(
            to_label(Some(96.0), 96.0).unwrap(),
            SurvivalLabel::Event { interval: 6 }
        );
        assert_eq!(to_label(None, 100.0).unwrap(), SurvivalLabel::Censored { index: 6 });
        assert_eq!(to_label(None, 1.0).unwrap(), SurvivalLabel::Censored { index: 0 });
        assert_eq!(
            to_label(Some(300.0), 400.0).unwrap(),
            SurvivalLabel::Censored { index: 8 }
        );
        assert!(to_label(Some(-1.0), 5.0).is_err());
        assert!(to_label(None, -3.0).is_err());
    }

    #[test]
    fn curve_examples() {
        assert_eq!(drc_from_conditionals(&[0.0; 9]).unwrap(), [0.0; 8]);
        let mut p = [0.3; 9];
        p[0] = 1.0;
        assert_eq!(drc_from_conditionals(&p).unwrap(), [1.0; 8]);
        let c = drc_from_conditionals(&[0.5; 9]).unwrap();
        assert_eq!(c[2], 0.875);
        for (i, v) in c.iter().enumerate() {
            assert_eq!(*v, 1.0 - 0.5f64.powi(i as i32 + 1));
        }
        assert!(drc_from_conditionals(&[0.5; 7]).is_err());
    }

    #[test]
    fn nll_examples() {
        let p = [0.5; 9];
        assert!((nll(&SurvivalLabel::Event { interval: 1 }, &p).unwrap() - 0.5f64.ln().abs()).abs() < 1e-15);
        assert_eq!(nll(&SurvivalLabel::Censored { index: 0 }, &p).unwrap(), 0.0);
        let p = [0.2, 0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let v = nll(&SurvivalLabel::Event { interval: 2 }, &p).unwrap();
        assert!((v - (-(0.8f64.ln()) - 0.4f64.ln())).abs() < 1e-15);
        assert!((v - 1.1394).abs() < 1e-4);
    }

    #[test]
    fn graph_nll_matches_scalar() {
        let p = [0.12, 0.3, 0.05, 0.6, 0.2, 0.33, 0.9, 0.4, 0.5];
        let labels = (1..=8)
            .map(|i| SurvivalLabel::Event { interval: i })
            .chain((0..=8).map(|i| SurvivalLabel::Censored { index: i }));
        for label in labels {
            let mut g = Graph::new();
            let pn = g.constant(Tensor::vector(p.to_vec()));
            let l = nll_node(&mut g, pn, &label).unwrap();
            assert!(
                (g.value(l).data()[0] - nll(&label, &p).unwrap()).abs() < 1e-14,
                "{label:?}"
            );
        }
    }

    #[test]
    fn empirical_hazard_counts() {
        let labels = [
            SurvivalLabel::Event { interval: 1 },
            SurvivalLabel::Event { interval: 2 },
            SurvivalLabel::Censored { index: 1 },
            SurvivalLabel::Censored { index: 8 },
        ];
        let h = empirical_hazards(&labels);
        assert_eq!(h[0], Some(0.25));
        assert_eq!(h[1], Some(0.5));
        assert_eq!(h[2], Some(0.0));
        let none = empirical_hazards(&[SurvivalLabel::Censored { index: 2 }]);
        assert_eq!(none[2], None);
    }

    #[test]
    fn event_by_grid_point() {
        let e = SurvivalLabel::Event { interval: 4 };
        assert_eq!(e.event_by(3), Some(false));
        assert_eq!(e.event_by(4), Some(true));
        let c = SurvivalLabel::Censored { index: 5 };
        assert_eq!(c.event_by(5), Some(false));
        assert_eq!(c.event_by(6), None);
    }
}
