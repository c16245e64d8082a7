//! Leaf-wise gradient-boosted regression trees on the logistic loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct GbmParams {
    pub learning_rate: f64,
    pub num_trees: usize,
    pub max_leaves: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Smallest hessian sum allowed in a child.
    pub min_child_hessian: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            learning_rate: 0.05,
            num_trees: 200,
            max_leaves: 8,
            lambda: 1.0,
            min_child_hessian: 1e-3,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config(format!(
                "max leaves must be at least 2, got {}",
                self.max_leaves
            )));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_hessian >= 0.0) {
            return Err(Error::Config("lambda and min child hessian must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left; missing values follow `default_left`.
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = x[feature];
                    let go_left = if v.is_nan() { default_left } else { v <= threshold };
                    at = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStatus {
    Ok,
    /// Only one class was present; the model predicts the prior.
    SingleClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbmModel {
    pub feature_names: Vec<String>,
    /// Prior log-odds.
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub status: FitStatus,
}

fn prior_log_odds(labels: &[bool]) -> f64 {
    let rate = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    let rate = rate.clamp(1e-6, 1.0 - 1e-6);
    (rate / (1.0 - rate)).ln()
}

fn log_loss(scores: &[f64], labels: &[bool]) -> f64 {
    // ln(1 + e^{-s}) for positives, ln(1 + e^{s}) for negatives, written stably.
    let softplus = |z: f64| {
        if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    };
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| softplus(if y { -s } else { s }))
        .sum::<f64>()
        / scores.len() as f64
}

#[derive(Clone, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

struct Leaf {
    node: usize,
    /// Per feature: non-missing rows of this leaf sorted by value.
    sorted: Vec<Vec<u32>>,
    rows: Vec<u32>,
    grad: f64,
    hess: f64,
    best: Option<Candidate>,
}

struct Grower<'a> {
    data: &'a Dataset,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbmParams,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn make_leaf(&self, node: usize, rows: Vec<u32>, sorted: Vec<Vec<u32>>) -> Leaf {
        let grad = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let hess = rows.iter().map(|&r| self.hess[r as usize]).sum();
        let mut leaf = Leaf {
            node,
            sorted,
            rows,
            grad,
            hess,
            best: None,
        };
        leaf.best = self.best_split(&leaf);
        leaf
    }

    fn best_split(&self, leaf: &Leaf) -> Option<Candidate> {
        let min_h = self.params.min_child_hessian;
        let parent = self.score(leaf.grad, leaf.hess);
        let mut best: Option<Candidate> = None;
        for (f, order) in leaf.sorted.iter().enumerate() {
            if order.len() < 2 {
                continue;
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for &r in order.iter() {
                gl += self.grad[r as usize];
                hl += self.hess[r as usize];
            }
            let (gm, hm) = (leaf.grad - gl, leaf.hess - hl);
            let has_missing = order.len() < leaf.rows.len();
            let (mut gl, mut hl) = (0.0, 0.0);
            let (mut gt, mut ht) = (leaf.grad - gm, leaf.hess - hm);
            for k in 0..order.len() - 1 {
                let r = order[k] as usize;
                gl += self.grad[r];
                hl += self.hess[r];
                gt -= self.grad[r];
                ht -= self.hess[r];
                let (v, next) = (self.data.rows[r][f], self.data.rows[order[k + 1] as usize][f]);
                if v == next {
                    continue;
                }
                let options: &[bool] = if has_missing { &[true, false] } else { &[hl >= ht] };
                for &default_left in options {
                    let (gla, hla, gra, hra) = if has_missing && default_left {
                        (gl + gm, hl + hm, gt, ht)
                    } else if has_missing {
                        (gl, hl, gt + gm, ht + hm)
                    } else {
                        (gl, hl, gt, ht)
                    };
                    if hla < min_h || hra < min_h {
                        continue;
                    }
                    let gain = 0.5 * (self.score(gla, hla) + self.score(gra, hra) - parent);
                    if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                        let mid = v + (next - v) / 2.0;
                        best = Some(Candidate {
                            gain,
                            feature: f,
                            threshold: if mid < next { mid } else { v },
                            default_left,
                        });
                    }
                }
            }
        }
        best
    }

    fn grow(&self) -> Tree {
        let n = self.data.len();
        let rows: Vec<u32> = (0..n as u32).collect();
        let sorted: Vec<Vec<u32>> = (0..self.data.num_features())
            .map(|f| {
                let mut o: Vec<u32> = rows
                    .iter()
                    .copied()
                    .filter(|&r| !self.data.rows[r as usize][f].is_nan())
                    .collect();
                o.sort_by(|&a, &b| self.data.rows[a as usize][f].total_cmp(&self.data.rows[b as usize][f]));
                o
            })
            .collect();
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut leaves = vec![self.make_leaf(0, rows, sorted)];
        while leaves.len() < self.params.max_leaves {
            let Some(pick) = leaves
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.best.as_ref().map(|b| (i, b.gain)))
                .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                    Some((_, best)) if best >= g => acc,
                    _ => Some((i, g)),
                })
                .map(|(i, _)| i)
            else {
                break;
            };
            let leaf = leaves.swap_remove(pick);
            let cand = leaf.best.clone().expect("picked leaf has a split");
            let goes_left = |r: u32| {
                let v = self.data.rows[r as usize][cand.feature];
                if v.is_nan() {
                    cand.default_left
                } else {
                    v <= cand.threshold
                }
            };
            let (lrows, rrows): (Vec<u32>, Vec<u32>) = leaf.rows.iter().partition(|&&r| goes_left(r));
            let (lsorted, rsorted): (Vec<Vec<u32>>, Vec<Vec<u32>>) = leaf
                .sorted
                .into_iter()
                .map(|o| o.into_iter().partition(|&r| goes_left(r)))
                .unzip();
            let (l, r) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[leaf.node] = Node::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                default_left: cand.default_left,
                left: l,
                right: r,
            };
            leaves.push(self.make_leaf(l, lrows, lsorted));
            leaves.push(self.make_leaf(r, rrows, rsorted));
        }
        for leaf in leaves {
            nodes[leaf.node] = Node::Leaf {
                value: -leaf.grad / (leaf.hess + self.params.lambda),
            };
        }
        Tree { nodes }
    }
}

/// Fits the booster and also returns the mean training log-loss before the
/// first tree and after each one.
pub fn fit_gbm_traced(data: &Dataset, params: &GbmParams) -> Result<(GbmModel, Vec<f64>)> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training rows"));
    }
    let base = prior_log_odds(&data.labels);
    let mut model = GbmModel {
        feature_names: data.feature_names.clone(),
        base_score: base,
        learning_rate: params.learning_rate,
        trees: Vec::with_capacity(params.num_trees),
        status: FitStatus::Ok,
    };
    let mut scores = vec![base; data.len()];
    let mut losses = vec![log_loss(&scores, &data.labels)];
    if data.labels.iter().all(|&y| y == data.labels[0]) {
        log::warn!("single-class training set; boosting skipped, model predicts the prior");
        model.status = FitStatus::SingleClass;
        return Ok((model, losses));
    }
    let mut grad = vec![0.0; data.len()];
    let mut hess = vec![0.0; data.len()];
    for _ in 0..params.num_trees {
        for (i, (&s, &y)) in scores.iter().zip(&data.labels).enumerate() {
            let p = sigmoid(s);
            grad[i] = p - f64::from(u8::from(y));
            hess[i] = p * (1.0 - p);
        }
        let tree = Grower {
            data,
            grad: &grad,
            hess: &hess,
            params,
        }
        .grow();
        for (s, row) in scores.iter_mut().zip(&data.rows) {
            *s += params.learning_rate * tree.leaf_value(row);
        }
        losses.push(log_loss(&scores, &data.labels));
        model.trees.push(tree);
    }
    Ok((model, losses))
}

pub fn fit_gbm(data: &Dataset, params: &GbmParams) -> Result<GbmModel> {
    fit_gbm_traced(data, params).map(|(m, _)| m)
}

impl GbmModel {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Log-odds `base + eta * sum of leaf values`.
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_features() {
            return Err(Error::invalid(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.num_features()
            )));
        }
        Ok(self.base_score + self.learning_rate * self.trees.iter().map(|t| t.leaf_value(x)).sum::<f64>())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.raw_score(x).map(sigmoid)
    }

    /// Split counts per feature, most used first (ties by feature order).
    pub fn feature_importance(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.num_features()];
        for tree in &self.trees {
            for node in &tree.nodes {
                if let Node::Split { feature, .. } = node {
                    counts[*feature] += 1;
                }
            }
        }
        let mut out: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out.into_iter()
            .map(|(f, c)| (self.feature_names[f].clone(), c))
            .collect()
    }

    /// Text dump: a small header, then per tree one line per node
    /// `node_id,feature,threshold,default_direction,left,right,leaf_value`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = match self.status {
            FitStatus::Ok => "ok",
            FitStatus::SingleClass => "single_class",
        };
        let _ = writeln!(s, "gbm");
        let _ = writeln!(s, "base_score={}", self.base_score);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "status={status}");
        let _ = writeln!(s, "features={}", self.feature_names.join(","));
        for (i, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {i} {}", tree.nodes.len());
            for (id, node) in tree.nodes.iter().enumerate() {
                let _ = match node {
                    Node::Split {
                        feature,
                        threshold,
                        default_left,
                        left,
                        right,
                    } => {
                        let dir = if *default_left { "left" } else { "right" };
                        writeln!(s, "{id},{feature},{threshold},{dir},{left},{right},")
                    }
                    Node::Leaf { value } => writeln!(s, "{id},,,,,,{value}"),
                };
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<GbmModel> {
        let bad = |detail: String| Error::format("tree dump", detail);
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| bad(format!("unexpected end of input, expected {what}")))
        };
        let (_, magic) = next("header")?;
        if magic != "gbm" {
            return Err(bad("missing `gbm` header".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let (n, line) = next(key)?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("line {n}: expected `{key}=`")))
        };
        let num = |n: &str, v: &str| -> Result<f64> { v.parse().map_err(|_| bad(format!("bad {n} `{v}`"))) };
        let base_score = num("base_score", &field("base_score")?)?;
        let learning_rate = num("learning_rate", &field("learning_rate")?)?;
        let status = match field("status")?.as_str() {
            "ok" => FitStatus::Ok,
            "single_class" => FitStatus::SingleClass,
            other => return Err(bad(format!("unknown status `{other}`"))),
        };
        let features = field("features")?;
        let feature_names: Vec<String> = if features.is_empty() {
            vec![]
        } else {
            features.split(',').map(str::to_string).collect()
        };
        let mut trees = vec![];
        while let Ok((n, header)) = next("tree") {
            let count = header
                .strip_prefix("tree ")
                .and_then(|r| r.split_whitespace().nth(1))
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("line {n}: expected `tree <index> <nodes>`")))?;
            let mut nodes = Vec::with_capacity(count);
            for id in 0..count {
                let (n, line) = next("node")?;
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 7 || cols[0].parse::<usize>().ok() != Some(id) {
                    return Err(bad(format!("line {n}: malformed node")));
                }
                let int = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| bad(format!("line {n}: bad index `{v}`")))
                };
                nodes.push(if cols[1].is_empty() {
                    Node::Leaf {
                        value: num("leaf value", cols[6])?,
                    }
                } else {
                    let (feature, left, right) = (int(cols[1])?, int(cols[4])?, int(cols[5])?);
                    if feature >= feature_names.len() || left >= count || right >= count || left <= id || right <= id {
                        return Err(bad(format!("line {n}: node references out of range")));
                    }
                    Node::Split {
                        feature,
                        threshold: num("threshold", cols[2])?,
                        default_left: match cols[3] {
                            "left" => true,
                            "right" => false,
                            d => return Err(bad(format!("line {n}: bad direction `{d}`"))),
                        },
                        left,
                        right,
                    }
                });
            }
            trees.push(Tree { nodes });
        }
        Ok(GbmModel {
            feature_names,
            base_score,
            learning_rate,
            trees,
            status,
        })
    }
}
