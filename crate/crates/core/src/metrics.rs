//! Discrimination, calibration and survival-ranking metrics with bootstrap intervals.

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::drc::TIME_GRID;
use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Indices sorted by descending score; ties keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// `P(s_pos > s_neg) + P(tie) / 2`, computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: precision at each distinct threshold weighted by the recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(pr_points(scores, labels)?
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// Counts of (true positives, false positives) at each distinct descending threshold.
fn cumulative(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize, f64)> {
    let order = descending(scores);
    let mut out = vec![];
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        if order.get(k + 1).is_none_or(|&n| scores[n] != scores[i]) {
            out.push((tp, fp, scores[i]));
        }
    }
    out
}

/// ROC curve from `(0, 0)` at threshold +inf to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("ROC curve needs both classes".into()));
    }
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    out.extend(cumulative(scores, labels).into_iter().map(|(tp, fp, t)| RocPoint {
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
        threshold: t,
    }));
    Ok(out)
}

/// Precision-recall points, starting at recall 0 with precision 1.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return Err(Error::DegenerateLabels("PR AUC needs at least one positive".into()));
    }
    let mut out = vec![PrPoint {
        recall: 0.0,
        precision: 1.0,
        threshold: f64::INFINITY,
    }];
    out.extend(cumulative(scores, labels).into_iter().map(|(tp, fp, t)| PrPoint {
        recall: tp as f64 / pos as f64,
        precision: tp as f64 / (tp + fp) as f64,
        threshold: t,
    }));
    Ok(out)
}

/// Mean of ROC AUC and PR AUC.
pub fn auc_pr_mean(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok((roc_auc(scores, labels)? + pr_auc(scores, labels)?) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples that produced a value.
    pub iterations_used: usize,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

const MAX_REDRAWS: usize = 10;

/// Percentile bootstrap around `metric`, which scores a multiset of row
/// indices. Iteration `i` draws from a generator seeded with `seed + i`;
/// a draw whose metric fails is redrawn up to ten times, then skipped.
pub fn bootstrap_ci_with_sampler<M, S>(
    n: usize,
    metric: M,
    iterations: usize,
    seed: u64,
    mut sampler: S,
) -> Result<ConfidenceInterval>
where
    M: Fn(&[usize]) -> Result<f64>,
    S: FnMut(&mut ChaCha8Rng) -> Vec<usize>,
{
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let mut values = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(it as u64));
        for _ in 0..=MAX_REDRAWS {
            if let Ok(v) = metric(&sampler(&mut rng)) {
                values.push(v);
                break;
            }
        }
    }
    if values.is_empty() {
        return Err(Error::DegenerateLabels(
            "metric failed on every bootstrap resample".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        point,
        lo: quantile(&values, 0.025),
        hi: quantile(&values, 0.975),
        iterations_used: values.len(),
    })
}

/// Exam-level bootstrap, or patient-level when `groups[i]` names the
/// patient of row `i`.
pub fn bootstrap_ci<M>(
    n: usize,
    metric: M,
    iterations: usize,
    seed: u64,
    groups: Option<&[usize]>,
) -> Result<ConfidenceInterval>
where
    M: Fn(&[usize]) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::invalid("empty cohort"));
    }
    match groups {
        None => bootstrap_ci_with_sampler(n, metric, iterations, seed, |rng| {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        }),
        Some(groups) => {
            if groups.len() != n {
                return Err(Error::invalid(format!("{} group ids for {n} rows", groups.len())));
            }
            let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, &g) in groups.iter().enumerate() {
                members.entry(g).or_default().push(i);
            }
            let members: Vec<Vec<usize>> = members.into_values().collect();
            bootstrap_ci_with_sampler(n, metric, iterations, seed, |rng| {
                (0..members.len())
                    .flat_map(|_| members[rng.random_range(0..members.len())].iter().copied())
                    .collect()
            })
        }
    }
}

/// Bootstrap interval of ROC AUC.
pub fn roc_auc_ci(scores: &[f64], labels: &[bool], iterations: usize, seed: u64) -> Result<ConfidenceInterval> {
    check_inputs(scores, labels)?;
    bootstrap_ci(
        scores.len(),
        |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            roc_auc(&s, &l)
        },
        iterations,
        seed,
        None,
    )
}

/// Concordance among patients with observed events: over pairs with distinct
/// event times, the fraction where the earlier event has the higher risk,
/// risk ties counting one half. `event_times[i]` is `None` when censored.
pub fn concordance_at(risk: &[f64], event_times: &[Option<f64>]) -> Result<f64> {
    if risk.len() != event_times.len() {
        return Err(Error::invalid(format!(
            "{} risks but {} event times",
            risk.len(),
            event_times.len()
        )));
    }
    let events: Vec<(f64, f64)> = risk
        .iter()
        .zip(event_times)
        .filter_map(|(&r, t)| t.map(|t| (t, r)))
        .collect();
    let (mut score, mut pairs) = (0.0, 0usize);
    for (i, &(ti, ri)) in events.iter().enumerate() {
        for &(tj, rj) in &events[i + 1..] {
            if ti == tj {
                continue;
            }
            let (early, late) = if ti < tj { (ri, rj) } else { (rj, ri) };
            pairs += 1;
            score += if early > late {
                1.0
            } else if early == late {
                0.5
            } else {
                0.0
            };
        }
    }
    if pairs < 2 {
        return Err(Error::DegenerateLabels(format!(
            "concordance needs at least 2 usable pairs, found {pairs}"
        )));
    }
    Ok(score / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub decile: usize,
    pub count: usize,
    /// `None` for an empty decile.
    pub mean_pred: Option<f64>,
    pub emp_frac: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityCurve {
    pub t_hours: f64,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityCurve {
    /// Largest `|mean_pred - emp_frac|` over occupied deciles.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .filter_map(|b| Some((b.mean_pred? - b.emp_frac?).abs()))
            .fold(0.0, f64::max)
    }
}

/// Decile reliability at one horizon. Rows are sorted by prediction and cut
/// into ten equal-count groups, the first `n % 10` one larger; rows tied
/// with a group's last prediction stay in that group, so a constant
/// predictor fills a single decile. `outcomes[i]` is `None` when the event
/// status at the horizon is unknown; such rows are left out.
pub fn reliability(t_hours: f64, predictions: &[f64], outcomes: &[Option<bool>]) -> Result<ReliabilityCurve> {
    check_inputs(predictions, &vec![false; outcomes.len()])?;
    let rows: Vec<(f64, bool)> = predictions
        .iter()
        .zip(outcomes)
        .filter_map(|(&p, o)| o.map(|o| (p, o)))
        .collect();
    let n = rows.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "reliability needs at least 10 patients, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rows[a].0.total_cmp(&rows[b].0));
    let mut bins = Vec::with_capacity(10);
    let mut start = 0;
    for d in 0..10 {
        let target = n / 10 + usize::from(d < n % 10);
        let mut end = (start + target).min(n);
        if end > start {
            while end < n && rows[order[end]].0 == rows[order[end - 1]].0 {
                end += 1;
            }
        }
        // Earlier deciles may have swallowed ties; the last one takes the rest.
        if d == 9 {
            end = n;
        }
        let members = &order[start..end];
        let count = members.len();
        let mean = |f: &dyn Fn(usize) -> f64| members.iter().map(|&i| f(i)).sum::<f64>() / count as f64;
        bins.push(ReliabilityBin {
            decile: d + 1,
            count,
            mean_pred: (count > 0).then(|| mean(&|i| rows[i].0)),
            emp_frac: (count > 0).then(|| mean(&|i| f64::from(u8::from(rows[i].1)))),
        });
        start = end;
    }
    Ok(ReliabilityCurve { t_hours, bins })
}

/// Reliability curves at every grid time from per-patient risk curves.
pub fn reliability_table(curves: &[[f64; 8]], labels: &[crate::drc::SurvivalLabel]) -> Result<Vec<ReliabilityCurve>> {
    if curves.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} curves but {} labels",
            curves.len(),
            labels.len()
        )));
    }
    TIME_GRID
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let preds: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            let outcomes: Vec<Option<bool>> = labels.iter().map(|l| l.event_by(i + 1)).collect();
            reliability(t, &preds, &outcomes)
        })
        .collect()
}

fn finish<W: io::Write>(w: csv::Writer<W>) -> Result<()> {
    w.into_inner()
        .map(|_| ())
        .map_err(|e| Error::format("csv", e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_roc_csv<W: io::Write>(out: W, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr", "threshold"]).map_err(Error::csv)?;
    for p in points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
            .map_err(Error::csv)?;
    }
    finish(w)
}

pub fn write_pr_csv<W: io::Write>(out: W, points: &[PrPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["recall", "precision", "threshold"])
        .map_err(Error::csv)?;
    for p in points {
        w.write_record([p.recall.to_string(), p.precision.to_string(), p.threshold.to_string()])
            .map_err(Error::csv)?;
    }
    finish(w)
}

pub fn write_reliability_csv<W: io::Write>(out: W, curves: &[ReliabilityCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_hours", "decile", "mean_pred", "emp_frac", "count"])
        .map_err(Error::csv)?;
    for c in curves {
        for b in &c.bins {
            w.write_record([
                c.t_hours.to_string(),
                b.decile.to_string(),
                opt(b.mean_pred),
                opt(b.emp_frac),
                b.count.to_string(),
            ])
            .map_err(Error::csv)?;
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert_eq!(
            roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9], &[false, false, true]).unwrap(), 1.0);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn average_precision_examples() {
        let mut scores = vec![0.1; 10];
        scores[3] = 0.9;
        let mut labels = vec![false; 10];
        labels[3] = true;
        assert_eq!(pr_auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0.5; 4], &[true, false, false, false]).unwrap(), 0.25);
        // Ranks 1 and 3 positive: (1/2)(1) + (1/2)(2/3).
        let ap = pr_auc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert!(pr_auc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn curves_span_unit_square() {
        let s = [0.2, 0.9, 0.5, 0.5, 0.1];
        let l = [false, true, true, false, false];
        let roc = roc_curve(&s, &l).unwrap();
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc.last().unwrap().fpr, roc.last().unwrap().tpr), (1.0, 1.0));
        assert_eq!(roc.len(), 5);
        let pr = pr_points(&s, &l).unwrap();
        assert_eq!(pr.last().unwrap().recall, 1.0);
    }

    #[test]
    fn concordance_examples() {
        let t = [Some(10.0), Some(50.0), Some(90.0)];
        assert!((concordance_at(&[0.9, 0.2, 0.5], &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(concordance_at(&[0.9, 0.5, 0.2], &t).unwrap(), 1.0);
        assert_eq!(concordance_at(&[0.1, 0.5, 0.7], &t).unwrap(), 0.0);
        assert_eq!(concordance_at(&[0.4, 0.4, 0.4], &t).unwrap(), 0.5);
        assert!(concordance_at(&[0.4, 0.1, 0.3], &[Some(1.0), Some(2.0), None]).is_err());
    }

    #[test]
    fn constant_predictor_fills_one_decile() {
        let preds = vec![0.3; 20];
        let outcomes: Vec<Option<bool>> = (0..20).map(|i| Some(i % 10 < 3)).collect();
        let curve = reliability(96.0, &preds, &outcomes).unwrap();
        assert_eq!(curve.bins[0].count, 20);
        assert!((curve.bins[0].mean_pred.unwrap() - 0.3).abs() < 1e-15);
        assert!((curve.bins[0].emp_frac.unwrap() - 0.3).abs() < 1e-15);
        assert!(curve.bins[1..].iter().all(|b| b.count == 0 && b.mean_pred.is_none()));
    }

    #[test]
    fn deciles_spread_remainder_first() {
        let preds: Vec<f64> = (0..23).map(|i| i as f64 / 23.0).collect();
        let curve = reliability(24.0, &preds, &vec![Some(false); 23]).unwrap();
        let counts: Vec<usize> = curve.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert!(reliability(24.0, &[0.1; 9], &[Some(true); 9]).is_err());
    }

    #[test]
    fn csv_exports() {
        let mut buf = vec![];
        write_roc_csv(&mut buf, &roc_curve(&[0.1, 0.9], &[false, true]).unwrap()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
        let mut buf = vec![];
        let curve = reliability(96.0, &[0.5; 10], &[Some(true); 10]).unwrap();
        write_reliability_csv(&mut buf, &[curve]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "96,1,0.5,1,10");
        assert_eq!(text.lines().nth(2).unwrap(), "96,2,,,0");
    }
}
