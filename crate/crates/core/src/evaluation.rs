//! Accuracy and cost under gates, budget sweeps, post-hoc head pruning,
//! gate-ranking statistics and Pareto reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Example};
use crate::error::{Error, Result};
use crate::gating::{
    estimated_cost, hard_mask_for_budget, head_count, select_top_k, soft_gates, HeadMask, MaskKind,
};
use crate::model::{EncoderModel, Execution};
use crate::tensor::kernels::log_softmax_rows;
use crate::tensor::Array;

/// Batch size for tape-free evaluation passes.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy)]
pub enum GateSpec<'a> {
    /// No gates; cost 1.
    Dense,
    /// Soft gates at a requested budget; cost is the mean gate.
    Soft(f64),
    /// Hard top-k mask at a requested budget, run on the head-skipping path;
    /// cost is exactly `k / (L * H)`.
    Hard { budget: f64, floor: bool },
    /// An explicit mask; binary masks run on the head-skipping path.
    Mask(&'a HeadMask),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub cost: f64,
    pub examples: usize,
}

/// Logits are scored against labels; returns `(correct, summed cross-entropy)`.
fn score_logits(logits: &Array, labels: &[usize]) -> (usize, f64) {
    let c = logits.last_dim();
    let mut lp = logits.data().to_vec();
    log_softmax_rows(&mut lp, c);
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, (&y, lrow)) in labels.iter().zip(lp.chunks_exact(c)).enumerate() {
        let pred = argmax(&logits.data()[row * c..(row + 1) * c]);
        correct += usize::from(pred == y);
        loss -= lrow[y];
    }
    (correct, loss)
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn resolve_mask(model: &EncoderModel, spec: GateSpec<'_>) -> Result<Option<HeadMask>> {
    Ok(match spec {
        GateSpec::Dense => None,
        GateSpec::Soft(b) => Some(soft_gates(model.gate_params()?, b)?),
        GateSpec::Hard { budget, floor } => Some(hard_mask_for_budget(model.gate_params()?, budget, floor)?),
        GateSpec::Mask(m) => Some(m.clone()),
    })
}

/// Evaluates prepared batches under an optional mask.
pub fn evaluate_batches(model: &EncoderModel, batches: &[Batch], mask: Option<&HeadMask>) -> Result<Evaluation> {
    let exec = match mask {
        None => Execution::Dense,
        Some(m) if m.is_binary() => Execution::HardSkip(m),
        Some(m) => Execution::Gated(m),
    };
    let cost = match mask {
        None => 1.0,
        Some(m) => estimated_cost(m)?,
    };
    let mut correct = 0;
    let mut loss = 0.0;
    let mut total = 0;
    for batch in batches {
        let logits = model.infer(&batch.tokens, exec, None)?;
        let (c, l) = score_logits(&logits, &batch.labels);
        correct += c;
        loss += l;
        total += batch.labels.len();
    }
    if total == 0 {
        return Err(Error::Empty("evaluation split".into()));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss / total as f64,
        cost,
        examples: total,
    })
}

pub fn evaluate(model: &EncoderModel, examples: &[Example], spec: GateSpec<'_>) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mask = resolve_mask(model, spec)?;
    evaluate_batches(model, &batches(examples, EVAL_BATCH)?, mask.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Soft,
    Hard,
}

impl SweepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Soft => "soft",
            SweepKind::Hard => "hard",
        }
    }
}

/// One `(budget, cost, accuracy)` measurement. `kind` is free text in reports
/// (`soft`, `hard`, `dense`, `static`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub seed: u64,
    pub kind: String,
    pub budget: f64,
    pub cost: f64,
    pub accuracy: f64,
}

/// Soft and hard (global mask) points for every budget, without checks.
pub fn sweep_points(model: &EncoderModel, examples: &[Example], budgets: &[f64], seed: u64) -> Result<Vec<SweepPoint>> {
    if budgets.is_empty() {
        return Err(Error::Empty("budget list".into()));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config {
            path: "budgets".into(),
            line: 0,
            message: "sweep budgets must be sorted ascending".into(),
        });
    }
    let prepared = batches(examples, EVAL_BATCH)?;
    let gp = model.gate_params()?;
    let mut out = Vec::with_capacity(budgets.len() * 2);
    for &b in budgets {
        let soft = soft_gates(gp, b)?;
        let e = evaluate_batches(model, &prepared, Some(&soft))?;
        out.push(SweepPoint {
            seed,
            kind: SweepKind::Soft.as_str().into(),
            budget: b,
            cost: e.cost,
            accuracy: e.accuracy,
        });
        let hard = hard_mask_for_budget(gp, b, false)?;
        let e = evaluate_batches(model, &prepared, Some(&hard))?;
        out.push(SweepPoint {
            seed,
            kind: SweepKind::Hard.as_str().into(),
            budget: b,
            cost: e.cost,
            accuracy: e.accuracy,
        });
    }
    Ok(out)
}

/// Verifies nondecreasing soft cost and exact `k / (L * H)` hard cost.
pub fn check_sweep(points: &[SweepPoint], layers: usize, heads: usize) -> Result<()> {
    let soft: Vec<&SweepPoint> = points.iter().filter(|p| p.kind == "soft").collect();
    for w in soft.windows(2) {
        if w[1].cost < w[0].cost {
            return Err(Error::CheckFailed {
                check: "soft_cost_monotone",
                detail: format!(
                    "seed {}: cost {} at B={} exceeds cost {} at B={}",
                    w[0].seed, w[0].cost, w[0].budget, w[1].cost, w[1].budget
                ),
            });
        }
    }
    for p in points.iter().filter(|p| p.kind == "hard") {
        let exact = head_count(p.budget, layers, heads)? as f64 / (layers * heads) as f64;
        if p.cost != exact {
            return Err(Error::CheckFailed {
                check: "hard_cost_exact",
                detail: format!("seed {}: hard cost {} at B={} differs from {exact}", p.seed, p.cost, p.budget),
            });
        }
    }
    Ok(())
}

pub fn budget_sweep(model: &EncoderModel, examples: &[Example], budgets: &[f64], seed: u64) -> Result<Vec<SweepPoint>> {
    let points = sweep_points(model, examples, budgets, seed)?;
    check_sweep(&points, model.config.layers, model.config.heads)?;
    Ok(points)
}

/// Validation-loss increase from zeroing each head on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadImportance {
    pub scores: Array,
    pub baseline_loss: f64,
    /// Full-split evaluation passes spent, `L * H + 1`.
    pub passes: usize,
}

pub fn score_heads(model: &EncoderModel, val: &[Example]) -> Result<HeadImportance> {
    let (layers, heads) = (model.config.layers, model.config.heads);
    let prepared = batches(val, EVAL_BATCH)?;
    let mut passes = 0;
    let mut run = |mask: &HeadMask| -> Result<f64> {
        passes += 1;
        Ok(evaluate_batches(model, &prepared, Some(mask))?.loss)
    };
    let baseline_loss = run(&HeadMask::ones(layers, heads))?;
    let mut scores = Array::zeros(&[layers, heads]);
    for l in 0..layers {
        for h in 0..heads {
            let mut values = Array::ones(&[layers, heads]);
            values.set2(l, h, 0.0);
            let mask = HeadMask::new(values, MaskKind::HardGlobal, None)?;
            scores.set2(l, h, run(&mask)? - baseline_loss);
        }
    }
    Ok(HeadImportance {
        scores,
        baseline_loss,
        passes,
    })
}

/// Keeps the `k(B)` most important heads under the hard-mask tie rules.
pub fn prune_posthoc(importance: &HeadImportance, budget: f64, floor: bool) -> Result<HeadMask> {
    let shape = importance.scores.shape();
    let k = head_count(budget, shape[0], shape[1])?;
    let values = select_top_k(&importance.scores, k, floor)?;
    let kind = if floor { MaskKind::HardFloored } else { MaskKind::HardGlobal };
    HeadMask::new(values, kind, Some(budget))
}

/// Ranks starting at 1, with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DegenerateRanking(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateRanking("fewer than two values".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateRanking("all values tie".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStability {
    pub budget_low: f64,
    pub budget_high: f64,
    /// `None` when either gate vector is constant.
    pub spearman: Option<f64>,
    pub retention: f64,
}

/// Spearman correlation of the soft gates at two budgets, and the fraction of
/// the global top-`k(B1)` heads that remain in the top-`k(B2)` set.
pub fn gate_rank_stability(model: &EncoderModel, b1: f64, b2: f64) -> Result<RankStability> {
    let gp = model.gate_params()?;
    let z1 = soft_gates(gp, b1)?;
    let z2 = soft_gates(gp, b2)?;
    let rho = match spearman(z1.values().data(), z2.values().data()) {
        Ok(r) => Some(r),
        Err(Error::DegenerateRanking(_)) => None,
        Err(e) => return Err(e),
    };
    let h1 = hard_mask_for_budget(gp, b1, false)?;
    let h2 = hard_mask_for_budget(gp, b2, false)?;
    let kept = h1
        .values()
        .data()
        .iter()
        .zip(h2.values().data())
        .filter(|(a, b)| **a == 1.0 && **b == 1.0)
        .count();
    Ok(RankStability {
        budget_low: b1,
        budget_high: b2,
        spearman: rho,
        retention: kept as f64 / h1.active_count() as f64,
    })
}

/// Mean and sample standard deviation (divisor `n - 1`); the deviation of a
/// single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub budget: f64,
    pub seeds: Vec<u64>,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub single_seed: bool,
}

/// Groups points by `(kind, budget)` in first-appearance order.
pub fn summarize(points: &[SweepPoint]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, u64), Vec<&SweepPoint>)> = Vec::new();
    for p in points {
        let key = (p.kind.clone(), p.budget.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(p),
            None => groups.push((key, vec![p])),
        }
    }
    groups
        .into_iter()
        .map(|((kind, bits), pts)| {
            let (cost_mean, cost_std) = mean_std(&pts.iter().map(|p| p.cost).collect::<Vec<_>>());
            let (accuracy_mean, accuracy_std) = mean_std(&pts.iter().map(|p| p.accuracy).collect::<Vec<_>>());
            SummaryRow {
                kind,
                budget: f64::from_bits(bits),
                seeds: pts.iter().map(|p| p.seed).collect(),
                cost_mean,
                cost_std,
                accuracy_mean,
                accuracy_std,
                single_seed: pts.len() == 1,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoSummary {
    pub rows: Vec<SummaryRow>,
    /// Producing configuration and any other provenance.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

/// Writes `<out>.csv` (`seed,kind,budget,cost,accuracy`) and `<out>.json`
/// (per-group mean and standard deviation); returns both paths.
pub fn pareto_report(
    points: &[SweepPoint],
    out: &Path,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<(PathBuf, PathBuf)> {
    if points.is_empty() {
        return Err(Error::Empty("pareto report needs at least one point".into()));
    }
    let csv_path = out.with_extension("csv");
    let json_path = out.with_extension("json");
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(&csv_path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let summary = ParetoSummary {
        rows: summarize(points),
        provenance,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_points(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_textbook_values() {
        assert!((spearman(&[1., 2., 3., 5., 4.], &[1., 2., 3., 4., 5.]).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert!(matches!(spearman(&[1., 1.], &[1., 2.]), Err(Error::DegenerateRanking(_))));
    }

    #[test]
    fn average_ranks_split_ties() {
        assert_eq!(average_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.9]), (0.9, 0.0));
    }

    #[test]
    fn summarize_flags_single_seed() {
        let p = |seed, acc| SweepPoint {
            seed,
            kind: "soft".into(),
            budget: 0.5,
            cost: 0.5,
            accuracy: acc,
        };
        let rows = summarize(&[p(7, 0.9), p(13, 0.9), p(21, 0.9)]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].accuracy_mean - 0.9).abs() < 1e-15);
        assert!(rows[0].accuracy_std < 1e-15);
        assert!(!rows[0].single_seed);
        assert!(summarize(&[p(7, 0.8)])[0].single_seed);
    }
}
