//! Budget-conditioned head gates.
//!
//! A gate for head `(l, h)` at requested budget `B` is
//! `sigmoid((a[l,h] + softplus(s[l,h]) * logit(clip(B))) / tau)`. Because
//! `softplus(s) > 0`, every gate is nondecreasing in `B`. Hard masks keep the
//! `k(B) = max(1, round(B * L * H))` largest gates.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::kernels::{logit, sigmoid, softplus};
use crate::tensor::{Array, Graph, Var};

pub const BUDGET_EPS: f64 = 1e-4;
pub const DEFAULT_TAU: f64 = 1.0;
/// Standard deviation of the initial head logits.
pub const LOGIT_INIT_STD: f64 = 0.02;

/// Learned gate state: head logits `a`, raw sensitivities `s`, temperature and clip constant.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub logits: Array,
    pub sensitivity: Array,
    pub tau: f64,
    pub eps: f64,
}

impl GateParams {
    pub fn new(logits: Array, sensitivity: Array, tau: f64, eps: f64) -> Result<Self> {
        let p = Self {
            logits,
            sensitivity,
            tau,
            eps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Logits drawn from `N(0, 0.02^2)`; sensitivities set so `softplus(s) = 1`.
    pub fn init<R: Rng>(layers: usize, heads: usize, tau: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, LOGIT_INIT_STD).expect("valid normal");
        let logits = (0..layers * heads).map(|_| normal.sample(rng)).collect();
        let s0 = unit_sensitivity();
        Self::new(
            Array::from_vec(&[layers, heads], logits)?,
            Array::full(&[layers, heads], s0),
            tau,
            BUDGET_EPS,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.logits.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 || self.sensitivity.shape() != s {
            return Err(Error::ModelConfig(format!(
                "gate logits {:?} and sensitivities {:?} must be matching non-empty L x H arrays",
                s,
                self.sensitivity.shape()
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::ModelConfig(format!("gate temperature {} must be positive", self.tau)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::ModelConfig(format!("gate clip constant {} must lie in (0, 0.5)", self.eps)));
        }
        if self.sensitivity.data().iter().any(|&v| !(softplus(v) > 0.0)) {
            return Err(Error::ModelConfig("softplus(sensitivity) must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Raw sensitivity whose softplus is exactly one: `ln(e - 1)`.
pub fn unit_sensitivity() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Soft,
    HardGlobal,
    HardFloored,
}

impl MaskKind {
    pub fn is_hard(self) -> bool {
        !matches!(self, MaskKind::Soft)
    }
}

/// An `L x H` matrix of gate values with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    values: Array,
    kind: MaskKind,
    budget: Option<f64>,
}

impl HeadMask {
    pub fn new(values: Array, kind: MaskKind, budget: Option<f64>) -> Result<Self> {
        if values.ndim() != 2 || values.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mask = Self { values, kind, budget };
        match kind {
            MaskKind::Soft => {
                if mask.values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data("soft gate values must lie in [0, 1]".into()));
                }
            }
            MaskKind::HardGlobal | MaskKind::HardFloored => mask.ensure_binary()?,
        }
        if kind == MaskKind::HardFloored {
            for l in 0..mask.layers() {
                if (0..mask.heads()).all(|h| mask.values.get2(l, h) == 0.0) {
                    return Err(Error::Data(format!("floored mask leaves layer {l} empty")));
                }
            }
        }
        Ok(mask)
    }

    /// Every head active.
    pub fn ones(layers: usize, heads: usize) -> Self {
        Self {
            values: Array::ones(&[layers, heads]),
            kind: MaskKind::HardGlobal,
            budget: Some(1.0),
        }
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn budget(&self) -> Option<f64> {
        self.budget
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values.get2(layer, head)
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        let h = self.heads();
        &self.values.data()[layer * h..(layer + 1) * h]
    }

    pub fn is_binary(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self) -> Result<()> {
        for l in 0..self.layers() {
            for h in 0..self.heads() {
                let v = self.get(l, h);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::NonBinaryMask { layer: l, head: h, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Active `(layer, head)` pairs in row-major order.
    pub fn active_heads(&self) -> Vec<(usize, usize)> {
        let h = self.heads();
        self.values
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| (i / h, i % h))
            .collect()
    }

    /// CSV with one row per layer, 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for l in 0..self.layers() {
            let row: Vec<String> = self.row(l).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str, kind: MaskKind, budget: Option<f64>) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("mask csv line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        let heads = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || heads == 0 || rows.iter().any(|r| r.len() != heads) {
            return Err(Error::Data("mask csv must be a non-empty rectangular matrix".into()));
        }
        let layers = rows.len();
        let values = Array::from_vec(&[layers, heads], rows.concat())?;
        Self::new(values, kind, budget)
    }
}

/// Clamps a requested budget into `[eps, 1 - eps]` so its logit is finite.
pub fn clip_budget(budget: f64) -> Result<f64> {
    clip_budget_with(budget, BUDGET_EPS)
}

pub fn clip_budget_with(budget: f64, eps: f64) -> Result<f64> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidBudget(budget));
    }
    Ok(budget.max(eps).min(1.0 - eps))
}

pub fn soft_gates(params: &GateParams, budget: f64) -> Result<HeadMask> {
    let c = logit(clip_budget_with(budget, params.eps)?);
    let inv_tau = 1.0 / params.tau;
    let data = params
        .logits
        .data()
        .iter()
        .zip(params.sensitivity.data())
        .map(|(&a, &s)| sigmoid((a + softplus(s) * c) * inv_tau))
        .collect();
    let values = Array::from_vec(params.logits.shape(), data)?;
    Ok(HeadMask {
        values,
        kind: MaskKind::Soft,
        budget: Some(budget),
    })
}

/// Records the soft gates on a graph; returns an `[L, H]` node differentiable
/// with respect to `logits` and `sensitivity`.
pub fn soft_gates_graph(
    g: &mut Graph,
    logits: Var,
    sensitivity: Var,
    tau: f64,
    eps: f64,
    budget: f64,
) -> Result<Var> {
    let c = logit(clip_budget_with(budget, eps)?);
    let sp = g.softplus(sensitivity)?;
    let shifted = g.scale(sp, c)?;
    let pre = g.add(logits, shifted)?;
    let pre = g.scale(pre, 1.0 / tau)?;
    Ok(g.sigmoid(pre)?)
}

/// Forward value is the global hard top-`k(B)` mask of the soft gates; the
/// backward pass differentiates the soft gates.
pub fn straight_through_gates(
    g: &mut Graph,
    logits: Var,
    sensitivity: Var,
    tau: f64,
    eps: f64,
    budget: f64,
) -> Result<Var> {
    let soft = soft_gates_graph(g, logits, sensitivity, tau, eps, budget)?;
    let scores = g.value(soft);
    let (layers, heads) = (scores.shape()[0], scores.shape()[1]);
    let k = head_count(budget, layers, heads)?;
    let hard = select_top_k(scores, k, false)?;
    Ok(g.straight_through(soft, hard)?)
}

/// Mean gate value over all heads.
pub fn estimated_cost(mask: &HeadMask) -> Result<f64> {
    if mask.values.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask.values.mean())
}

/// `max(1, round(B * L * H))`, rounding half away from zero.
pub fn head_count(budget: f64, layers: usize, heads: usize) -> Result<usize> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidBudget(budget));
    }
    if layers == 0 || heads == 0 {
        return Err(Error::ModelConfig(format!("head grid {layers} x {heads} is empty")));
    }
    let total = layers * heads;
    let k = (budget * total as f64).round() as usize;
    Ok(k.clamp(1, total))
}

/// Orders flat head indices by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Binary `[L, H]` selection of `k` heads by descending score.
///
/// With `floor`, each layer's best head is taken first and the remaining
/// `k - L` slots go to the best unselected heads globally. Ties break by
/// `(layer, head)` ascending.
pub fn select_top_k(scores: &Array, k: usize, floor: bool) -> Result<Array> {
    if scores.ndim() != 2 || scores.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (layers, heads) = (scores.shape()[0], scores.shape()[1]);
    let total = layers * heads;
    if k == 0 || k > total {
        return Err(Error::InvalidHeadCount { k, total });
    }
    if floor && k < layers {
        return Err(Error::InfeasibleFloor { k, layers });
    }
    let data = scores.data();
    let mut chosen = vec![false; total];
    let mut remaining = k;
    if floor {
        for l in 0..layers {
            let row = &data[l * heads..(l + 1) * heads];
            let best = ranking(row)[0];
            chosen[l * heads + best] = true;
        }
        remaining -= layers;
    }
    for i in ranking(data) {
        if remaining == 0 {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            remaining -= 1;
        }
    }
    let values = chosen.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    Ok(Array::from_vec(&[layers, heads], values)?)
}

pub fn hard_mask(soft: &HeadMask, k: usize, floor: bool) -> Result<HeadMask> {
    let values = select_top_k(&soft.values, k, floor)?;
    let kind = if floor { MaskKind::HardFloored } else { MaskKind::HardGlobal };
    Ok(HeadMask {
        values,
        kind,
        budget: soft.budget,
    })
}

/// Hard mask for a requested budget: `hard_mask(soft_gates(B), k(B), floor)`.
pub fn hard_mask_for_budget(params: &GateParams, budget: f64, floor: bool) -> Result<HeadMask> {
    let soft = soft_gates(params, budget)?;
    let k = head_count(budget, params.layers(), params.heads())?;
    hard_mask(&soft, k, floor)
}
