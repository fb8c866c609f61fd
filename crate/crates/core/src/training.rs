//! Dense, budgeted, static and hard-adaptation training loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_list, parse_value};
use crate::data::{batches, Batch, DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::evaluation::{argmax, evaluate_batches, Evaluation};
use crate::gating::{hard_mask_for_budget, soft_gates, soft_gates_graph, straight_through_gates};
use crate::model::{EncoderModel, GraphGates, ModelConfig, GATE_LOGITS, GATE_SENSITIVITY};
use crate::tensor::kernels::log_softmax_rows;
use crate::tensor::{Array, Graph, TensorError, Var};

/// Budgets whose mean validation accuracy selects budgeted checkpoints.
pub const SELECTION_BUDGETS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

const GATE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const SHUFFLE_SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Dense,
    Budgeted,
    Static(f64),
    HardAdapt,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Dense => write!(f, "dense"),
            TrainMode::Budgeted => write!(f, "budgeted"),
            TrainMode::Static(b) => write!(f, "static:{b}"),
            TrainMode::HardAdapt => write!(f, "hard_adapt"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(TrainMode::Dense),
            "budgeted" => Ok(TrainMode::Budgeted),
            "hard_adapt" | "hard-adapt" => Ok(TrainMode::HardAdapt),
            _ => match s.strip_prefix("static:") {
                Some(b) => b
                    .parse()
                    .map(TrainMode::Static)
                    .map_err(|e| format!("static budget `{b}`: {e}")),
                None => Err(format!("unknown mode `{s}`")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub name: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub budget_range: (f64, f64),
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 32,
            batch_size: 64,
            budget_range: (0.25, 1.0),
            lambda: 0.02,
            beta: 2.0,
            alpha: 0.5,
            temperature: 2.0,
            seed: 7,
            mode: TrainMode::Dense,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        let (lo, hi) = self.budget_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("budget range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return bad(format!("lambda {} and beta {} must be nonnegative", self.lambda, self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let TrainMode::Static(b) = self.mode {
            if !(b > 0.0 && b <= 1.0) {
                return bad(format!("static budget {b} must lie in (0, 1]"));
            }
        }
        let o = &self.optimizer;
        if o.name != "adamw" {
            return bad(format!("unsupported optimizer `{}`", o.name));
        }
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && o.clip_norm >= 0.0 && o.eps > 0.0) {
            return bad("optimizer needs learning_rate > 0, eps > 0, weight_decay >= 0, clip_norm >= 0".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let o = &mut self.optimizer;
        match key {
            "optimizer.name" => o.name = value.to_string(),
            "optimizer.learning_rate" => o.learning_rate = parse_value(key, value)?,
            "optimizer.weight_decay" => o.weight_decay = parse_value(key, value)?,
            "optimizer.beta1" => o.beta1 = parse_value(key, value)?,
            "optimizer.beta2" => o.beta2 = parse_value(key, value)?,
            "optimizer.eps" => o.eps = parse_value(key, value)?,
            "optimizer.clip_norm" => o.clip_norm = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "budget_range" => {
                let v: Vec<f64> = parse_list(key, value)?;
                let [lo, hi] = v.as_slice() else {
                    return Err(format!("`{key}` needs two values lo,hi"));
                };
                self.budget_range = (*lo, *hi);
            }
            "lambda" => self.lambda = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = parse_value(key, value)?,
            _ => return Err(format!("unknown key `train.{key}`")),
        }
        Ok(())
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        let o = &self.optimizer;
        let f = |x: f64| format!("{x:?}");
        [
            ("optimizer.name", o.name.clone()),
            ("optimizer.learning_rate", f(o.learning_rate)),
            ("optimizer.weight_decay", f(o.weight_decay)),
            ("optimizer.beta1", f(o.beta1)),
            ("optimizer.beta2", f(o.beta2)),
            ("optimizer.eps", f(o.eps)),
            ("optimizer.clip_norm", f(o.clip_norm)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("budget_range", format!("{:?},{:?}", self.budget_range.0, self.budget_range.1)),
            ("lambda", f(self.lambda)),
            ("beta", f(self.beta)),
            ("alpha", f(self.alpha)),
            ("temperature", f(self.temperature)),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Rebuilds a config from `to_kv` pairs.
    pub(crate) fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> std::result::Result<Self, String> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Draws budgets uniformly from `[lo, hi]`.
pub fn sample_budget<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Mean cross-entropy of `[batch, classes]` logits.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> f64 {
    let c = logits.last_dim();
    let mut lp = logits.data().to_vec();
    log_softmax_rows(&mut lp, c);
    -labels.iter().zip(lp.chunks_exact(c)).map(|(&y, row)| row[y]).sum::<f64>() / labels.len() as f64
}

pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub cost_term: f64,
    pub violation: f64,
    pub kl: f64,
}

fn check_cost_budget(cost: f64, budget: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&cost) {
        return Err(Error::TrainConfig(format!("cost {cost} outside [0, 1]")));
    }
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidBudget(budget));
    }
    Ok(())
}

/// `CE + lambda * C + beta * max(0, C - B)^2`.
pub fn budgeted_loss(logits: &Array, labels: &[usize], cost: f64, budget: f64, lambda: f64, beta: f64) -> Result<LossTerms> {
    check_cost_budget(cost, budget)?;
    let ce = cross_entropy(logits, labels);
    let over = (cost - budget).max(0.0);
    let cost_term = lambda * cost;
    let violation = beta * over * over;
    Ok(LossTerms {
        total: ce + cost_term + violation,
        ce,
        cost_term,
        violation,
        kl: 0.0,
    })
}

/// Graph form of [`budgeted_loss`]; `cost` is a scalar node.
pub fn budgeted_loss_graph(g: &mut Graph, ce: Var, cost: Var, budget: f64, lambda: f64, beta: f64) -> Result<Var> {
    let cost_term = g.scale(cost, lambda)?;
    let over = g.add_scalar(cost, -budget)?;
    let over = g.relu(over)?;
    let sq = g.mul(over, over)?;
    let violation = g.scale(sq, beta)?;
    let t = g.add(ce, cost_term)?;
    Ok(g.add(t, violation)?)
}

fn softmax_t(logits: &Array, temperature: f64) -> Vec<f64> {
    let c = logits.last_dim();
    let mut lp: Vec<f64> = logits.data().iter().map(|v| v / temperature).collect();
    log_softmax_rows(&mut lp, c);
    lp
}

/// Batch-mean `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn distill_kl(student: &Array, teacher: &Array, temperature: f64) -> f64 {
    let c = student.last_dim();
    let ls = softmax_t(student, temperature);
    let lt = softmax_t(teacher, temperature);
    let rows = student.rows();
    let mut kl = 0.0;
    for (rs, rt) in ls.chunks_exact(c).zip(lt.chunks_exact(c)) {
        for (s, t) in rs.iter().zip(rt) {
            let p = t.exp();
            if p > 0.0 {
                kl += p * (t - s);
            }
        }
    }
    kl / rows as f64
}

/// `(1 - alpha) * CE + alpha * T^2 * KL(teacher || student)` at temperature `T`.
pub fn distill_loss(
    student: &Array,
    teacher: &Array,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<LossTerms> {
    if student.shape() != teacher.shape() {
        return Err(TensorError::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        ))
        .into());
    }
    if !(0.0..=1.0).contains(&alpha) || !(temperature > 0.0) {
        return Err(Error::TrainConfig(format!("alpha {alpha} or temperature {temperature} out of range")));
    }
    let ce = cross_entropy(student, labels);
    let kl = distill_kl(student, teacher, temperature);
    Ok(LossTerms {
        total: (1.0 - alpha) * ce + alpha * temperature * temperature * kl,
        ce,
        cost_term: 0.0,
        violation: 0.0,
        kl,
    })
}

/// Graph form of [`distill_loss`]; the teacher enters as a constant.
pub fn distill_loss_graph(
    g: &mut Graph,
    student: Var,
    teacher: &Array,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    let ce = cross_entropy_graph(g, student, labels)?;
    let lt = softmax_t(teacher, temperature);
    let rows = teacher.rows() as f64;
    let pt: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
    let entropy_part: f64 = pt.iter().zip(&lt).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum::<f64>() / rows;
    let scaled = g.scale(student, 1.0 / temperature)?;
    let ls = g.log_softmax(scaled)?;
    let p = g.constant(Array::from_vec(teacher.shape(), pt)?);
    let cross = g.mul(ls, p)?;
    let cross = g.sum(cross)?;
    let cross = g.scale(cross, -1.0 / rows)?;
    let kl = g.add_scalar(cross, entropy_part)?;
    let ce = g.scale(ce, 1.0 - alpha)?;
    let kl = g.scale(kl, alpha * temperature * temperature)?;
    Ok(g.add(ce, kl)?)
}

/// AdamW with decoupled weight decay and global-norm clipping.
///
/// Decay skips gate parameters and one-dimensional arrays (biases, norms).
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, model: &mut EncoderModel, grads: &BTreeMap<String, Array>) -> Result<f64> {
        let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(TensorError::NonFinite { op: "gradient norm" }.into());
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, param) in model.named_params_mut() {
            let Some(grad) = grads.get(&name) else { continue };
            let decay = name != GATE_LOGITS && name != GATE_SENSITIVITY && param.ndim() > 1;
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, &g0), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g0 * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                if decay {
                    *p -= c.learning_rate * c.weight_decay * *p;
                }
                *p -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub loss: f64,
    pub ce: f64,
    pub cost_term: f64,
    pub violation: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub cost: f64,
}

/// Collects log records and optionally streams them as JSON lines.
pub struct TrainLog<'w> {
    pub records: Vec<LogRecord>,
    sink: Option<&'w mut dyn Write>,
}

impl<'w> TrainLog<'w> {
    pub fn new(sink: Option<&'w mut dyn Write>) -> Self {
        Self {
            records: Vec::new(),
            sink,
        }
    }

    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(w) = self.sink.as_deref_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

impl Default for TrainLog<'_> {
    fn default() -> Self {
        Self::new(None)
    }
}

fn count_correct(logits: &Array, labels: &[usize]) -> usize {
    let c = logits.last_dim();
    labels
        .iter()
        .zip(logits.data().chunks_exact(c))
        .filter(|(&y, row)| argmax(row) == y)
        .count()
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            epoch,
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Validation score used for checkpoint selection in each mode, plus the
/// evaluation logged for it.
fn validate(model: &EncoderModel, val: &[Batch], mode: TrainMode) -> Result<(f64, Vec<(Option<f64>, Evaluation)>)> {
    let evals: Vec<(Option<f64>, Evaluation)> = match mode {
        TrainMode::Dense => vec![(None, evaluate_batches(model, val, None)?)],
        TrainMode::Static(b) => {
            let z = soft_gates(model.gate_params()?, b)?;
            vec![(Some(b), evaluate_batches(model, val, Some(&z))?)]
        }
        TrainMode::Budgeted => SELECTION_BUDGETS
            .iter()
            .map(|&b| {
                let z = soft_gates(model.gate_params()?, b)?;
                Ok((Some(b), evaluate_batches(model, val, Some(&z))?))
            })
            .collect::<Result<_>>()?,
        TrainMode::HardAdapt => SELECTION_BUDGETS
            .iter()
            .map(|&b| {
                let m = hard_mask_for_budget(model.gate_params()?, b, false)?;
                Ok((Some(b), evaluate_batches(model, val, Some(&m))?))
            })
            .collect::<Result<_>>()?,
    };
    let score = evals.iter().map(|(_, e)| e.accuracy).sum::<f64>() / evals.len() as f64;
    Ok((score, evals))
}

/// Loss node for one batch in the given mode, with the logged loss terms.
fn batch_loss(
    g: &mut Graph,
    model: &EncoderModel,
    teacher: Option<&EncoderModel>,
    batch: &Batch,
    cfg: &TrainConfig,
    budget: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var, LossTerms, f64)> {
    let labels = &batch.labels;
    match cfg.mode {
        TrainMode::Dense => {
            let logits = model.forward_graph(g, &batch.tokens, GraphGates::Dense, dropout)?;
            let ce = cross_entropy_graph(g, logits, labels)?;
            let v = g.value(ce).item()?;
            Ok((ce, logits, LossTerms { total: v, ce: v, ..Default::default() }, 1.0))
        }
        TrainMode::Budgeted | TrainMode::Static(_) => {
            let gp = model.gate_params()?;
            let (a, s) = model.gate_vars(g)?;
            let z = soft_gates_graph(g, a, s, gp.tau, gp.eps, budget)?;
            let logits = model.forward_graph(g, &batch.tokens, GraphGates::Values(z), dropout)?;
            let ce = cross_entropy_graph(g, logits, labels)?;
            let cost = g.mean(z)?;
            let loss = budgeted_loss_graph(g, ce, cost, budget, cfg.lambda, cfg.beta)?;
            let c = g.value(cost).item()?;
            let ce_v = g.value(ce).item()?;
            let over = (c - budget).max(0.0);
            let terms = LossTerms {
                total: g.value(loss).item()?,
                ce: ce_v,
                cost_term: cfg.lambda * c,
                violation: cfg.beta * over * over,
                kl: 0.0,
            };
            Ok((loss, logits, terms, c))
        }
        TrainMode::HardAdapt => {
            let teacher = teacher.ok_or_else(|| Error::TrainConfig("hard adaptation needs a teacher".into()))?;
            let tmask = soft_gates(teacher.gate_params()?, budget)?;
            let tlogits = teacher.forward_gated(&batch.tokens, &tmask)?;
            let gp = model.gate_params()?;
            let (a, s) = model.gate_vars(g)?;
            let z = straight_through_gates(g, a, s, gp.tau, gp.eps, budget)?;
            let logits = model.forward_graph(g, &batch.tokens, GraphGates::Values(z), dropout)?;
            let loss = distill_loss_graph(g, logits, &tlogits, labels, cfg.alpha, cfg.temperature)?;
            let terms = distill_loss(g.value(logits), &tlogits, labels, cfg.alpha, cfg.temperature)?;
            let cost = g.value(z).mean();
            Ok((loss, logits, terms, cost))
        }
    }
}

/// Runs the configured number of epochs on `model` and returns the
/// checkpoint with the best validation score (earliest on ties).
fn fit(
    mut model: EncoderModel,
    teacher: Option<&EncoderModel>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    log: &mut TrainLog<'_>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let val = batches(&data.val, cfg.batch_size)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut budget_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SEED_SALT);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let use_dropout = model.config.dropout > 0.0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossTerms::default();
        let mut cost_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut budget_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_examples(&examples)?;
            let budget = match cfg.mode {
                TrainMode::Dense => 1.0,
                TrainMode::Static(b) => b,
                TrainMode::Budgeted | TrainMode::HardAdapt => sample_budget(&mut budget_rng, cfg.budget_range),
            };
            let mut g = Graph::new();
            let drop = use_dropout.then_some(&mut dropout_rng);
            let (loss, logits, terms, cost) =
                batch_loss(&mut g, &model, teacher, &batch, cfg, budget, drop).map_err(|e| diverged(epoch, step, e))?;
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: format!("loss {}", terms.total),
                });
            }
            correct += count_correct(g.value(logits), &batch.labels);
            let grads = g.backward(loss).map_err(|e| diverged(epoch, step, e.into()))?;
            opt.step(&mut model, &grads.into_params()).map_err(|e| diverged(epoch, step, e))?;
            let n = batch.labels.len();
            sum.total += terms.total * n as f64;
            sum.ce += terms.ce * n as f64;
            sum.cost_term += terms.cost_term * n as f64;
            sum.violation += terms.violation * n as f64;
            sum.kl += terms.kl * n as f64;
            cost_sum += cost * n as f64;
            budget_sum += budget * n as f64;
            seen += n;
        }
        let nf = seen as f64;
        log.push(LogRecord {
            epoch,
            split: "train".into(),
            budget: (cfg.mode != TrainMode::Dense).then_some(budget_sum / nf),
            loss: sum.total / nf,
            ce: sum.ce / nf,
            cost_term: sum.cost_term / nf,
            violation: sum.violation / nf,
            kl: sum.kl / nf,
            accuracy: correct as f64 / nf,
            cost: cost_sum / nf,
        })?;
        let (score, evals) = validate(&model, &val, cfg.mode)?;
        for (budget, e) in evals {
            log.push(LogRecord {
                epoch,
                split: "val".into(),
                budget,
                loss: e.loss,
                ce: e.loss,
                cost_term: 0.0,
                violation: 0.0,
                kl: 0.0,
                accuracy: e.accuracy,
                cost: e.cost,
            })?;
        }
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (score, epoch, model) = best.ok_or_else(|| Error::TrainConfig("epochs must be positive".into()))?;
    Ok(Checkpoint {
        model,
        train: Some(cfg.clone()),
        best_val_accuracy: score,
        epoch,
        meta: BTreeMap::new(),
    })
}

fn require_mode(cfg: &TrainConfig, ok: bool, want: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::TrainConfig(format!("mode {} given where {want} is required", cfg.mode)))
    }
}

fn check_warm_start(model_cfg: &ModelConfig, warm: &Checkpoint) -> Result<()> {
    if &warm.model.config != model_cfg {
        return Err(Error::Checkpoint(format!(
            "warm-start model config {:?} differs from requested {:?}",
            warm.model.config, model_cfg
        )));
    }
    Ok(())
}

pub fn train_dense(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &DatasetSplit, log: &mut TrainLog<'_>) -> Result<Checkpoint> {
    require_mode(cfg, cfg.mode == TrainMode::Dense, "dense")?;
    let model = EncoderModel::new(model_cfg.clone(), cfg.seed)?;
    fit(model, None, data, cfg, log)
}

/// Starting point for gated training: the warm-start body with fresh gates,
/// or a fresh model. Gates already present on the warm start are kept.
pub fn gated_start(model_cfg: &ModelConfig, cfg: &TrainConfig, warm_start: Option<&Checkpoint>) -> Result<EncoderModel> {
    let mut model = match warm_start {
        Some(w) => {
            check_warm_start(model_cfg, w)?;
            w.model.clone()
        }
        None => EncoderModel::new(model_cfg.clone(), cfg.seed)?,
    };
    if model.gates.is_none() {
        model.init_gates(cfg.seed ^ GATE_SEED_SALT)?;
    }
    Ok(model)
}

pub fn train_budgeted(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    warm_start: Option<&Checkpoint>,
    log: &mut TrainLog<'_>,
) -> Result<Checkpoint> {
    require_mode(cfg, cfg.mode == TrainMode::Budgeted, "budgeted")?;
    fit(gated_start(model_cfg, cfg, warm_start)?, None, data, cfg, log)
}

pub fn train_static(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    warm_start: Option<&Checkpoint>,
    log: &mut TrainLog<'_>,
) -> Result<Checkpoint> {
    require_mode(cfg, matches!(cfg.mode, TrainMode::Static(_)), "static")?;
    fit(gated_start(model_cfg, cfg, warm_start)?, None, data, cfg, log)
}

/// Fine-tunes a copy of a gated checkpoint under straight-through hard masks,
/// distilling from the unchanged soft-gated original.
pub fn adapt_hard(cfg: &TrainConfig, teacher: &Checkpoint, data: &DatasetSplit, log: &mut TrainLog<'_>) -> Result<Checkpoint> {
    require_mode(cfg, cfg.mode == TrainMode::HardAdapt, "hard_adapt")?;
    teacher.model.gate_params()?;
    fit(teacher.model.clone(), Some(&teacher.model), data, cfg, log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgeted_loss_terms() {
        let logits = Array::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let t = budgeted_loss(&logits, &[0], 0.4, 0.5, 0.02, 2.0).unwrap();
        assert_eq!(t.violation, 0.0);
        let t = budgeted_loss(&logits, &[0], 0.6, 0.5, 0.02, 2.0).unwrap();
        assert!((t.violation - 0.02).abs() < 1e-15);
        let t = budgeted_loss(&logits, &[0], 0.5, 0.5, 0.02, 2.0).unwrap();
        assert!((t.cost_term - 0.01).abs() < 1e-15);
        assert!(budgeted_loss(&logits, &[0], 1.5, 0.5, 0.02, 2.0).is_err());
        assert!(budgeted_loss(&logits, &[0], 0.5, 0.0, 0.02, 2.0).is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in [TrainMode::Dense, TrainMode::Budgeted, TrainMode::Static(0.25), TrainMode::HardAdapt] {
            assert_eq!(m.to_string().parse::<TrainMode>().unwrap(), m);
        }
        assert!("static:x".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Static(0.5);
        cfg.optimizer.learning_rate = 1.0 / 3.0;
        let kv = cfg.to_kv();
        let back = TrainConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::default();
        c.budget_range = (0.6, 0.5);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }
}
