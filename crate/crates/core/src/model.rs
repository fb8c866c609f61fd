//! Gated transformer encoder classifier.
//!
//! Pre-norm blocks with learned positional embeddings and mean pooling. Each
//! head's attention output is multiplied by its gate before the (bias-free)
//! output projection, so a zero gate removes the head's contribution exactly.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gating::{GateParams, HeadMask, DEFAULT_TAU};
use crate::tensor::kernels::{self, gemm, mean_pool_data, merge_heads_data, split_heads_data};
use crate::tensor::{Array, Graph, Var};

pub const GATE_LOGITS: &str = "gate.logits";
pub const GATE_SENSITIVITY: &str = "gate.sensitivity";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 64,
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            num_classes: 2,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::ModelConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ModelConfig(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        use crate::config::parse_value;
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            _ => return Err(format!("unknown key `model.{key}`")),
        }
        Ok(())
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }
}

/// A batch of equal-length token sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || ids.is_empty() {
            return Err(Error::Empty("token batch".into()));
        }
        if ids.len() % seq_len != 0 {
            return Err(Error::Data(format!(
                "{} token ids do not split into sequences of {seq_len}",
                ids.len()
            )));
        }
        Ok(Self {
            batch: ids.len() / seq_len,
            ids,
            seq_len,
        })
    }

    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut seq_len = None;
        for s in seqs {
            match seq_len {
                None => seq_len = Some(s.len()),
                Some(n) if n != s.len() => {
                    return Err(Error::Data("sequences in a batch must share one length".into()))
                }
                _ => {}
            }
            ids.extend_from_slice(s);
        }
        Self::new(ids, seq_len.unwrap_or(0))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// How the gates enter a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GraphGates {
    Dense,
    /// An `[L, H]` node of gate values (soft, straight-through or constant).
    Values(Var),
}

/// Tape-free execution modes.
#[derive(Debug, Clone, Copy)]
pub enum Execution<'a> {
    Dense,
    /// Every head computed, then scaled by its gate.
    Gated(&'a HeadMask),
    /// Only heads with gate 1 are computed; requires a binary mask.
    HardSkip(&'a HeadMask),
}

/// Instrumentation for tape-free inference: multiply-accumulate counts of the
/// head-dependent work and, optionally, the attention maps of computed heads.
#[derive(Debug, Default)]
pub struct InferenceProbe {
    attention_macs: Cell<u64>,
    record_maps: bool,
    maps: RefCell<Vec<(usize, usize, Vec<f64>)>>,
}

impl InferenceProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording_maps() -> Self {
        Self {
            record_maps: true,
            ..Self::default()
        }
    }

    pub fn attention_macs(&self) -> u64 {
        self.attention_macs.get()
    }

    /// Recorded `(layer, head, [n * n] probabilities)` per sequence and computed head.
    pub fn attention_maps(&self) -> Vec<(usize, usize, Vec<f64>)> {
        self.maps.borrow().clone()
    }

    fn add(&self, macs: usize) {
        self.attention_macs.set(self.attention_macs.get() + macs as u64);
    }

    fn record(&self, layer: usize, head: usize, probs: &[f64]) {
        if self.record_maps {
            self.maps.borrow_mut().push((layer, head, probs.to_vec()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Array>,
    pub gates: Option<GateParams>,
}

fn lname(layer: usize, part: &str) -> String {
    format!("layer{layer}.{part}")
}

impl EncoderModel {
    /// Randomly initialized model without gates.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let f = config.ffn_dim;
        let mut params = BTreeMap::new();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| -> Array {
            let dist = Normal::new(0.0, std).expect("valid std");
            let n = shape.iter().product();
            Array::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        params.insert("embed.token".into(), normal(&[config.vocab_size, d], emb_std, &mut rng));
        params.insert("embed.pos".into(), normal(&[config.seq_len, d], emb_std, &mut rng));
        for l in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                params.insert(lname(l, &format!("{ln}.gamma")), Array::ones(&[d]));
                params.insert(lname(l, &format!("{ln}.beta")), Array::zeros(&[d]));
            }
            let std = 1.0 / (d as f64).sqrt();
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(lname(l, &format!("attn.{w}")), normal(&[d, d], std, &mut rng));
            }
            for b in ["bq", "bk", "bv"] {
                params.insert(lname(l, &format!("attn.{b}")), Array::zeros(&[d]));
            }
            params.insert(lname(l, "ffn.w1"), normal(&[d, f], std, &mut rng));
            params.insert(lname(l, "ffn.b1"), Array::zeros(&[f]));
            params.insert(lname(l, "ffn.w2"), normal(&[f, d], 1.0 / (f as f64).sqrt(), &mut rng));
            params.insert(lname(l, "ffn.b2"), Array::zeros(&[d]));
        }
        params.insert("final_ln.gamma".into(), Array::ones(&[d]));
        params.insert("final_ln.beta".into(), Array::zeros(&[d]));
        params.insert(
            "head.w".into(),
            normal(&[d, config.num_classes], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        params.insert("head.b".into(), Array::zeros(&[config.num_classes]));
        Ok(Self {
            config,
            params,
            gates: None,
        })
    }

    /// Attaches freshly initialized gates (replacing any existing ones).
    pub fn init_gates(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.gates = Some(GateParams::init(
            self.config.layers,
            self.config.heads,
            DEFAULT_TAU,
            &mut rng,
        )?);
        Ok(())
    }

    pub fn gate_params(&self) -> Result<&GateParams> {
        self.gates.as_ref().ok_or(Error::MissingGates)
    }

    pub fn param(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Every trainable array by name, gates included, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out: Vec<(String, &Array)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(g) = &self.gates {
            out.push((GATE_LOGITS.into(), &g.logits));
            out.push((GATE_SENSITIVITY.into(), &g.sensitivity));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out: Vec<(String, &mut Array)> =
            self.params.iter_mut().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(g) = &mut self.gates {
            out.push((GATE_LOGITS.into(), &mut g.logits));
            out.push((GATE_SENSITIVITY.into(), &mut g.sensitivity));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, a)| a.len()).sum()
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq_len() != self.config.seq_len {
            return Err(Error::Data(format!(
                "sequence length {} does not match model length {}",
                tokens.seq_len(),
                self.config.seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &HeadMask) -> Result<()> {
        if mask.layers() != self.config.layers || mask.heads() != self.config.heads {
            return Err(Error::MaskShape {
                got: mask.values().shape().to_vec(),
                layers: self.config.layers,
                heads: self.config.heads,
            });
        }
        Ok(())
    }

    /// Records a forward pass and returns the `[batch, classes]` logits node.
    ///
    /// `dropout_rng` enables dropout on the residual branches when the
    /// configured rate is positive.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &TokenBatch,
        gates: GraphGates,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (b, n, h) = (tokens.batch(), cfg.seq_len, cfg.heads);
        if let GraphGates::Values(z) = gates {
            if g.value(z).shape() != [cfg.layers, cfg.heads] {
                return Err(Error::MaskShape {
                    got: g.value(z).shape().to_vec(),
                    layers: cfg.layers,
                    heads: cfg.heads,
                });
            }
        }
        let p = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.param(name, self.param(name)?)) };

        let tok = p(g, "embed.token")?;
        let pos = p(g, "embed.pos")?;
        let te = g.gather_rows(tok, tokens.ids())?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pe = g.gather_rows(pos, &pos_ids)?;
        let mut x = g.add(te, pe)?;

        for l in 0..cfg.layers {
            let gamma = p(g, &lname(l, "ln1.gamma"))?;
            let beta = p(g, &lname(l, "ln1.beta"))?;
            let hn = g.layer_norm(x, gamma, beta)?;
            let proj = |g: &mut Graph, w: &str, bias: &str| -> Result<Var> {
                let w = p(g, &lname(l, w))?;
                let bias = p(g, &lname(l, bias))?;
                let y = g.matmul(hn, w)?;
                let y = g.add_row(y, bias)?;
                Ok(g.split_heads(y, b, n, h)?)
            };
            let q = proj(g, "attn.wq", "attn.bq")?;
            let k = proj(g, "attn.wk", "attn.bk")?;
            let v = proj(g, "attn.wv", "attn.bv")?;
            let mut ctx = g.attention(q, k, v)?;
            if let GraphGates::Values(z) = gates {
                let zl = g.row(z, l)?;
                ctx = g.head_scale(ctx, zl)?;
            }
            let merged = g.merge_heads(ctx)?;
            let wo = p(g, &lname(l, "attn.wo"))?;
            let mut attn = g.matmul(merged, wo)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn = dropout(g, attn, cfg.dropout, rng)?;
            }
            x = g.add(x, attn)?;

            let gamma = p(g, &lname(l, "ln2.gamma"))?;
            let beta = p(g, &lname(l, "ln2.beta"))?;
            let hn = g.layer_norm(x, gamma, beta)?;
            let w1 = p(g, &lname(l, "ffn.w1"))?;
            let b1 = p(g, &lname(l, "ffn.b1"))?;
            let w2 = p(g, &lname(l, "ffn.w2"))?;
            let b2 = p(g, &lname(l, "ffn.b2"))?;
            let f = g.matmul(hn, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.relu(f)?;
            let f = g.matmul(f, w2)?;
            let mut f = g.add_row(f, b2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = dropout(g, f, cfg.dropout, rng)?;
            }
            x = g.add(x, f)?;
        }

        let gamma = p(g, "final_ln.gamma")?;
        let beta = p(g, "final_ln.beta")?;
        let xf = g.layer_norm(x, gamma, beta)?;
        let pooled = g.mean_pool(xf, n)?;
        let hw = p(g, "head.w")?;
        let hb = p(g, "head.b")?;
        let logits = g.matmul(pooled, hw)?;
        Ok(g.add_row(logits, hb)?)
    }

    /// Registers the gate parameters on `g`, returning `(logits, sensitivity)` nodes.
    pub fn gate_vars(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let gp = self.gate_params()?;
        Ok((g.param(GATE_LOGITS, &gp.logits), g.param(GATE_SENSITIVITY, &gp.sensitivity)))
    }

    pub fn forward_dense(&self, tokens: &TokenBatch) -> Result<Array> {
        self.infer(tokens, Execution::Dense, None)
    }

    pub fn forward_gated(&self, tokens: &TokenBatch, mask: &HeadMask) -> Result<Array> {
        self.infer(tokens, Execution::Gated(mask), None)
    }

    pub fn forward_hard_skip(&self, tokens: &TokenBatch, mask: &HeadMask) -> Result<Array> {
        self.infer(tokens, Execution::HardSkip(mask), None)
    }

    /// Tape-free forward pass returning `[batch, classes]` logits.
    pub fn infer(&self, tokens: &TokenBatch, exec: Execution<'_>, counter: Option<&InferenceProbe>) -> Result<Array> {
        self.check_tokens(tokens)?;
        match exec {
            Execution::Dense => {}
            Execution::Gated(m) => self.check_mask(m)?,
            Execution::HardSkip(m) => {
                self.check_mask(m)?;
                m.ensure_binary()?;
            }
        }
        let cfg = &self.config;
        let (b, n, d, h) = (tokens.batch(), cfg.seq_len, cfg.hidden, cfg.heads);
        let rows = b * n;

        let tok = self.param("embed.token")?.data();
        let pos = self.param("embed.pos")?.data();
        let mut x = vec![0.0; rows * d];
        for (r, &id) in tokens.ids().iter().enumerate() {
            let t = r % n;
            let out = &mut x[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = tok[id * d + j] + pos[t * d + j];
            }
        }

        let mut hn = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for l in 0..cfg.layers {
            let p = |part: &str| self.param(&lname(l, part)).map(Array::data);
            kernels::layer_norm_rows(&x, p("ln1.gamma")?, p("ln1.beta")?, &mut hn, &mut mean, &mut rstd);

            let active: Vec<usize> = match exec {
                Execution::HardSkip(m) => (0..h).filter(|&hh| m.get(l, hh) == 1.0).collect(),
                _ => (0..h).collect(),
            };
            let attn = match exec {
                Execution::HardSkip(_) => {
                    if active.is_empty() {
                        None
                    } else {
                        Some(self.attention_sliced(l, &hn, b, &active, counter)?)
                    }
                }
                Execution::Dense => Some(self.attention_full(l, &hn, b, None, counter)?),
                Execution::Gated(m) => Some(self.attention_full(l, &hn, b, Some(m.row(l)), counter)?),
            };
            if let Some(attn) = attn {
                for (xv, av) in x.iter_mut().zip(&attn) {
                    *xv += av;
                }
            }

            kernels::layer_norm_rows(&x, p("ln2.gamma")?, p("ln2.beta")?, &mut hn, &mut mean, &mut rstd);
            let f = cfg.ffn_dim;
            let mut hidden = vec![0.0; rows * f];
            gemm(rows, d, f, &hn, false, p("ffn.w1")?, false, &mut hidden, false);
            kernels::add_row(&mut hidden, p("ffn.b1")?);
            for v in hidden.iter_mut() {
                *v = kernels::relu(*v);
            }
            let mut out = vec![0.0; rows * d];
            gemm(rows, f, d, &hidden, false, p("ffn.w2")?, false, &mut out, false);
            kernels::add_row(&mut out, p("ffn.b2")?);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
        }

        kernels::layer_norm_rows(
            &x,
            self.param("final_ln.gamma")?.data(),
            self.param("final_ln.beta")?.data(),
            &mut hn,
            &mut mean,
            &mut rstd,
        );
        let pooled = mean_pool_data(&hn, b, n, d);
        let c = cfg.num_classes;
        let mut logits = vec![0.0; b * c];
        gemm(b, d, c, &pooled, false, self.param("head.w")?.data(), false, &mut logits, false);
        kernels::add_row(&mut logits, self.param("head.b")?.data());
        let logits = Array::from_vec(&[b, c], logits)?;
        if !logits.all_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "infer" }.into());
        }
        Ok(logits)
    }

    /// All heads computed with full projections; optional per-head scaling.
    fn attention_full(
        &self,
        l: usize,
        hn: &[f64],
        b: usize,
        gate_row: Option<&[f64]>,
        counter: Option<&InferenceProbe>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (n, d, h, dh) = (cfg.seq_len, cfg.hidden, cfg.heads, cfg.head_dim());
        let rows = b * n;
        let p = |part: &str| self.param(&lname(l, part)).map(Array::data);
        let project = |w: &str, bias: &str| -> Result<Vec<f64>> {
            let mut y = vec![0.0; rows * d];
            gemm(rows, d, d, hn, false, p(w)?, false, &mut y, false);
            kernels::add_row(&mut y, p(bias)?);
            Ok(split_heads_data(&y, b, n, h, dh))
        };
        let q = project("attn.wq", "attn.bq")?;
        let k = project("attn.wk", "attn.bk")?;
        let v = project("attn.wv", "attn.bv")?;
        let mut ctx = vec![0.0; rows * d];
        let mut probs = vec![0.0; n * n];
        for grp in 0..b * h {
            let s = grp * n * dh..(grp + 1) * n * dh;
            kernels::attention_head(n, dh, &q[s.clone()], &k[s.clone()], &v[s.clone()], &mut probs, &mut ctx[s.clone()]);
            if let Some(c) = counter {
                c.record(l, grp % h, &probs);
            }
            if let Some(z) = gate_row {
                let g = z[grp % h];
                for c in ctx[s].iter_mut() {
                    *c *= g;
                }
            }
        }
        let merged = merge_heads_data(&ctx, b, n, h, dh);
        let mut out = vec![0.0; rows * d];
        gemm(rows, d, d, &merged, false, p("attn.wo")?, false, &mut out, false);
        if let Some(c) = counter {
            c.add(3 * rows * d * d + 2 * b * h * n * n * dh + rows * d * d);
        }
        Ok(out)
    }

    /// Only the listed heads: Q/K/V projections use the heads' column blocks
    /// and the output projection uses the heads' row blocks.
    fn attention_sliced(
        &self,
        l: usize,
        hn: &[f64],
        b: usize,
        active: &[usize],
        counter: Option<&InferenceProbe>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (n, d, dh) = (cfg.seq_len, cfg.hidden, cfg.head_dim());
        let a = active.len();
        let width = a * dh;
        let rows = b * n;
        let p = |part: &str| self.param(&lname(l, part)).map(Array::data);
        let project = |w: &str, bias: &str| -> Result<Vec<f64>> {
            let (w, bias) = (p(w)?, p(bias)?);
            let mut ws = vec![0.0; d * width];
            let mut bs = vec![0.0; width];
            for (slot, &head) in active.iter().enumerate() {
                for i in 0..d {
                    ws[i * width + slot * dh..i * width + (slot + 1) * dh]
                        .copy_from_slice(&w[i * d + head * dh..i * d + (head + 1) * dh]);
                }
                bs[slot * dh..(slot + 1) * dh].copy_from_slice(&bias[head * dh..(head + 1) * dh]);
            }
            let mut y = vec![0.0; rows * width];
            gemm(rows, d, width, hn, false, &ws, false, &mut y, false);
            kernels::add_row(&mut y, &bs);
            Ok(split_heads_data(&y, b, n, a, dh))
        };
        let q = project("attn.wq", "attn.bq")?;
        let k = project("attn.wk", "attn.bk")?;
        let v = project("attn.wv", "attn.bv")?;
        let mut ctx = vec![0.0; rows * width];
        let mut probs = vec![0.0; n * n];
        for grp in 0..b * a {
            let s = grp * n * dh..(grp + 1) * n * dh;
            kernels::attention_head(n, dh, &q[s.clone()], &k[s.clone()], &v[s.clone()], &mut probs, &mut ctx[s]);
            if let Some(c) = counter {
                c.record(l, active[grp % a], &probs);
            }
        }
        let merged = merge_heads_data(&ctx, b, n, a, dh);
        let wo = p("attn.wo")?;
        let mut wos = vec![0.0; width * d];
        for (slot, &head) in active.iter().enumerate() {
            wos[slot * dh * d..(slot + 1) * dh * d].copy_from_slice(&wo[head * dh * d..(head + 1) * dh * d]);
        }
        let mut out = vec![0.0; rows * d];
        gemm(rows, width, d, &merged, false, &wos, false, &mut out, false);
        if let Some(c) = counter {
            c.add(3 * rows * d * width + 2 * b * a * n * n * dh + rows * width * d);
        }
        Ok(out)
    }
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Array::from_vec(&shape, mask)?);
    Ok(g.mul(x, m)?)
}
