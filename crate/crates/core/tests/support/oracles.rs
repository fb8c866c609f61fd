//! Independent reference implementations shared by the oracle suites and the
//! acceptance target. Each target uses a different subset.
#![allow(dead_code)]

use std::collections::BTreeMap;

use budgeted_attention::data::Example;
use budgeted_attention::gating::{soft_gates_graph, straight_through_gates, GateParams, BUDGET_EPS};
use budgeted_attention::model::{EncoderModel, GraphGates, ModelConfig, TokenBatch, GATE_LOGITS, GATE_SENSITIVITY};
use budgeted_attention::tensor::{Array, Graph, Var};
use budgeted_attention::training::{budgeted_loss_graph, cross_entropy_graph};
use budgeted_attention::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best-mass subset of size `k` by enumeration, optionally requiring one head
/// in every layer. Continuous random scores make the optimum unique.
pub fn enumerate_best(scores: &[f64], layers: usize, heads: usize, k: usize, floor: bool) -> Vec<f64> {
    let n = layers * heads;
    let mut best: Option<(f64, u32)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        if floor && (0..layers).any(|l| (bits >> (l * heads)) & ((1 << heads) - 1) == 0) {
            continue;
        }
        let mass: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| scores[i]).sum();
        if best.map_or(true, |(m, _)| mass > m) {
            best = Some((mass, bits));
        }
    }
    let bits = best.expect("feasible subset").1;
    (0..n).map(|i| f64::from(bits >> i & 1 == 1)).collect()
}

/// Spearman correlation of two permutations by the rank-difference formula.
pub fn rank_difference_spearman(p: &[usize], q: &[usize]) -> f64 {
    let n = p.len() as f64;
    let d2: f64 = p.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean cross-entropy of the dense forward pass of `model`, computed row by row.
pub fn dense_loss(model: &EncoderModel, val: &[Example]) -> f64 {
    let mut total = 0.0;
    for e in val {
        let t = TokenBatch::new(e.tokens.clone(), e.tokens.len()).unwrap();
        let logits = model.forward_dense(&t).unwrap();
        let row = logits.data();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[e.label];
    }
    total / val.len() as f64
}

/// Copy of `model` whose head `(l, h)` contributes nothing to the output.
pub fn without_head(model: &EncoderModel, l: usize, h: usize) -> EncoderModel {
    let mut m = model.clone();
    let dh = m.config.head_dim();
    let d = m.config.hidden;
    let wo = m.params.get_mut(&format!("layer{l}.attn.wo")).unwrap();
    for r in h * dh..(h + 1) * dh {
        for c in 0..d {
            wo.set2(r, c, 0.0);
        }
    }
    m
}

/// Smallest model that still has two layers, two heads and three classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        seq_len: 5,
        hidden: 6,
        layers: 2,
        heads: 2,
        ffn_dim: 5,
        num_classes: 3,
        dropout: 0.0,
    }
}

pub fn gated_model(seed: u64) -> EncoderModel {
    let mut model = EncoderModel::new(tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut gates = GateParams::init(2, 2, 1.0, &mut rng).unwrap();
    // Spread the gates so that no sigmoid saturates or ties.
    for (i, v) in gates.logits.data_mut().iter_mut().enumerate() {
        *v = 0.4 * i as f64 - 0.5;
    }
    for v in gates.sensitivity.data_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    model.gates = Some(gates);
    model
}

pub fn tiny_batch() -> (TokenBatch, Vec<usize>) {
    let ids = vec![1, 4, 2, 6, 0, 3, 3, 5, 1, 2, 6, 0, 0, 4, 5];
    (TokenBatch::new(ids, 5).unwrap(), vec![0, 2, 1])
}

/// Model with `params` substituted (gate arrays included).
pub fn with_params(base: &EncoderModel, params: &BTreeMap<String, Array>) -> EncoderModel {
    let mut m = base.clone();
    for (name, value) in params {
        match name.as_str() {
            GATE_LOGITS => m.gates.as_mut().unwrap().logits = value.clone(),
            GATE_SENSITIVITY => m.gates.as_mut().unwrap().sensitivity = value.clone(),
            _ => *m.params.get_mut(name).unwrap() = value.clone(),
        }
    }
    m
}

pub fn all_params(model: &EncoderModel) -> BTreeMap<String, Array> {
    model.named_params().into_iter().map(|(k, v)| (k, v.clone())).collect()
}

/// Budgeted loss at B = 0.35 with the violation term active.
pub fn budgeted_objective(base: &EncoderModel) -> impl Fn(&mut Graph, &BTreeMap<String, Array>) -> Result<Var, Error> + '_ {
    move |g, params| {
        let m = with_params(base, params);
        let (tokens, labels) = tiny_batch();
        let gp = m.gate_params()?;
        let (a, s) = m.gate_vars(g)?;
        let z = soft_gates_graph(g, a, s, gp.tau, gp.eps, 0.35)?;
        let logits = m.forward_graph(g, &tokens, GraphGates::Values(z), None)?;
        let ce = cross_entropy_graph(g, logits, &labels)?;
        let cost = g.mean(z)?;
        budgeted_loss_graph(g, ce, cost, 0.35, 0.05, 4.0)
    }
}

/// Gate gradients through the straight-through estimator, and through the
/// soft path driven by the upstream gradient taken at the hard mask.
/// Returns `(name, straight_through, soft)` per gate array.
pub fn straight_through_and_soft_grads(model: &EncoderModel, budget: f64) -> Vec<(&'static str, Vec<f64>, Vec<f64>)> {
    let gp = model.gate_params().unwrap().clone();
    let (tokens, labels) = tiny_batch();

    let mut g = Graph::new();
    let (a, s) = model.gate_vars(&mut g).unwrap();
    let z = straight_through_gates(&mut g, a, s, gp.tau, gp.eps, budget).unwrap();
    let hard = g.value(z).clone();
    let logits = model.forward_graph(&mut g, &tokens, GraphGates::Values(z), None).unwrap();
    let loss = cross_entropy_graph(&mut g, logits, &labels).unwrap();
    let st = g.backward(loss).unwrap();

    let mut g = Graph::new();
    let zc = g.constant(hard);
    let logits = model.forward_graph(&mut g, &tokens, GraphGates::Values(zc), None).unwrap();
    let loss = cross_entropy_graph(&mut g, logits, &labels).unwrap();
    let upstream = g.backward(loss).unwrap().wrt(zc).unwrap().clone();

    let mut g = Graph::new();
    let (a, s) = model.gate_vars(&mut g).unwrap();
    let soft = soft_gates_graph(&mut g, a, s, gp.tau, BUDGET_EPS, budget).unwrap();
    let up = g.constant(upstream);
    let prod = g.mul(soft, up).unwrap();
    let total = g.sum(prod).unwrap();
    let soft_grads = g.backward(total).unwrap();

    [GATE_LOGITS, GATE_SENSITIVITY]
        .into_iter()
        .map(|name| {
            (
                name,
                st.param(name).unwrap().data().to_vec(),
                soft_grads.param(name).unwrap().data().to_vec(),
            )
        })
        .collect()
}
