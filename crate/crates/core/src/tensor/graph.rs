use std::collections::{BTreeMap, HashMap};

use crate::tensor::kernels::{self, gemm, mean_pool_data, merge_heads_data, split_heads_data};
use crate::tensor::{Array, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    Sigmoid(Var),
    Softplus(Var),
    Logit(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var },
    HeadScale { x: Var, z: Var },
    Row { x: Var, row: usize },
    MeanPool { x: Var, seq: usize },
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Attention { .. } => "attention",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Logit(_) => "logit",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::HeadScale { .. } => "head_scale",
            Op::Row { .. } => "row",
            Op::MeanPool { .. } => "mean_pool",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Array>,
    leaves: HashMap<usize, Array>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    /// Gradient with respect to a leaf or parameter node.
    pub fn wrt(&self, var: Var) -> Option<&Array> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> BTreeMap<String, Array> {
        self.params
    }
}

/// A recording of one forward computation.
///
/// Every op checks shapes and finiteness eagerly. A graph may be
/// back-propagated exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable array. Registering the same name twice
    /// returns the original handle.
    pub fn param(&mut self, name: &str, value: &Array) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Result<Var, TensorError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        self.same_shape(a, b, op.name())?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::from_vec(va.shape(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[.., d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let vb = self.value(bias);
        let vx = self.value(x);
        if vb.ndim() != 1 || vb.len() != vx.last_dim() {
            return Err(shape_err(format!("add_row: {:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut out = vx.clone();
        kernels::add_row(out.data_mut(), vb.data());
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// `a[.., k] @ b[k, n]`; leading dimensions of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ndim() != 2 || va.ndim() < 1 || va.last_dim() != vb.shape()[0] {
            return Err(shape_err(format!("matmul: {:?} @ {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.rows(), vb.shape()[0], vb.shape()[1]);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let out = Array::from_vec(&shape, out)?;
        self.push(out, Op::MatMul(a, b))
    }

    /// Batched `a[.., m, k] @ b[.., k, n]` (or `b[.., n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err(format!("batch_matmul: {sa:?} @ {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(shape_err(format!("batch_matmul: {sa:?} @ {sb:?} (trans_b={trans_b})")));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &va.data()[g * m * k..(g + 1) * m * k],
                false,
                &vb.data()[g * k * n..(g + 1) * k * n],
                trans_b,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Array::from_vec(&shape, out)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b })
    }

    /// Scaled-dot-product attention over `[.., n, dh]` query, key and value
    /// blocks; keeps only the attention probabilities for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let s = vq.shape();
        if s.len() < 2 || vk.shape() != s || vv.shape() != s {
            return Err(shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                s,
                vk.shape(),
                vv.shape()
            )));
        }
        let r = s.len();
        let (n, dh) = (s[r - 2], s[r - 1]);
        let groups = vq.len() / (n * dh).max(1);
        let mut out = vec![0.0; vq.len()];
        let mut probs = vec![0.0; groups * n * n];
        for grp in 0..groups {
            let blk = grp * n * dh..(grp + 1) * n * dh;
            kernels::attention_head(
                n,
                dh,
                &vq.data()[blk.clone()],
                &vk.data()[blk.clone()],
                &vv.data()[blk.clone()],
                &mut probs[grp * n * n..(grp + 1) * n * n],
                &mut out[blk],
            );
        }
        let out = Array::from_vec(s, out)?;
        self.push(out, Op::Attention { q, k, v, probs })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(kernels::softplus);
        self.push(out, Op::Softplus(x))
    }

    /// `ln(p) - ln(1 - p)`; inputs outside (0, 1) surface as a non-finite error.
    pub fn logit(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(kernels::logit);
        self.push(out, Op::Logit(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(kernels::relu);
        self.push(out, Op::Relu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        kernels::softmax_rows(out.data_mut(), d);
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        kernels::log_softmax_rows(out.data_mut(), d);
        self.push(out, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.rows();
        let mut out = vec![0.0; vx.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_rows(vx.data(), vg.data(), vb.data(), &mut out, &mut mean, &mut rstd);
        let out = Array::from_vec(vx.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(shape_err("mean of an empty array".into()));
        }
        let out = Array::scalar(vx.mean());
        self.push(out, Op::Mean(x))
    }

    /// Embedding lookup: rows of `table[v, d]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(shape_err(format!("gather_rows: table {:?}", vt.shape())));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err(format!("gather_rows: id {id} out of range {v}")));
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Array::from_vec(&[ids.len(), d], out)?;
        self.push(out, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// `out[i] = x[i, idx[i]]` for a `[n, c]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.shape()[0] != idx.len() {
            return Err(shape_err(format!("pick: {:?} with {} indices", vx.shape(), idx.len())));
        }
        let c = vx.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(shape_err(format!("pick: index {j} out of range {c}")));
            }
            out.push(vx.data()[i * c + j]);
        }
        let out = Array::from_vec(&[idx.len()], out)?;
        self.push(out, Op::Pick { x, idx: idx.to_vec() })
    }

    /// `[batch * seq, heads * dh]` to `[batch, heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.shape()[0] != batch * seq || heads == 0 || vx.shape()[1] % heads != 0 {
            return Err(shape_err(format!(
                "split_heads: {:?} into batch {batch}, seq {seq}, heads {heads}",
                vx.shape()
            )));
        }
        let dh = vx.shape()[1] / heads;
        let out = split_heads_data(vx.data(), batch, seq, heads, dh);
        let out = Array::from_vec(&[batch, heads, seq, dh], out)?;
        self.push(out, Op::SplitHeads { x, batch, seq, heads })
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.ndim() != 4 {
            return Err(shape_err(format!("merge_heads: {:?}", vx.shape())));
        }
        let s = vx.shape();
        let (batch, heads, seq, dh) = (s[0], s[1], s[2], s[3]);
        let out = merge_heads_data(vx.data(), batch, seq, heads, dh);
        let out = Array::from_vec(&[batch * seq, heads * dh], out)?;
        self.push(out, Op::MergeHeads { x })
    }

    /// Multiplies every `[seq, dh]` block of head `h` in `x[batch, heads, seq, dh]` by `z[h]`.
    pub fn head_scale(&mut self, x: Var, z: Var) -> Result<Var, TensorError> {
        let (vx, vz) = (self.value(x), self.value(z));
        if vx.ndim() != 4 || vz.shape() != [vx.shape()[1]] {
            return Err(shape_err(format!("head_scale: {:?} by {:?}", vx.shape(), vz.shape())));
        }
        let heads = vx.shape()[1];
        let block = vx.shape()[2] * vx.shape()[3];
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(block).enumerate() {
            let g = vz.data()[i % heads];
            for v in chunk {
                *v *= g;
            }
        }
        self.push(out, Op::HeadScale { x, z })
    }

    pub fn row(&mut self, x: Var, row: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.ndim() != 2 || row >= vx.shape()[0] {
            return Err(shape_err(format!("row {row} of {:?}", vx.shape())));
        }
        let c = vx.shape()[1];
        let out = Array::from_vec(&[c], vx.data()[row * c..(row + 1) * c].to_vec())?;
        self.push(out, Op::Row { x, row })
    }

    /// Mean over consecutive groups of `seq` rows: `[batch * seq, d]` to `[batch, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.ndim() != 2 || seq == 0 || vx.shape()[0] % seq != 0 {
            return Err(shape_err(format!("mean_pool: {:?} by seq {seq}", vx.shape())));
        }
        let d = vx.shape()[1];
        let batch = vx.shape()[0] / seq;
        let out = mean_pool_data(vx.data(), batch, seq, d);
        let out = Array::from_vec(&[batch, d], out)?;
        self.push(out, Op::MeanPool { x, seq })
    }

    /// Forward value is `hard`; the backward pass treats the node as identity on `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array) -> Result<Var, TensorError> {
        let vs = self.value(soft);
        if vs.shape() != hard.shape() {
            return Err(shape_err(format!(
                "straight_through: soft {:?}, hard {:?}",
                vs.shape(),
                hard.shape()
            )));
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Back-propagates from a scalar `loss`. Every registered parameter gets a
    /// gradient (zero when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::NoForward);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::from_vec(self.value(loss).shape(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(name) => {
                    out.params.insert(name.clone(), g.clone());
                    out.leaves.insert(i, g);
                }
                op => self.backprop_op(i, op, &g, &mut grads)?,
            }
        }
        for (name, &v) in &self.params {
            if !out.params.contains_key(name) {
                out.params
                    .insert(name.clone(), Array::zeros(self.value(v).shape()));
            }
        }
        Ok(out)
    }

    fn backprop_op(&self, i: usize, op: &Op, g: &Array, grads: &mut [Option<Array>]) -> Result<(), TensorError> {
        let y = &self.nodes[i].value;
        let gd = g.data();
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                accumulate(grads, a, elementwise(g, vb, |d, y| d * y));
                accumulate(grads, b, elementwise(g, va, |d, x| d * x));
            }
            Op::AddRow(x, bias) => {
                let d = self.value(bias).len();
                let mut gb = vec![0.0; d];
                for row in gd.chunks_exact(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, x, g.clone());
                accumulate(grads, bias, Array::from_vec(&[d], gb)?);
            }
            Op::Scale(x, c) => accumulate(grads, x, g.map(|v| v * c)),
            Op::AddScalar(x) => accumulate(grads, x, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.rows(), vb.shape()[0], vb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gd, false, vb.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, gd, false, &mut gb, false);
                accumulate(grads, a, Array::from_vec(va.shape(), ga)?);
                accumulate(grads, b, Array::from_vec(vb.shape(), gb)?);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let sa = va.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = y.shape()[r - 1];
                let groups = va.len() / (m * k);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for grp in 0..groups {
                    let a_g = &va.data()[grp * m * k..(grp + 1) * m * k];
                    let b_g = &vb.data()[grp * k * n..(grp + 1) * k * n];
                    let d_g = &gd[grp * m * n..(grp + 1) * m * n];
                    let ga_g = &mut ga[grp * m * k..(grp + 1) * m * k];
                    let gb_g = &mut gb[grp * k * n..(grp + 1) * k * n];
                    if trans_b {
                        // b stored [n, k]
                        gemm(m, n, k, d_g, false, b_g, false, ga_g, false);
                        gemm(n, m, k, d_g, true, a_g, false, gb_g, false);
                    } else {
                        gemm(m, n, k, d_g, false, b_g, true, ga_g, false);
                        gemm(k, m, n, a_g, true, d_g, false, gb_g, false);
                    }
                }
                accumulate(grads, a, Array::from_vec(va.shape(), ga)?);
                accumulate(grads, b, Array::from_vec(vb.shape(), gb)?);
            }
            Op::Attention { q, k, v, ref probs } => {
                let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
                let s = vq.shape();
                let (n, dh) = (s[s.len() - 2], s[s.len() - 1]);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; vq.len()];
                let mut gk = vec![0.0; vk.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; n * n];
                for grp in 0..probs.len() / (n * n) {
                    let blk = grp * n * dh..(grp + 1) * n * dh;
                    let p = &probs[grp * n * n..(grp + 1) * n * n];
                    let dout = &gd[blk.clone()];
                    gemm(n, n, dh, p, true, dout, false, &mut gv[blk.clone()], false);
                    gemm(n, dh, n, dout, false, &vv.data()[blk.clone()], true, &mut dp, false);
                    for (pr, dr) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pj) in dr.iter_mut().zip(pr) {
                            *d = pj * (*d - dot) * scale;
                        }
                    }
                    gemm(n, n, dh, &dp, false, &vk.data()[blk.clone()], false, &mut gq[blk.clone()], false);
                    gemm(n, n, dh, &dp, true, &vq.data()[blk.clone()], false, &mut gk[blk], false);
                }
                accumulate(grads, q, Array::from_vec(s, gq)?);
                accumulate(grads, k, Array::from_vec(s, gk)?);
                accumulate(grads, v, Array::from_vec(s, gv)?);
            }
            Op::Sigmoid(x) => accumulate(grads, x, elementwise(g, y, |d, s| d * s * (1.0 - s))),
            Op::Softplus(x) => {
                accumulate(grads, x, elementwise(g, self.value(x), |d, v| d * kernels::sigmoid(v)))
            }
            Op::Logit(x) => accumulate(
                grads,
                x,
                elementwise(g, self.value(x), |d, p| d * (1.0 / p + 1.0 / (1.0 - p))),
            ),
            Op::Relu(x) => accumulate(
                grads,
                x,
                elementwise(g, self.value(x), |d, v| if v > 0.0 { d } else { 0.0 }),
            ),
            Op::Softmax(x) => {
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, dr), out) in y.data().chunks_exact(d).zip(gd.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (dr[j] - dot);
                    }
                }
                accumulate(grads, x, Array::from_vec(y.shape(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, dr), out) in y.data().chunks_exact(d).zip(gd.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let total: f64 = dr.iter().sum();
                    for j in 0..d {
                        out[j] = dr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(grads, x, Array::from_vec(y.shape(), gx)?);
            }
            Op::LayerNorm { x, gamma, beta, ref mean, ref rstd } => {
                let vx = self.value(x);
                let vg = self.value(gamma);
                let d = vg.len();
                let mut gx = vec![0.0; vx.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xr, dr)) in vx.data().chunks_exact(d).zip(gd.chunks_exact(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = dr[j] * vg.data()[j];
                        ggamma[j] += dr[j] * xhat[j];
                        gbeta[j] += dr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                accumulate(grads, x, Array::from_vec(vx.shape(), gx)?);
                accumulate(grads, gamma, Array::from_vec(&[d], ggamma)?);
                accumulate(grads, beta, Array::from_vec(&[d], gbeta)?);
            }
            Op::Sum(x) => {
                let s = self.value(x).shape().to_vec();
                accumulate(grads, x, Array::full(&s, gd[0]));
            }
            Op::Mean(x) => {
                let vx = self.value(x);
                accumulate(grads, x, Array::full(vx.shape(), gd[0] / vx.len() as f64));
            }
            Op::GatherRows { table, ref ids } => {
                let vt = self.value(table);
                let d = vt.shape()[1];
                let mut gt = Array::zeros(vt.shape());
                let gtd = gt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gtd[id * d + j] += gd[row * d + j];
                    }
                }
                accumulate(grads, table, gt);
            }
            Op::Pick { x, ref idx } => {
                let vx = self.value(x);
                let c = vx.shape()[1];
                let mut gx = Array::zeros(vx.shape());
                for (row, &j) in idx.iter().enumerate() {
                    gx.data_mut()[row * c + j] += gd[row];
                }
                accumulate(grads, x, gx);
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let dh = y.shape()[3];
                let gx = merge_heads_data(gd, batch, seq, heads, dh);
                accumulate(grads, x, Array::from_vec(self.value(x).shape(), gx)?);
            }
            Op::MergeHeads { x } => {
                let s = self.value(x).shape();
                let gx = split_heads_data(gd, s[0], s[2], s[1], s[3]);
                accumulate(grads, x, Array::from_vec(s, gx)?);
            }
            Op::HeadScale { x, z } => {
                let (vx, vz) = (self.value(x), self.value(z));
                let heads = vz.len();
                let block = vx.shape()[2] * vx.shape()[3];
                let mut gx = vec![0.0; vx.len()];
                let mut gz = vec![0.0; heads];
                for (blk, ((xb, db), ob)) in vx
                    .data()
                    .chunks_exact(block)
                    .zip(gd.chunks_exact(block))
                    .zip(gx.chunks_exact_mut(block))
                    .enumerate()
                {
                    let h = blk % heads;
                    let zh = vz.data()[h];
                    let mut dot = 0.0;
                    for j in 0..block {
                        ob[j] = db[j] * zh;
                        dot += db[j] * xb[j];
                    }
                    gz[h] += dot;
                }
                accumulate(grads, x, Array::from_vec(vx.shape(), gx)?);
                accumulate(grads, z, Array::from_vec(&[heads], gz)?);
            }
            Op::Row { x, row } => {
                let vx = self.value(x);
                let c = vx.shape()[1];
                let mut gx = Array::zeros(vx.shape());
                gx.data_mut()[row * c..(row + 1) * c].copy_from_slice(gd);
                accumulate(grads, x, gx);
            }
            Op::MeanPool { x, seq } => {
                let vx = self.value(x);
                let d = vx.shape()[1];
                let inv = 1.0 / seq as f64;
                let mut gx = vec![0.0; vx.len()];
                for (r, out) in gx.chunks_exact_mut(d).enumerate() {
                    let b = r / seq;
                    for j in 0..d {
                        out[j] = gd[b * d + j] * inv;
                    }
                }
                accumulate(grads, x, Array::from_vec(vx.shape(), gx)?);
            }
            Op::StraightThrough(soft) => accumulate(grads, soft, g.clone()),
        }
        Ok(())
    }
}

fn elementwise(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.shape(), data).expect("elementwise shapes agree")
}

fn accumulate(grads: &mut [Option<Array>], v: Var, delta: Array) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
