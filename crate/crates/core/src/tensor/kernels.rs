//! Plain slice kernels shared by the autodiff tape and the tape-free
//! inference path, so both produce bit-identical values.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is logically `[m, k]` after the optional transpose, `b` is `[k, n]`,
/// `c` is `[m, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds a row vector `bias[d]` to every row of `x[rows, d]`.
pub fn add_row(x: &mut [f64], bias: &[f64]) {
    let d = bias.len();
    for row in x.chunks_exact_mut(d) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `exp(x)` for `x <= 0`, within 2 ulp of `f64::exp`; branch-free so that
/// row loops vectorize. Returns 0 below -708.
#[inline]
pub fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    let xc = x.max(-708.0);
    let k = (xc * INV_LN2).round();
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln(2) / 2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    let y = p * scale;
    if x > -708.0 {
        y
    } else if x.is_nan() {
        x
    } else {
        0.0
    }
}

pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = exp_nonpositive(*v - max);
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn log_softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| exp_nonpositive(v - max)).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Layer norm over rows of width `d`; writes the normalized output and the
/// per-row mean and reciprocal standard deviation.
pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    let d = gamma.len();
    for (r, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Scaled-dot-product attention for one head of one sequence.
///
/// `q`, `k`, `v` are `[n, dh]`; `probs` receives `[n, n]` and `out` `[n, dh]`.
pub fn attention_head(
    n: usize,
    dh: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &mut [f64],
    out: &mut [f64],
) {
    let scale = 1.0 / (dh as f64).sqrt();
    gemm(n, dh, n, q, false, k, true, probs, false);
    for p in probs.iter_mut() {
        *p *= scale;
    }
    softmax_rows(probs, n);
    gemm(n, n, dh, probs, false, v, false, out, false);
}

/// `[batch * seq, heads * dh]` rows to `[batch, heads, seq, dh]` blocks.
pub fn split_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let src = &x[(b * seq + t) * d..(b * seq + t + 1) * d];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
    }
    out
}

/// Inverse of [`split_heads_data`].
pub fn merge_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let dst = &mut out[(b * seq + t) * d..(b * seq + t + 1) * d];
            for h in 0..heads {
                let src = ((b * heads + h) * seq + t) * dh;
                dst[h * dh..(h + 1) * dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

pub fn mean_pool_data(x: &[f64], batch: usize, seq: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * d];
    let inv = 1.0 / seq as f64;
    for b in 0..batch {
        let acc = &mut out[b * d..(b + 1) * d];
        for t in 0..seq {
            let row = &x[(b * seq + t) * d..(b * seq + t + 1) * d];
            for j in 0..d {
                acc[j] += row[j];
            }
        }
        for v in acc.iter_mut() {
            *v *= inv;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
