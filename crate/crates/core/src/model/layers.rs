//! Forward and backward kernels for the building blocks: RMS normalization,
//! SiLU, and multi-head attention with optional rotary positions.

use crate::numeric::{matmul_acc, matmul_t_acc, softmax_in_place, t_matmul_acc, Matrix};
use crate::rope::RopeParams;

use super::params::AttentionParams;

const RMS_EPS: f64 = 1e-6;

/// `y = x / rms(x) * gain`, row-wise. Returns the output and each row's
/// inverse rms.
pub(crate) fn rmsnorm_forward(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / n;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in y.row_mut(r).iter_mut().zip(gain) {
            *v *= s * g;
        }
        inv.push(s);
    }
    (y, inv)
}

/// Backward of [`rmsnorm_forward`]. Accumulates the gain gradient and
/// returns the input gradient.
pub(crate) fn rmsnorm_backward(
    x: &Matrix,
    gain: &[f64],
    inv: &[f64],
    dy: &Matrix,
    dgain: &mut [f64],
) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let s = inv[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut proj = 0.0;
        for c in 0..xr.len() {
            let xhat = xr[c] * s;
            dgain[c] += dyr[c] * xhat;
            proj += dyr[c] * gain[c] * xhat;
        }
        proj /= n;
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            let xhat = xr[c] * s;
            *out = s * (dyr[c] * gain[c] - xhat * proj);
        }
    }
    dx
}

pub(crate) fn silu(a: f64) -> f64 {
    a / (1.0 + (-a).exp())
}

pub(crate) fn silu_grad(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a).exp());
    s * (1.0 + a * (1.0 - s))
}

/// Static description of one attention call.
#[derive(Clone, Copy)]
pub(crate) struct AttnSpec<'a> {
    pub heads: usize,
    pub head_dim: usize,
    /// Rotary table and per-token position ids; `None` disables rotation.
    pub rope: Option<(&'a RopeParams, &'a [usize])>,
    pub causal: bool,
    pub capture_logits: bool,
}

pub(crate) struct AttnCache {
    pub input: Matrix,
    /// Queries and keys after rotation.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmaxed weights, one n×n matrix per head. Masked entries are 0.
    pub probs: Vec<Matrix>,
    /// Scaled pre-softmax scores when requested. Masked entries are 0.
    pub logits: Option<Vec<Matrix>>,
    pub concat: Matrix,
}

fn rotate_rows(m: &mut Matrix, spec: &AttnSpec<'_>, sign: f64) {
    if let Some((rope, pos)) = spec.rope {
        for (t, &p) in pos.iter().enumerate() {
            for chunk in m.row_mut(t).chunks_exact_mut(spec.head_dim) {
                rope.rotate_in_place(sign * p as f64, chunk);
            }
        }
    }
}

pub(crate) fn attention_forward(
    p: &AttentionParams,
    input: Matrix,
    spec: &AttnSpec<'_>,
) -> (Matrix, AttnCache) {
    let n = input.rows();
    let e = input.cols();
    let d = spec.head_dim;
    let scale = 1.0 / (d as f64).sqrt();

    let mut q = Matrix::zeros(n, e);
    let mut k = Matrix::zeros(n, e);
    let mut v = Matrix::zeros(n, e);
    matmul_acc(&input, &p.wq, &mut q);
    matmul_acc(&input, &p.wk, &mut k);
    matmul_acc(&input, &p.wv, &mut v);
    rotate_rows(&mut q, spec, 1.0);
    rotate_rows(&mut k, spec, 1.0);

    let mut probs = Vec::with_capacity(spec.heads);
    let mut logits = spec.capture_logits.then(Vec::new);
    let mut concat = Matrix::zeros(n, e);
    let mut row = vec![0.0; n];
    for h in 0..spec.heads {
        let cols = h * d..(h + 1) * d;
        let mut a = Matrix::zeros(n, n);
        let mut raw = spec.capture_logits.then(|| Matrix::zeros(n, n));
        for t in 0..n {
            let qt = &q.row(t)[cols.clone()];
            let visible = if spec.causal { t + 1 } else { n };
            for (s, slot) in row.iter_mut().enumerate() {
                *slot = if s < visible {
                    let ks = &k.row(s)[cols.clone()];
                    qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            if let Some(raw) = raw.as_mut() {
                for s in 0..visible {
                    raw.set(t, s, row[s]);
                }
            }
            softmax_in_place(&mut row[..visible]);
            let out = &mut concat.row_mut(t)[cols.clone()];
            for s in 0..visible {
                a.set(t, s, row[s]);
                let w = row[s];
                for (o, vs) in out.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += w * vs;
                }
            }
        }
        probs.push(a);
        if let (Some(l), Some(r)) = (logits.as_mut(), raw) {
            l.push(r);
        }
    }

    let mut out = Matrix::zeros(n, e);
    matmul_acc(&concat, &p.wo, &mut out);
    (
        out,
        AttnCache {
            input,
            q,
            k,
            v,
            probs,
            logits,
            concat,
        },
    )
}

/// Backward of [`attention_forward`]. Accumulates weight gradients into
/// `grads` and returns the gradient with respect to the attention input.
pub(crate) fn attention_backward(
    p: &AttentionParams,
    cache: &AttnCache,
    d_out: &Matrix,
    spec: &AttnSpec<'_>,
    grads: &mut AttentionParams,
) -> Matrix {
    let n = cache.input.rows();
    let e = cache.input.cols();
    let d = spec.head_dim;
    let scale = 1.0 / (d as f64).sqrt();

    t_matmul_acc(&cache.concat, d_out, &mut grads.wo);
    let mut d_concat = Matrix::zeros(n, e);
    matmul_t_acc(d_out, &p.wo, &mut d_concat);

    let mut dq = Matrix::zeros(n, e);
    let mut dk = Matrix::zeros(n, e);
    let mut dv = Matrix::zeros(n, e);
    let mut d_a = vec![0.0; n];
    for (h, a) in cache.probs.iter().enumerate() {
        let cols = h * d..(h + 1) * d;
        for t in 0..n {
            let visible = if spec.causal { t + 1 } else { n };
            let dct = &d_concat.row(t)[cols.clone()];
            let mut weighted = 0.0;
            for s in 0..visible {
                let vs = &cache.v.row(s)[cols.clone()];
                d_a[s] = dct.iter().zip(vs).map(|(x, y)| x * y).sum();
                weighted += a.get(t, s) * d_a[s];
                let w = a.get(t, s);
                for (g, x) in dv.row_mut(s)[cols.clone()].iter_mut().zip(dct) {
                    *g += w * x;
                }
            }
            for s in 0..visible {
                let ds = a.get(t, s) * (d_a[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in cols.clone() {
                    dq.as_mut_slice()[t * e + c] += ds * cache.k.get(s, c);
                    dk.as_mut_slice()[s * e + c] += ds * cache.q.get(t, c);
                }
            }
        }
    }
    // Rotation is orthogonal: its adjoint is the rotation by the negated angle.
    rotate_rows(&mut dq, spec, -1.0);
    rotate_rows(&mut dk, spec, -1.0);

    t_matmul_acc(&cache.input, &dq, &mut grads.wq);
    t_matmul_acc(&cache.input, &dk, &mut grads.wk);
    t_matmul_acc(&cache.input, &dv, &mut grads.wv);

    let mut d_input = Matrix::zeros(n, e);
    matmul_t_acc(&dq, &p.wq, &mut d_input);
    matmul_t_acc(&dk, &p.wk, &mut d_input);
    matmul_t_acc(&dv, &p.wv, &mut d_input);
    d_input
}
