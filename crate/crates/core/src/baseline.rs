//! Reference implementations of the unmodified building blocks, written as
//! plain loops. They share parameter layouts with the rhythm-aware modules
//! so reductions can be checked entry by entry.

use ndarray::Array2;

use crate::pdcam::{HeadParams, PdcamParams};
use crate::ps_mamba::{DirectionParams, PsMambaParams, NORM_EPS};
use crate::Matrix;

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    assert_eq!(k, b.nrows());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn rms_norm(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// One direction of the vanilla selective SSM branch on an `L×D` input.
pub fn mamba_direction(u: &Matrix, p: &DirectionParams) -> Matrix {
    let (len, di, n) = (u.nrows(), p.w_in.ncols(), p.a_log.ncols());
    let xin = matmul(u, &p.w_in).mapv(silu);
    let gate = matmul(u, &p.w_gate).mapv(silu);
    let pre = matmul(&xin, &p.w_delta);
    let b = matmul(&xin, &p.w_b);
    let c = matmul(&xin, &p.w_c);
    let mut h = vec![0.0; di * n];
    let mut y = Array2::zeros((len, di));
    for t in 0..len {
        for d in 0..di {
            let delta = softplus(pre[[t, d]] + p.b_delta[[0, d]]);
            let mut acc = 0.0;
            for s in 0..n {
                let a = -p.a_log[[d, s]].exp();
                let idx = d * n + s;
                h[idx] = (delta * a).exp() * h[idx] + delta * b[[t, s]] * xin[[t, d]];
                acc += c[[t, s]] * h[idx];
            }
            y[[t, d]] = (acc + p.d_skip[[0, d]] * xin[[t, d]]) * gate[[t, d]];
        }
    }
    matmul(&y, &p.w_out)
}

/// Vanilla bidirectional block: normalisation, forward and backward scans
/// and a residual connection; no keyframe weighting or phase input.
pub fn vanilla_mamba_block(x: &Matrix, p: &PsMambaParams) -> Matrix {
    let mut u = rms_norm(x, NORM_EPS);
    for mut row in u.rows_mut() {
        for (v, g) in row.iter_mut().zip(p.norm_gain.iter()) {
            *v *= g;
        }
    }
    let fwd = mamba_direction(&u, &p.fwd);
    let mut rev = u.clone();
    rev.invert_axis(ndarray::Axis(0));
    let mut bwd = mamba_direction(&rev, &p.bwd);
    bwd.invert_axis(ndarray::Axis(0));
    x + &fwd + &bwd
}

/// One head of plain linear differential cross-attention with a constant
/// subtraction weight.
pub fn linear_diff_head(x: &Matrix, text: &Matrix, head: &HeadParams, lambda: f64) -> Matrix {
    let dh = head.w_q.ncols() / 2;
    let q = matmul(x, &head.w_q);
    let k = matmul(text, &head.w_k);
    let v = matmul(text, &head.w_v);
    let (lm, lt, dv) = (x.nrows(), text.nrows(), v.ncols());
    let mut out = Array2::zeros((lm, dv));
    for (branch, sign) in [(0usize, 1.0), (1, -lambda)] {
        let off = branch * dh;
        // Keys normalised over tokens, per feature.
        let mut kmap = Array2::zeros((lt, dh));
        for j in 0..dh {
            let col: Vec<f64> = (0..lt).map(|r| k[[r, off + j]]).collect();
            for (r, w) in softmax(&col).into_iter().enumerate() {
                kmap[[r, j]] = w;
            }
        }
        let mut summary = Array2::<f64>::zeros((dh, dv));
        for j in 0..dh {
            for c in 0..dv {
                summary[[j, c]] = (0..lt).map(|r| kmap[[r, j]] * v[[r, c]]).sum();
            }
        }
        for i in 0..lm {
            let row: Vec<f64> = (0..dh).map(|j| q[[i, off + j]]).collect();
            let qmap = softmax(&row);
            for c in 0..dv {
                let val: f64 = (0..dh).map(|j| qmap[j] * summary[[j, c]]).sum();
                out[[i, c]] += sign * val;
            }
        }
    }
    out
}

/// Multi-head plain linear differential cross-attention using the shared
/// weight `λ_base` computed from `p`.
pub fn linear_diff_cross_attention(x: &Matrix, text: &Matrix, p: &PdcamParams) -> Matrix {
    let frob = |a: &Matrix, b: &Matrix| a.iter().zip(b.iter()).map(|(u, v)| u * v).sum::<f64>();
    let init = p.lambda_init[[0, 0]];
    let lambda = frob(&p.lambda_q1, &p.lambda_k1).exp() - frob(&p.lambda_q2, &p.lambda_k2).exp() + init;
    let heads: Vec<Matrix> = p.heads.iter().map(|h| linear_diff_head(x, text, h, lambda)).collect();
    let width: usize = heads.iter().map(|h| h.ncols()).sum();
    let mut cat = Array2::zeros((x.nrows(), width));
    let mut col = 0;
    for h in &heads {
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                cat[[i, col + j]] = h[[i, j]];
            }
        }
        col += h.ncols();
    }
    let normed = rms_norm(&cat, crate::pdcam::RMS_EPS) * (1.0 - init);
    matmul(&normed, &p.w_o)
}

/// Standard scaled dot-product cross-attention, quadratic in `L_m·L_t`.
pub fn softmax_cross_attention(x: &Matrix, text: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Matrix {
    let q = matmul(x, w_q);
    let k = matmul(text, w_k);
    let v = matmul(text, w_v);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros((x.nrows(), v.ncols()));
    for i in 0..x.nrows() {
        let scores: Vec<f64> = (0..text.nrows())
            .map(|r| (0..q.ncols()).map(|j| q[[i, j]] * k[[r, j]]).sum::<f64>() * scale)
            .collect();
        for (r, w) in softmax(&scores).into_iter().enumerate() {
            for c in 0..v.ncols() {
                out[[i, c]] += w * v[[r, c]];
            }
        }
    }
    out
}
