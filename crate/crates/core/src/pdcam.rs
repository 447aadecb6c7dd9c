//! Phase-rotated linear differential cross-attention between motion frames
//! (queries) and text tokens (keys/values).
//!
//! Per head, queries are keyframe-weighted projections split into two halves
//! that are rotated by `βφ_i`. Two linear-attention branches are built from
//! the halves and subtracted with a token-wise weight
//! `λ_i = λ_base·(1 + α(M_i − 1))`, where
//! `λ_base = exp(⟨λ_q1, λ_k1⟩) − exp(⟨λ_q2, λ_k2⟩) + λ_init` is shared by all
//! heads. Head outputs are concatenated, RMS-normalised, scaled by
//! `1 − λ_init` and projected back to the model width.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::params::param_tree;
use crate::Matrix;

pub const RMS_EPS: f64 = 1e-6;
pub const LAMBDA_INIT: f64 = 0.8;

/// Which axes the query and key feature maps are normalised over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxes {
    /// Queries over features per frame, keys over tokens per feature.
    #[default]
    Efficient,
    /// Queries over frames per feature, keys over features per token.
    PaperLiteral,
}

param_tree! {
    /// One head's projections, each `D×2d_h`.
    pub struct HeadParams {
        leaves { w_q, w_k, w_v }
    }
}

param_tree! {
    /// `lambda_*`: `H×d_h`; `lambda_init`, `alpha_imp`, `beta`: `1×1`;
    /// `w_o`: `2D×D`.
    pub struct PdcamParams {
        leaves { lambda_q1, lambda_k1, lambda_q2, lambda_k2, lambda_init, alpha_imp, beta, w_o }
        lists { heads: HeadParams }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl PdcamParams {
    /// `λ` vectors start at zero (so `λ_base = λ_init`), `α = 0`, `β = 1`.
    pub fn init(d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return arg_err(format!("d_model {d_model} must be a positive multiple of heads {heads}"));
        }
        let dh = d_model / heads;
        let proj_std = (1.0 / d_model as f64).sqrt();
        Ok(Self {
            lambda_q1: Array2::zeros((heads, dh)),
            lambda_k1: Array2::zeros((heads, dh)),
            lambda_q2: Array2::zeros((heads, dh)),
            lambda_k2: Array2::zeros((heads, dh)),
            lambda_init: Array2::from_elem((1, 1), LAMBDA_INIT),
            alpha_imp: Array2::zeros((1, 1)),
            beta: Array2::ones((1, 1)),
            w_o: gaussian(rng, 2 * d_model, d_model, (1.0 / (2 * d_model) as f64).sqrt()),
            heads: (0..heads)
                .map(|_| HeadParams {
                    w_q: gaussian(rng, d_model, 2 * dh, proj_std),
                    w_k: gaussian(rng, d_model, 2 * dh, proj_std),
                    w_v: gaussian(rng, d_model, 2 * dh, proj_std),
                })
                .collect(),
        })
    }
}

impl<T> PdcamParams<T> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Per-head projections `(Q1, Q2, K1, K2, V)`; query rows scaled by `M`.
pub struct Projections {
    pub q1: Var,
    pub q2: Var,
    pub k1: Var,
    pub k2: Var,
    pub v: Var,
}

pub fn qkv_on_tape(tape: &Tape, head: &HeadParams<Var>, x: Var, text: Var, m: Var) -> Projections {
    let dh = tape.shape(head.w_q).1 / 2;
    let q = tape.scale_rows(tape.matmul(x, head.w_q), m);
    let k = tape.matmul(text, head.w_k);
    Projections {
        q1: tape.slice_cols(q, 0, dh),
        q2: tape.slice_cols(q, dh, 2 * dh),
        k1: tape.slice_cols(k, 0, dh),
        k2: tape.slice_cols(k, dh, 2 * dh),
        v: tape.matmul(text, head.w_v),
    }
}

/// Rotates each query pair `(Q1_i, Q2_i)` by the angle `β·φ_i`.
pub fn rotate_on_tape(tape: &Tape, q1: Var, q2: Var, phi: Var, beta: Var) -> (Var, Var) {
    let angle = tape.mul_scalar(phi, beta);
    let (cos, sin) = (tape.cos(angle), tape.sin(angle));
    let r1 = tape.sub(tape.scale_rows(q1, cos), tape.scale_rows(q2, sin));
    let r2 = tape.add(tape.scale_rows(q1, sin), tape.scale_rows(q2, cos));
    (r1, r2)
}

/// Returns `(λ_base, λ)` with `λ` an `L×1` column.
pub fn lambda_on_tape(tape: &Tape, p: &PdcamParams<Var>, m: Var) -> (Var, Var) {
    let first = tape.exp(tape.dot(p.lambda_q1, p.lambda_k1));
    let second = tape.exp(tape.dot(p.lambda_q2, p.lambda_k2));
    let base = tape.add(tape.sub(first, second), p.lambda_init);
    let centered = tape.add_scalar(m, -1.0);
    let factor = tape.add_scalar(tape.mul_scalar(centered, p.alpha_imp), 1.0);
    (base, tape.mul_scalar(factor, base))
}

fn feature_maps(tape: &Tape, q: Var, k: Var, axes: SoftmaxAxes) -> (Var, Var) {
    match axes {
        SoftmaxAxes::Efficient => (tape.softmax_rows(q), tape.softmax_cols(k)),
        SoftmaxAxes::PaperLiteral => (tape.softmax_cols(q), tape.softmax_rows(k)),
    }
}

/// Differential linear attention of one head given rotated queries and `λ`.
pub fn diff_attention_on_tape(tape: &Tape, q1: Var, q2: Var, proj: &Projections, lambda: Var, axes: SoftmaxAxes) -> Var {
    let (fq1, fk1) = feature_maps(tape, q1, proj.k1, axes);
    let (fq2, fk2) = feature_maps(tape, q2, proj.k2, axes);
    let a1 = tape.matmul(tape.transpose(fk1), proj.v);
    let a2 = tape.matmul(tape.transpose(fk2), proj.v);
    let first = tape.matmul(fq1, a1);
    let second = tape.scale_rows(tape.matmul(fq2, a2), lambda);
    tape.sub(first, second)
}

/// Inputs shared by every head.
#[derive(Clone, Copy)]
pub struct CrossInputs {
    /// `L_m×D` motion features.
    pub x: Var,
    /// `L_t×D` text tokens.
    pub text: Var,
    /// `L_m×1` keyframe weights.
    pub m: Var,
    /// `L_m×1` phase in radians.
    pub phi: Var,
}

pub fn head_on_tape(tape: &Tape, p: &PdcamParams<Var>, h: usize, inp: CrossInputs, lambda: Var, axes: SoftmaxAxes) -> Var {
    let proj = qkv_on_tape(tape, &p.heads[h], inp.x, inp.text, inp.m);
    let (r1, r2) = rotate_on_tape(tape, proj.q1, proj.q2, inp.phi, p.beta);
    diff_attention_on_tape(tape, r1, r2, &proj, lambda, axes)
}

/// Multi-head output `L_m×D`.
pub fn multi_head_on_tape(tape: &Tape, p: &PdcamParams<Var>, inp: CrossInputs, axes: SoftmaxAxes) -> Var {
    let (_, lambda) = lambda_on_tape(tape, p, inp.m);
    let heads: Vec<Var> = (0..p.num_heads()).map(|h| head_on_tape(tape, p, h, inp, lambda, axes)).collect();
    let cat = tape.concat_cols(&heads);
    let normed = tape.rms_norm_rows(cat, RMS_EPS);
    let scaled = tape.mul_scalar(normed, tape.rsub_scalar(1.0, p.lambda_init));
    tape.matmul(scaled, p.w_o)
}

fn column(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

fn validate(x: &Matrix, text: &Matrix, m: &[f64], phi: &[f64], p: &PdcamParams) -> Result<()> {
    let d = p.w_o.ncols();
    if x.ncols() != d || text.ncols() != d {
        return arg_err(format!("width mismatch: x {:?}, text {:?}, D {d}", x.dim(), text.dim()));
    }
    if m.len() != x.nrows() || phi.len() != x.nrows() {
        return arg_err(format!("per-frame inputs must have {} entries", x.nrows()));
    }
    if text.nrows() == 0 {
        return arg_err("text needs at least one token");
    }
    if x.iter().chain(text.iter()).chain(m).chain(phi).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite cross-attention input".into()));
    }
    Ok(())
}

struct Bound {
    tape: Tape,
    vars: PdcamParams<Var>,
    inputs: CrossInputs,
}

fn bind(tape: Tape, x: &Matrix, text: &Matrix, m: &[f64], phi: &[f64], p: &PdcamParams) -> Bound {
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let inputs = CrossInputs {
        x: tape.leaf(x.clone()),
        text: tape.leaf(text.clone()),
        m: tape.leaf(column(m)),
        phi: tape.leaf(column(phi)),
    };
    Bound { tape, vars, inputs }
}

/// `(Q1, Q2, K1, K2, V)` of head `h`.
pub fn qkv_project(x: &Matrix, text: &Matrix, m: &[f64], p: &PdcamParams, h: usize) -> Result<[Matrix; 5]> {
    validate(x, text, m, &vec![0.0; x.nrows()], p)?;
    if h >= p.num_heads() {
        return arg_err(format!("head {h} out of range"));
    }
    let b = bind(Tape::inference(), x, text, m, &vec![0.0; x.nrows()], p);
    let pr = qkv_on_tape(&b.tape, &b.vars.heads[h], b.inputs.x, b.inputs.text, b.inputs.m);
    let t = &b.tape;
    let out = [pr.q1, pr.q2, pr.k1, pr.k2, pr.v].map(|v| t.value(v).clone());
    Ok(out)
}

/// Rotated query halves.
pub fn phase_rotate(q1: &Matrix, q2: &Matrix, phi: &[f64], beta: f64) -> Result<(Matrix, Matrix)> {
    if q1.dim() != q2.dim() || phi.len() != q1.nrows() {
        return arg_err("phase_rotate shape mismatch");
    }
    let tape = Tape::inference();
    let (a, b) = (tape.leaf(q1.clone()), tape.leaf(q2.clone()));
    let (r1, r2) = rotate_on_tape(&tape, a, b, tape.leaf(column(phi)), tape.scalar(beta));
    let out = (tape.value(r1).clone(), tape.value(r2).clone());
    Ok(out)
}

/// `(λ_base, λ)` for the given keyframe weights.
pub fn token_lambda(p: &PdcamParams, m: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::inference();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let (base, lambda) = lambda_on_tape(&tape, &vars, tape.leaf(column(m)));
    let out = (tape.value(base)[[0, 0]], tape.value(lambda).column(0).to_vec());
    out
}

/// Output of head `h` (`L_m×2d_h`).
pub fn lin_diff_cross_attn(
    x: &Matrix,
    text: &Matrix,
    m: &[f64],
    phi: &[f64],
    p: &PdcamParams,
    h: usize,
    axes: SoftmaxAxes,
) -> Result<Matrix> {
    validate(x, text, m, phi, p)?;
    if h >= p.num_heads() {
        return arg_err(format!("head {h} out of range"));
    }
    let b = bind(Tape::inference(), x, text, m, phi, p);
    let (_, lambda) = lambda_on_tape(&b.tape, &b.vars, b.inputs.m);
    let out = head_on_tape(&b.tape, &b.vars, h, b.inputs, lambda, axes);
    let value = b.tape.value(out).clone();
    Ok(value)
}

/// Full multi-head module output (`L_m×D`).
pub fn multi_head_pdcam(x: &Matrix, text: &Matrix, m: &[f64], phi: &[f64], p: &PdcamParams, axes: SoftmaxAxes) -> Result<Matrix> {
    validate(x, text, m, phi, p)?;
    let b = bind(Tape::inference(), x, text, m, phi, p);
    let out = multi_head_on_tape(&b.tape, &b.vars, b.inputs, axes);
    let value = b.tape.value(out).clone();
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct PdcamGrads {
    pub x: Matrix,
    pub text: Matrix,
    /// `L_m×1`.
    pub m: Matrix,
    /// `L_m×1`.
    pub phi: Matrix,
    pub params: PdcamParams,
}

/// Gradients of `Σ upstream ⊙ multi_head_pdcam(...)`.
pub fn pdcam_grad(
    x: &Matrix,
    text: &Matrix,
    m: &[f64],
    phi: &[f64],
    p: &PdcamParams,
    axes: SoftmaxAxes,
    upstream: &Matrix,
) -> Result<PdcamGrads> {
    validate(x, text, m, phi, p)?;
    if upstream.dim() != x.dim() {
        return arg_err("upstream cotangent must match the output shape");
    }
    let b = bind(Tape::new(), x, text, m, phi, p);
    let out = multi_head_on_tape(&b.tape, &b.vars, b.inputs, axes);
    let g = b.tape.backward_with(out, upstream.clone());
    Ok(PdcamGrads {
        x: g.wrt(b.inputs.x),
        text: g.wrt(b.inputs.text),
        m: g.wrt(b.inputs.m),
        phi: g.wrt(b.inputs.phi),
        params: b.vars.map(&mut |v| g.wrt(*v)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTree;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn setup(seed: u64, lm: usize, lt: usize, d: usize, heads: usize) -> (Matrix, Matrix, PdcamParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PdcamParams::init(d, heads, &mut rng).unwrap();
        (gaussian(&mut rng, lm, d, 1.0), gaussian(&mut rng, lt, d, 1.0), p)
    }

    #[test]
    fn query_weighting() {
        let (x, t, p) = setup(1, 5, 3, 4, 2);
        let [q1, q2, k1, _, v] = qkv_project(&x, &t, &[1.0; 5], &p, 0).unwrap();
        let plain = x.dot(&p.heads[0].w_q);
        assert_eq!(q1, plain.slice(ndarray::s![.., 0..2]).to_owned());
        assert_eq!(q2, plain.slice(ndarray::s![.., 2..4]).to_owned());
        assert_eq!(k1, t.dot(&p.heads[0].w_k).slice(ndarray::s![.., 0..2]).to_owned());
        assert_eq!(v, t.dot(&p.heads[0].w_v));

        let [z1, z2, ..] = qkv_project(&x, &t, &[1.0, 1.0, 0.0, 1.0, 1.0], &p, 0).unwrap();
        assert!(z1.row(2).iter().chain(z2.row(2).iter()).all(|&v| v == 0.0));

        let [d1, d2, ..] = qkv_project(&(&x * 2.0), &t, &[1.0; 5], &p, 0).unwrap();
        for (a, b) in d1.iter().chain(d2.iter()).zip(q1.iter().chain(q2.iter())) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_examples() {
        let q1 = array![[1.0, 2.0], [3.0, -1.0]];
        let q2 = array![[0.5, -0.5], [2.0, 4.0]];
        let (r1, r2) = phase_rotate(&q1, &q2, &[1.3, 4.0], 0.0).unwrap();
        assert_eq!((r1, r2), (q1.clone(), q2.clone()));
        let (r1, r2) = phase_rotate(&q1, &q2, &[FRAC_PI_2, FRAC_PI_2], 1.0).unwrap();
        for ((a, b), (c, d)) in r1.iter().zip(q2.iter()).zip(r2.iter().zip(q1.iter())) {
            assert!((a + b).abs() < 1e-12 && (c - d).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_examples() {
        let (_, _, mut p) = setup(2, 3, 2, 4, 2);
        let (base, lam) = token_lambda(&p, &[1.0, 0.6, 0.0]);
        assert!((base - 0.8).abs() < 1e-15);
        assert!(lam.iter().all(|&l| (l - 0.8).abs() < 1e-15), "alpha = 0 keeps λ at λ_base");
        p.alpha_imp[[0, 0]] = 0.5;
        let (_, lam) = token_lambda(&p, &[1.0, 0.6]);
        assert!((lam[0] - 0.8).abs() < 1e-15);
        assert!((lam[1] - 0.64).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PdcamParams::init(1, 1, &mut rng).unwrap();
        let (x, t) = (array![[0.7]], array![[-1.2]]);
        let out = lin_diff_cross_attn(&x, &t, &[1.0], &[0.4], &p, 0, SoftmaxAxes::Efficient).unwrap();
        let v = t.dot(&p.heads[0].w_v);
        for (o, vv) in out.iter().zip(v.iter()) {
            assert!((o - (1.0 - 0.8) * vv).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_isolates_first_branch() {
        let (x, t, mut p) = setup(4, 5, 3, 4, 2);
        p.lambda_init[[0, 0]] = 0.0;
        let phi = [0.1, 0.2, 0.3, 0.4, 0.5];
        let out = lin_diff_cross_attn(&x, &t, &[1.0; 5], &phi, &p, 1, SoftmaxAxes::Efficient).unwrap();
        // Single branch computed directly.
        let q = x.dot(&p.heads[1].w_q);
        let k = t.dot(&p.heads[1].w_k);
        let v = t.dot(&p.heads[1].w_v);
        let mut expected = Array2::zeros((5, 4));
        for i in 0..5 {
            let (c, s) = (phi[i].cos(), phi[i].sin());
            let rot: Vec<f64> = (0..2).map(|j| q[[i, j]] * c - q[[i, j + 2]] * s).collect();
            let mx = rot.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = rot.iter().map(|r| (r - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for col in 0..4 {
                let mut acc = 0.0;
                for j in 0..2 {
                    let kc: Vec<f64> = (0..3).map(|r| k[[r, j]]).collect();
                    let kmx = kc.iter().cloned().fold(f64::MIN, f64::max);
                    let kz: f64 = kc.iter().map(|v| (v - kmx).exp()).sum();
                    let a: f64 = (0..3).map(|r| (k[[r, j]] - kmx).exp() / kz * v[[r, col]]).sum();
                    acc += e[j] / z * a;
                }
                expected[[i, col]] = acc;
            }
        }
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_values_closed_form() {
        let (x, _, p) = setup(5, 4, 3, 4, 2);
        let t = Array2::from_elem((3, 4), 0.3);
        for axes in [SoftmaxAxes::Efficient, SoftmaxAxes::PaperLiteral] {
            let out = lin_diff_cross_attn(&x, &t, &[1.0, 0.5, 0.0, 1.0], &[0.0, 1.0, 2.0, 3.0], &p, 0, axes).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
            if axes == SoftmaxAxes::Efficient {
                // All value rows equal v, both feature maps stochastic ⇒ row i = (1 − λ_i)·v.
                let v = t.dot(&p.heads[0].w_v).row(0).to_owned();
                for i in 0..4 {
                    for (o, vv) in out.row(i).iter().zip(v.iter()) {
                        assert!((o - 0.2 * vv).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn annihilation_and_rms() {
        let (x, t, mut p) = setup(6, 5, 3, 4, 2);
        let phi = [0.0, 0.5, 1.0, 1.5, 2.0];
        p.lambda_init[[0, 0]] = 1.0;
        let out = multi_head_pdcam(&x, &t, &[1.0; 5], &phi, &p, SoftmaxAxes::Efficient).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_reduction() {
        let (x, t, p) = setup(7, 5, 3, 4, 1);
        let m = [1.0, 0.3, 1.0, 0.0, 1.0];
        let phi = [0.0, 0.5, 1.0, 1.5, 2.0];
        let head = lin_diff_cross_attn(&x, &t, &m, &phi, &p, 0, SoftmaxAxes::Efficient).unwrap();
        let mut normed = head.clone();
        for mut row in normed.rows_mut() {
            let rms = (row.dot(&row) / row.len() as f64 + RMS_EPS).sqrt();
            row /= rms;
        }
        let expected = (normed * (1.0 - LAMBDA_INIT)).dot(&p.w_o);
        let out = multi_head_pdcam(&x, &t, &m, &phi, &p, SoftmaxAxes::Efficient).unwrap();
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_dead_beta_and_homogeneity() {
        let (x, t, p) = setup(8, 5, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let up = gaussian(&mut rng, 5, 4, 1.0);
        let m = [1.0, 0.3, 1.0, 0.0, 1.0];
        let g = pdcam_grad(&x, &t, &m, &[0.0; 5], &p, SoftmaxAxes::Efficient, &up).unwrap();
        assert_eq!(g.params.beta[[0, 0]], 0.0);
        let g2 = pdcam_grad(&x, &t, &m, &[0.0; 5], &p, SoftmaxAxes::Efficient, &(&up * 2.0)).unwrap();
        for (a, b) in g.params.flatten().iter().zip(g2.params.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (x, t, p) = setup(9, 5, 3, 4, 2);
        assert!(multi_head_pdcam(&x, &t, &[1.0; 4], &[0.0; 5], &p, SoftmaxAxes::Efficient).is_err());
        assert!(PdcamParams::init(5, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
