//! Keyframe- and phase-modulated bidirectional selective state-space block.
//!
//! Per direction, the pre-normalised input is expanded into a scan branch and
//! a gate branch. The scan branch drives an input-dependent recurrence
//!
//! ```text
//! Δ_t = softplus(x_t W_Δ + b_Δ)     B_t = x_t W_B     C_t = x_t W_C
//! h_t = exp(Δ_t ⊙ A) ⊙ h_{t-1} + (M_t · Δ_t ⊙ B_t) ⊗ x_t
//! y_t = C_t · h_t
//! ```
//!
//! where `A = -exp(A_log)` and `M_t` is the keyframe weight of frame `t`.
//! Before normalisation the input is enriched with the projected phase
//! encoding, `X_Φ = X + Φ W_φ`. The forward and reversed scans have
//! independent parameters and their outputs are summed onto the residual.

use ndarray::{Array2, ArrayView2};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::params::param_tree;
use crate::Matrix;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

impl Default for SsmDims {
    fn default() -> Self {
        Self { d_model: 64, d_inner: 128, d_state: 16 }
    }
}

impl SsmDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.d_state == 0 {
            return arg_err(format!("ssm dims must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

param_tree! {
    /// Parameters of one scan direction.
    ///
    /// `w_in`, `w_gate`: `D×D_inner`; `a_log`, `w_b`, `w_c`: `D_inner×N`;
    /// `w_delta`: `D_inner×D_inner`; `b_delta`, `d_skip`: `1×D_inner`;
    /// `w_out`: `D_inner×D`.
    pub struct DirectionParams {
        leaves { w_in, w_gate, a_log, w_b, w_c, w_delta, b_delta, d_skip, w_out }
    }
}

param_tree! {
    /// Block parameters: RMSNorm gain (`1×D`), phase projection (`2×D`) and
    /// one parameter set per scan direction.
    pub struct PsMambaParams {
        leaves { norm_gain, w_phi }
        nodes { fwd: DirectionParams, bwd: DirectionParams }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl DirectionParams {
    pub fn init(dims: &SsmDims, rng: &mut impl Rng) -> Self {
        let (d, di, n) = (dims.d_model, dims.d_inner, dims.d_state);
        let a_log = Array2::from_shape_fn((di, n), |(_, j)| ((j + 1) as f64).ln());
        // Step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
        let b_delta = Array2::from_shape_simple_fn((1, di), || {
            let u: f64 = rng.gen();
            let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        Self {
            w_in: gaussian(rng, d, di, (1.0 / d as f64).sqrt()),
            w_gate: gaussian(rng, d, di, (1.0 / d as f64).sqrt()),
            a_log,
            w_b: gaussian(rng, di, n, (1.0 / di as f64).sqrt()),
            w_c: gaussian(rng, di, n, (1.0 / di as f64).sqrt()),
            w_delta: gaussian(rng, di, di, 0.1 / (di as f64).sqrt()),
            b_delta,
            d_skip: Array2::ones((1, di)),
            w_out: gaussian(rng, di, d, 0.5 / (di as f64).sqrt()),
        }
    }
}

impl PsMambaParams {
    pub fn init(dims: &SsmDims, rng: &mut impl Rng) -> Self {
        Self {
            norm_gain: Array2::ones((1, dims.d_model)),
            w_phi: gaussian(rng, 2, dims.d_model, 0.1),
            fwd: DirectionParams::init(dims, rng),
            bwd: DirectionParams::init(dims, rng),
        }
    }
}

fn contiguous<T: Float>(a: ArrayView2<'_, T>) -> Vec<T> {
    a.iter().copied().collect()
}

/// Selective scan over precomputed `Δ`, `A`, `B`, `C`.
///
/// Shapes: `x`, `delta`: `L×D_inner`; `a`: `D_inner×N`; `b`, `c`: `L×N`;
/// `m`: one weight per timestep. Returns `y` (`L×D_inner`) and, when
/// `keep_states` is set, every hidden state `h_t` flattened `[t][d][n]`.
pub fn scan_kernel<T: Float>(
    x: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    c: ArrayView2<'_, T>,
    m: &[T],
    keep_states: bool,
) -> (Array2<T>, Option<Vec<T>>) {
    let (len, di) = x.dim();
    let n = a.ncols();
    assert_eq!(delta.dim(), (len, di));
    assert_eq!(a.nrows(), di);
    assert_eq!(b.dim(), (len, n));
    assert_eq!(c.dim(), (len, n));
    assert_eq!(m.len(), len);
    let (xs, ds, as_, bs, cs) = (contiguous(x), contiguous(delta), contiguous(a), contiguous(b), contiguous(c));

    let mut h = vec![T::zero(); di * n];
    let mut y = vec![T::zero(); len * di];
    let mut states = keep_states.then(|| Vec::with_capacity(len * di * n));
    for t in 0..len {
        let (bt, ct) = (&bs[t * n..(t + 1) * n], &cs[t * n..(t + 1) * n]);
        for d in 0..di {
            let dt = ds[t * di + d];
            let coef = m[t] * dt * xs[t * di + d];
            let hd = &mut h[d * n..(d + 1) * n];
            let ad = &as_[d * n..(d + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                hd[j] = (dt * ad[j]).exp() * hd[j] + coef * bt[j];
                acc = acc + ct[j] * hd[j];
            }
            y[t * di + d] = acc;
        }
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(&h);
        }
    }
    (Array2::from_shape_vec((len, di), y).unwrap(), states)
}

/// Tape op wrapping [`scan_kernel`]; inputs are `[x, Δ, A, B, C, M]` with
/// `M` an `L×1` column.
struct ScanOp {
    states: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let [x, delta, a, b, c, m] = inputs else { panic!("scan expects six inputs") };
        let (len, di) = x.dim();
        let n = a.ncols();
        assert_eq!(self.states.len(), len * di * n, "scan was recorded on an inference tape");
        let mut gx = Array2::zeros((len, di));
        let mut gdelta = Array2::zeros((len, di));
        let mut ga = Array2::<f64>::zeros((di, n));
        let mut gb = Array2::zeros((len, n));
        let mut gc = Array2::zeros((len, n));
        let mut gm = Array2::zeros((len, 1));
        let mut gh = vec![0.0; di * n];
        let zeros = vec![0.0; di * n];
        for t in (0..len).rev() {
            let h_t = &self.states[t * di * n..(t + 1) * di * n];
            let h_prev = if t > 0 { &self.states[(t - 1) * di * n..t * di * n] } else { &zeros[..] };
            let mt = m[[t, 0]];
            let mut gm_t = 0.0;
            for d in 0..di {
                let gy = g[[t, d]];
                let dt = delta[[t, d]];
                let xd = x[[t, d]];
                let (mut gdt, mut gxd) = (0.0, 0.0);
                for j in 0..n {
                    let k = d * n + j;
                    let mut ghk = gh[k] + gy * c[[t, j]];
                    gc[[t, j]] += gy * h_t[k];
                    let decay = (dt * a[[d, j]]).exp();
                    let g_decay = ghk * h_prev[k];
                    let bj = b[[t, j]];
                    gdt += g_decay * decay * a[[d, j]] + ghk * mt * bj * xd;
                    ga[[d, j]] += g_decay * decay * dt;
                    gb[[t, j]] += ghk * mt * dt * xd;
                    gxd += ghk * mt * dt * bj;
                    gm_t += ghk * dt * bj * xd;
                    ghk *= decay;
                    gh[k] = ghk;
                }
                gdelta[[t, d]] = gdt;
                gx[[t, d]] = gxd;
            }
            gm[[t, 0]] = gm_t;
        }
        vec![gx, gdelta, ga, gb, gc, gm]
    }
}

/// Records a selective scan on the tape.
pub fn scan_on_tape(tape: &Tape, x: Var, delta: Var, a: Var, b: Var, c: Var, m: Var) -> Var {
    let (y, states) = {
        let mv = tape.value(m);
        let weights: Vec<f64> = mv.column(0).to_vec();
        scan_kernel(
            tape.value(x).view(),
            tape.value(delta).view(),
            tape.value(a).view(),
            tape.value(b).view(),
            tape.value(c).view(),
            &weights,
            tape.requires_grad(),
        )
    };
    tape.custom(&[x, delta, a, b, c, m], y, Box::new(ScanOp { states: states.unwrap_or_default() }))
}

/// Scan branch of one direction on an already-expanded input `x`
/// (`L×D_inner`): computes `Δ`, `B`, `C` from `x` and runs the scan.
pub fn selective_scan_on_tape(tape: &Tape, p: &DirectionParams<Var>, x: Var, m: Var) -> Var {
    let pre = tape.matmul(x, p.w_delta);
    let pre = tape.add_row(pre, p.b_delta);
    let delta = tape.softplus(pre);
    let b = tape.matmul(x, p.w_b);
    let c = tape.matmul(x, p.w_c);
    let a = tape.neg(tape.exp(p.a_log));
    scan_on_tape(tape, x, delta, a, b, c, m)
}

fn direction_on_tape(tape: &Tape, p: &DirectionParams<Var>, u: Var, m: Var) -> Var {
    let xin = tape.silu(tape.matmul(u, p.w_in));
    let gate = tape.silu(tape.matmul(u, p.w_gate));
    let y = selective_scan_on_tape(tape, p, xin, m);
    let skip = tape.mul_row(xin, p.d_skip);
    let y = tape.add(y, skip);
    let y = tape.mul(y, gate);
    tape.matmul(y, p.w_out)
}

/// Full block on the tape: `X + fwd(Ũ) + rev(bwd(rev Ũ))` with
/// `Ũ = RMSNorm(X + Φ W_φ) ⊙ g`.
///
/// `m` is an `L×1` column of keyframe weights, `phase` the `L×2` encoding.
pub fn block_on_tape(tape: &Tape, p: &PsMambaParams<Var>, x: Var, m: Var, phase: Var) -> Var {
    let phase_d = tape.matmul(phase, p.w_phi);
    let x_phi = tape.add(x, phase_d);
    let u = tape.mul_row(tape.rms_norm_rows(x_phi, NORM_EPS), p.norm_gain);
    let fwd = direction_on_tape(tape, &p.fwd, u, m);
    let u_rev = tape.reverse_rows(u);
    let m_rev = tape.reverse_rows(m);
    let bwd = tape.reverse_rows(direction_on_tape(tape, &p.bwd, u_rev, m_rev));
    let mixed = tape.add(fwd, bwd);
    tape.add(x, mixed)
}

fn check_finite(name: &str, m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} contains non-finite values")))
    }
}

fn weights_column(m: &[f64]) -> Matrix {
    Array2::from_shape_vec((m.len(), 1), m.to_vec()).unwrap()
}

/// `Φ_d = Φ W_φ`.
pub fn project_phase(phase: &Matrix, w_phi: &Matrix) -> Result<Matrix> {
    if phase.ncols() != 2 || w_phi.nrows() != 2 {
        return arg_err(format!("phase projection expects L×2 · 2×D, got {:?} · {:?}", phase.dim(), w_phi.dim()));
    }
    Ok(phase.dot(w_phi))
}

/// One direction's selective scan on an `L×D_inner` input.
pub fn selective_scan(x: &Matrix, p: &DirectionParams, m: &[f64], direction: Direction) -> Result<Matrix> {
    check_finite("scan input", x)?;
    if m.len() != x.nrows() {
        return arg_err(format!("{} keyframe weights for {} frames", m.len(), x.nrows()));
    }
    if x.ncols() != p.w_delta.nrows() {
        return arg_err(format!("scan input width {} != D_inner {}", x.ncols(), p.w_delta.nrows()));
    }
    let tape = Tape::inference();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let (xv, mv) = match direction {
        Direction::Forward => (tape.leaf(x.clone()), tape.leaf(weights_column(m))),
        Direction::Backward => {
            (tape.leaf(x.slice(ndarray::s![..;-1, ..]).to_owned()), tape.leaf(weights_column(&m.iter().rev().copied().collect::<Vec<_>>())))
        }
    };
    let y = tape.value(selective_scan_on_tape(&tape, &vars, xv, mv)).clone();
    Ok(match direction {
        Direction::Forward => y,
        Direction::Backward => y.slice(ndarray::s![..;-1, ..]).to_owned(),
    })
}

fn validate_block_inputs(x: &Matrix, m: &[f64], phase: &Matrix, p: &PsMambaParams) -> Result<()> {
    check_finite("block input", x)?;
    check_finite("keyframe weights", &weights_column(m))?;
    check_finite("phase encoding", phase)?;
    let len = x.nrows();
    if m.len() != len || phase.nrows() != len {
        return arg_err(format!("length mismatch: x {len}, weights {}, phase {}", m.len(), phase.nrows()));
    }
    if x.ncols() != p.norm_gain.ncols() || phase.ncols() != 2 {
        return arg_err(format!("shape mismatch: x {:?}, phase {:?}, D {}", x.dim(), phase.dim(), p.norm_gain.ncols()));
    }
    Ok(())
}

/// Block output `L×D` for input `x`, keyframe weights `m` and phase encoding.
pub fn ps_mamba_block(x: &Matrix, m: &[f64], phase: &Matrix, p: &PsMambaParams) -> Result<Matrix> {
    validate_block_inputs(x, m, phase, p)?;
    let tape = Tape::inference();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let out = block_on_tape(&tape, &vars, tape.leaf(x.clone()), tape.leaf(weights_column(m)), tape.leaf(phase.clone()));
    let value = tape.value(out).clone();
    Ok(value)
}

/// Gradients of `Σ upstream ⊙ block(x)`.
#[derive(Clone, Debug)]
pub struct PsMambaGrads {
    pub x: Matrix,
    /// `L×1`.
    pub m: Matrix,
    pub phase: Matrix,
    pub params: PsMambaParams,
}

pub fn ps_mamba_grad(x: &Matrix, m: &[f64], phase: &Matrix, p: &PsMambaParams, upstream: &Matrix) -> Result<PsMambaGrads> {
    validate_block_inputs(x, m, phase, p)?;
    if upstream.dim() != x.dim() {
        return arg_err("upstream cotangent must match the block output shape");
    }
    let tape = Tape::new();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let (xv, mv, pv) = (tape.leaf(x.clone()), tape.leaf(weights_column(m)), tape.leaf(phase.clone()));
    let out = block_on_tape(&tape, &vars, xv, mv, pv);
    let grads = tape.backward_with(out, upstream.clone());
    Ok(PsMambaGrads {
        x: grads.wrt(xv),
        m: grads.wrt(mv),
        phase: grads.wrt(pv),
        params: vars.map(&mut |v| grads.wrt(*v)),
    })
}

/// Hidden-state norm bound helper: largest `|h|` reached by a scan.
pub fn max_state_magnitude(x: &Matrix, p: &DirectionParams, m: &[f64]) -> f64 {
    let tape = Tape::new();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let xv = tape.leaf(x.clone());
    let pre = tape.add_row(tape.matmul(xv, vars.w_delta), vars.b_delta);
    let delta = tape.softplus(pre);
    let b = tape.matmul(xv, vars.w_b);
    let c = tape.matmul(xv, vars.w_c);
    let a = tape.neg(tape.exp(vars.a_log));
    let (_, states) = scan_kernel(
        x.view(),
        tape.value(delta).view(),
        tape.value(a).view(),
        tape.value(b).view(),
        tape.value(c).view(),
        m,
        true,
    );
    states.unwrap().iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
