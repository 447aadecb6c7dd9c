//! Central finite-difference checks of the analytic gradients.
//!
//! Each parameter leaf (and each differentiable input) is one group. The
//! error of a group is the largest absolute deviation between analytic and
//! numeric entries divided by the largest numeric magnitude in the group, so
//! entries that are numerically zero do not inflate the ratio.

use std::ops::Range;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::denoiser::{denoiser_grad, predict_x0, Conditioning, DenoiserParams, ModelConfig};
use crate::error::{arg_err, Result};
use crate::params::ParamTree;
use crate::pdcam::{multi_head_pdcam, pdcam_grad, PdcamParams, SoftmaxAxes};
use crate::periodicity::PhaseTrack;
use crate::ps_mamba::{ps_mamba_block, ps_mamba_grad, PsMambaParams, SsmDims};
use crate::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Entries sampled per group; smaller groups are checked exhaustively.
pub const MAX_ENTRIES: usize = 64;

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub scale: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub module: String,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.rel_err < self.tolerance)
    }
}

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn central_difference(f: &(impl Fn(&[f64]) -> f64 + ?Sized), theta: &[f64], i: usize, step: f64) -> f64 {
    let mut probe = theta.to_vec();
    probe[i] = theta[i] + step;
    let up = f(&probe);
    probe[i] = theta[i] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Compares `analytic` with finite differences of `f` on every group.
pub fn check_groups<F>(
    groups: &[(String, Range<usize>)],
    theta: &[f64],
    analytic: &[f64],
    f: F,
    rng: &mut impl Rng,
) -> Vec<GroupCheck>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    groups
        .iter()
        .map(|(name, range)| {
            let n = range.len();
            let mut picks: Vec<usize> = if n <= MAX_ENTRIES {
                (0..n).collect()
            } else {
                sample(rng, n, MAX_ENTRIES).into_vec()
            };
            picks.sort_unstable();
            let pairs: Vec<(f64, f64)> = picks
                .par_iter()
                .map(|&k| {
                    let i = range.start + k;
                    (analytic[i], central_difference(&f, theta, i, FD_STEP))
                })
                .collect();
            let max_abs_err = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = pairs.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
            let rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
            GroupCheck { group: name.clone(), checked: picks.len(), max_abs_err, scale, rel_err }
        })
        .collect()
}

/// Groups for a parameter tree followed by extra named inputs.
fn layout_groups(tree: &impl ParamTree, extra: &[(&str, usize)]) -> Vec<(String, Range<usize>)> {
    let mut offset = 0;
    let mut out = Vec::new();
    for (name, (r, c)) in tree.layout() {
        out.push((name, offset..offset + r * c));
        offset += r * c;
    }
    for (name, len) in extra {
        out.push((name.to_string(), offset..offset + len));
        offset += len;
    }
    out
}

fn noise(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn contract(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn random_phase(rng: &mut impl Rng, len: usize) -> (Vec<f64>, Matrix) {
    let phi: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let enc = Array2::from_shape_fn((len, 2), |(i, j)| if j == 0 { phi[i].sin() } else { phi[i].cos() });
    (phi, enc)
}

fn split(theta: &[f64], n: usize, shape: (usize, usize)) -> Matrix {
    Array2::from_shape_vec(shape, theta[n..n + shape.0 * shape.1].to_vec()).unwrap()
}

/// Phase/saliency-aware scan block on a small random problem.
pub fn check_ps_mamba(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = SsmDims { d_model: 6, d_inner: 8, d_state: 4 };
    let len = 12;
    let mut p = PsMambaParams::init(&dims, &mut rng);
    p.norm_gain = noise(&mut rng, 1, 6, 0.3) + 1.0;
    p.w_phi = noise(&mut rng, 2, 6, 0.5);
    let x = noise(&mut rng, len, 6, 1.0);
    let m: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (_, phase) = random_phase(&mut rng, len);
    let up = noise(&mut rng, len, 6, 1.0);

    let g = ps_mamba_grad(&x, &m, &phase, &p, &up)?;
    let np = p.num_params();
    let mut theta = p.flatten();
    theta.extend(x.iter());
    let mut analytic = g.params.flatten();
    analytic.extend(g.x.iter());
    let groups = layout_groups(&p, &[("input.x", x.len())]);
    let f = |th: &[f64]| {
        let mut q = p.clone();
        q.assign_flat(&th[..np]);
        let xx = split(th, np, x.dim());
        contract(&ps_mamba_block(&xx, &m, &phase, &q).expect("valid shapes"), &up)
    };
    let groups = check_groups(&groups, &theta, &analytic, f, &mut rng);
    Ok(GradCheckReport { module: "ssm".into(), tolerance: MODULE_TOLERANCE, groups })
}

/// Cross-attention module with every parameter away from its initial value.
pub fn check_pdcam(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lm, lt, d, heads) = (10, 5, 8, 2);
    let mut p = PdcamParams::init(d, heads, &mut rng)?;
    for lam in [&mut p.lambda_q1, &mut p.lambda_k1, &mut p.lambda_q2, &mut p.lambda_k2] {
        *lam = noise(&mut rng, heads, d / heads, 0.3);
    }
    p.alpha_imp.fill(0.6);
    p.beta.fill(0.9);
    let x = noise(&mut rng, lm, d, 1.0);
    let text = noise(&mut rng, lt, d, 1.0);
    let m: Vec<f64> = (0..lm).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (phi, _) = random_phase(&mut rng, lm);
    let up = noise(&mut rng, lm, d, 1.0);
    let axes = SoftmaxAxes::Efficient;

    let g = pdcam_grad(&x, &text, &m, &phi, &p, axes, &up)?;
    let np = p.num_params();
    let mut theta = p.flatten();
    theta.extend(x.iter().chain(text.iter()));
    let mut analytic = g.params.flatten();
    analytic.extend(g.x.iter().chain(g.text.iter()));
    let groups = layout_groups(&p, &[("input.x", x.len()), ("input.text", text.len())]);
    let f = |th: &[f64]| {
        let mut q = p.clone();
        q.assign_flat(&th[..np]);
        let xx = split(th, np, x.dim());
        let tt = split(th, np + x.len(), text.dim());
        contract(&multi_head_pdcam(&xx, &tt, &m, &phi, &q, axes).expect("valid shapes"), &up)
    };
    let groups = check_groups(&groups, &theta, &analytic, f, &mut rng);
    Ok(GradCheckReport { module: "pdcam".into(), tolerance: MODULE_TOLERANCE, groups })
}

/// Two-layer denoiser at `L = 8`, `D = 8`.
pub fn check_denoiser(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        motion_dims: 8,
        d_model: 8,
        d_inner: 8,
        d_state: 4,
        heads: 2,
        text_dims: 6,
        text_len: 3,
        ..ModelConfig::default()
    };
    let len = 8;
    let p = DenoiserParams::init(&cfg, 2, &mut rng)?;
    let x = noise(&mut rng, len, 8, 1.0);
    let m: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (phi, encoding) = random_phase(&mut rng, len);
    let cond = Conditioning {
        text: Some(noise(&mut rng, 3, 6, 1.0)),
        m,
        phase: PhaseTrack { phi, encoding, reports: Vec::new() },
    };
    let up = noise(&mut rng, len, 8, 1.0);
    let t = 123;

    let g = denoiser_grad(&x, t, &cond, &p, &cfg, &up)?;
    let np = p.num_params();
    let mut theta = p.flatten();
    theta.extend(x.iter());
    let mut analytic = g.params.flatten();
    analytic.extend(g.x.iter());
    let groups = layout_groups(&p, &[("input.x", x.len())]);
    let f = |th: &[f64]| {
        let mut q = p.clone();
        q.assign_flat(&th[..np]);
        let xx = split(th, np, x.dim());
        contract(&predict_x0(&xx, t, &cond, &q, &cfg).expect("valid shapes"), &up)
    };
    let groups = check_groups(&groups, &theta, &analytic, f, &mut rng);
    Ok(GradCheckReport { module: "model".into(), tolerance: MODEL_TOLERANCE, groups })
}

/// Runs the named suite: `ssm`, `pdcam`, `model` or `all`.
pub fn run_suite(module: &str, seed: u64) -> Result<Vec<GradCheckReport>> {
    match module {
        "ssm" => Ok(vec![check_ps_mamba(seed)?]),
        "pdcam" => Ok(vec![check_pdcam(seed)?]),
        "model" => Ok(vec![check_denoiser(seed)?]),
        "all" => Ok(vec![check_ps_mamba(seed)?, check_pdcam(seed)?, check_denoiser(seed)?]),
        other => arg_err(format!("unknown gradcheck module {other:?}; expected all, ssm, pdcam or model")),
    }
}
