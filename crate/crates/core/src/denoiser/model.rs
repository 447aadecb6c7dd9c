use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::motion::MotionSequence;
use crate::params::param_tree;
use crate::pdcam::{multi_head_on_tape, CrossInputs, PdcamParams};
use crate::periodicity::{phase_track, PhaseTrack};
use crate::ps_mamba::{block_on_tape, PsMambaParams, NORM_EPS};
use crate::saliency::{default_num_segments, keyframe_weights, KeyframeWeights};
use crate::Matrix;

use super::config::ModelConfig;

param_tree! {
    /// One denoiser layer: sequence mixing, cross-attention to text and a
    /// feed-forward sublayer.
    pub struct LayerParams {
        leaves { norm_attn, norm_ff, w_ff1, b_ff1, w_ff2, b_ff2 }
        nodes { ssm: PsMambaParams, attn: PdcamParams }
    }
}

param_tree! {
    /// `w_in`: `D_motion×d`; `w_time`: `d×d`; `w_text`: `D_text×d`;
    /// `null_token`: `1×d`; `w_out`: `d×D_motion`.
    pub struct DenoiserParams {
        leaves { w_in, b_in, w_time, w_text, null_token, norm_out, w_out, b_out }
        lists { layers: LayerParams }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl DenoiserParams {
    pub fn init(cfg: &ModelConfig, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dm, ff) = (cfg.d_model, cfg.motion_dims, cfg.ff_mult * cfg.d_model);
        let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let layers = (0..layers)
            .map(|_| {
                Ok(LayerParams {
                    norm_attn: Array2::ones((1, d)),
                    norm_ff: Array2::ones((1, d)),
                    w_ff1: gaussian(rng, d, ff, std(d)),
                    b_ff1: Array2::zeros((1, ff)),
                    w_ff2: gaussian(rng, ff, d, 0.5 * std(ff)),
                    b_ff2: Array2::zeros((1, d)),
                    ssm: PsMambaParams::init(&cfg.ssm_dims(), rng),
                    attn: PdcamParams::init(d, cfg.heads, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            w_in: gaussian(rng, dm, d, std(dm)),
            b_in: Array2::zeros((1, d)),
            w_time: gaussian(rng, d, d, std(d)),
            w_text: gaussian(rng, cfg.text_dims, d, std(cfg.text_dims)),
            null_token: gaussian(rng, 1, d, 1.0),
            norm_out: Array2::ones((1, d)),
            w_out: gaussian(rng, d, dm, std(d)),
            b_out: Array2::zeros((1, dm)),
            layers,
        })
    }
}

impl<T> DenoiserParams<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Sinusoidal embedding of timestep `t` as a `1×dim` row; `dim` is even.
pub fn timestep_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[[0, 2 * i]] = arg.sin();
        out[[0, 2 * i + 1]] = arg.cos();
    }
    out
}

/// Everything the network is conditioned on besides `x_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `L_t×D_text` prompt tokens; `None` selects the learned null token.
    pub text: Option<Matrix>,
    /// Keyframe weights, one per frame.
    pub m: Vec<f64>,
    pub phase: PhaseTrack,
}

impl Conditioning {
    /// `M ≡ 1`, `Φ ≡ 0`.
    pub fn neutral(len: usize, text: Option<Matrix>) -> Self {
        Self { text, m: vec![1.0; len], phase: PhaseTrack::zeros(len) }
    }

    /// Keyframe weights and phase estimated from `frames`.
    pub fn from_frames(frames: &Matrix, text: Option<Matrix>, cfg: &ModelConfig) -> Result<Self> {
        let (kf, phase) = analyze_frames(frames, cfg)?;
        Ok(Self { text, m: kf.weights, phase })
    }

    pub fn without_text(&self) -> Self {
        Self { text: None, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Saliency and periodicity analysis of a raw frame matrix.
pub fn analyze_frames(frames: &Matrix, cfg: &ModelConfig) -> Result<(KeyframeWeights, PhaseTrack)> {
    let seq = MotionSequence::new(frames.clone(), 20.0, "estimate")?;
    let segments = cfg.segments.unwrap_or_else(|| default_num_segments(seq.len())).min(seq.len() / 2).max(1);
    let kf = keyframe_weights(&seq, segments, &cfg.saliency)?;
    let phase = phase_track(&seq, &kf, &cfg.thresholds)?;
    Ok((kf, phase))
}

fn column(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

/// Conditioning inputs placed on a tape.
pub struct CondVars {
    pub text: Option<Var>,
    pub m: Var,
    pub phi: Var,
    pub encoding: Var,
    pub time: Var,
}

impl CondVars {
    pub fn bind(tape: &Tape, cond: &Conditioning, t: usize, d_model: usize) -> Self {
        Self {
            text: cond.text.as_ref().map(|x| tape.leaf(x.clone())),
            m: tape.leaf(column(&cond.m)),
            phi: tape.leaf(column(&cond.phase.phi)),
            encoding: tape.leaf(cond.phase.encoding.clone()),
            time: tape.leaf(timestep_embedding(t, d_model)),
        }
    }
}

/// Network output `x̂0` for input `x` (`L×D_motion`).
pub fn forward_on_tape(tape: &Tape, p: &DenoiserParams<Var>, cfg: &ModelConfig, x: Var, cond: &CondVars) -> Var {
    let time = tape.matmul(cond.time, p.w_time);
    let mut h = tape.add_row(tape.add_row(tape.matmul(x, p.w_in), p.b_in), time);
    let text = match cond.text {
        Some(tokens) => tape.matmul(tokens, p.w_text),
        None => p.null_token,
    };
    for layer in &p.layers {
        h = block_on_tape(tape, &layer.ssm, h, cond.m, cond.encoding);
        let a = tape.mul_row(tape.rms_norm_rows(h, NORM_EPS), layer.norm_attn);
        let inputs = CrossInputs { x: a, text, m: cond.m, phi: cond.phi };
        h = tape.add(h, multi_head_on_tape(tape, &layer.attn, inputs, cfg.softmax_axes));
        let f = tape.mul_row(tape.rms_norm_rows(h, NORM_EPS), layer.norm_ff);
        let f = tape.silu(tape.add_row(tape.matmul(f, layer.w_ff1), layer.b_ff1));
        let f = tape.add_row(tape.matmul(f, layer.w_ff2), layer.b_ff2);
        h = tape.add(h, f);
    }
    let out = tape.mul_row(tape.rms_norm_rows(h, NORM_EPS), p.norm_out);
    tape.add_row(tape.matmul(out, p.w_out), p.b_out)
}

pub(crate) fn check_inputs(x: &Matrix, cond: &Conditioning, p: &DenoiserParams, cfg: &ModelConfig) -> Result<()> {
    let len = x.nrows();
    if x.ncols() != cfg.motion_dims || p.w_in.nrows() != cfg.motion_dims {
        return arg_err(format!("motion has {} channels, model expects {}", x.ncols(), cfg.motion_dims));
    }
    if cond.m.len() != len || cond.phase.phi.len() != len || cond.phase.encoding.dim() != (len, 2) {
        return arg_err(format!("conditioning covers {} frames, motion has {len}", cond.m.len()));
    }
    if let Some(text) = &cond.text {
        if text.ncols() != cfg.text_dims || text.nrows() == 0 {
            return arg_err(format!("text tokens have shape {:?}, expected L_t×{}", text.dim(), cfg.text_dims));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite motion input".into()));
    }
    Ok(())
}

/// Clean-motion estimate for noisy input `x_t` at step `t`.
pub fn predict_x0(x_t: &Matrix, t: usize, cond: &Conditioning, p: &DenoiserParams, cfg: &ModelConfig) -> Result<Matrix> {
    check_inputs(x_t, cond, p, cfg)?;
    let tape = Tape::inference();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let x = tape.leaf(x_t.clone());
    let cv = CondVars::bind(&tape, cond, t, cfg.d_model);
    let out = forward_on_tape(&tape, &vars, cfg, x, &cv);
    let value = tape.value(out).clone();
    Ok(value)
}

/// Guided estimate `uncond + scale·(cond − uncond)`.
pub fn cfg_predict(
    x_t: &Matrix,
    t: usize,
    cond: &Conditioning,
    p: &DenoiserParams,
    cfg: &ModelConfig,
    scale: f64,
) -> Result<Matrix> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return arg_err(format!("guidance scale must be finite and non-negative, got {scale}"));
    }
    let conditional = predict_x0(x_t, t, cond, p, cfg)?;
    if cond.text.is_none() {
        return Ok(conditional);
    }
    let unconditional = predict_x0(x_t, t, &cond.without_text(), p, cfg)?;
    Ok(&unconditional + &((&conditional - &unconditional) * scale))
}

#[derive(Clone, Debug)]
pub struct DenoiserGrads {
    pub x: Matrix,
    pub params: DenoiserParams,
}

/// Gradients of `Σ upstream ⊙ predict_x0(...)`.
pub fn denoiser_grad(
    x_t: &Matrix,
    t: usize,
    cond: &Conditioning,
    p: &DenoiserParams,
    cfg: &ModelConfig,
    upstream: &Matrix,
) -> Result<DenoiserGrads> {
    check_inputs(x_t, cond, p, cfg)?;
    if upstream.dim() != x_t.dim() {
        return arg_err("upstream cotangent must match the output shape");
    }
    let tape = Tape::new();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let x = tape.leaf(x_t.clone());
    let cv = CondVars::bind(&tape, cond, t, cfg.d_model);
    let out = forward_on_tape(&tape, &vars, cfg, x, &cv);
    let g = tape.backward_with(out, upstream.clone());
    Ok(DenoiserGrads { x: g.wrt(x), params: vars.map(&mut |v| g.wrt(*v)) })
}

/// Mean squared error between the estimate and `x0`, with its gradient
/// w.r.t. every parameter.
pub fn x0_loss_and_grad(
    x_t: &Matrix,
    t: usize,
    x0: &Matrix,
    cond: &Conditioning,
    p: &DenoiserParams,
    cfg: &ModelConfig,
) -> Result<(f64, DenoiserParams)> {
    check_inputs(x_t, cond, p, cfg)?;
    let tape = Tape::new();
    let vars = p.map(&mut |w| tape.leaf(w.clone()));
    let x = tape.leaf(x_t.clone());
    let cv = CondVars::bind(&tape, cond, t, cfg.d_model);
    let out = forward_on_tape(&tape, &vars, cfg, x, &cv);
    let target = tape.leaf(x0.clone());
    let diff = tape.sub(out, target);
    let loss = tape.scale(tape.dot(diff, diff), 1.0 / x0.len() as f64);
    let value = tape.value(loss)[[0, 0]];
    let g = tape.backward(loss);
    Ok((value, vars.map(&mut |v| g.wrt(*v))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::synth_periodic_motion;
    use crate::params::ParamTree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { motion_dims: 3, d_model: 8, d_inner: 8, d_state: 4, heads: 2, text_dims: 5, text_len: 2, ..ModelConfig::default() }
    }

    fn setup(seed: u64) -> (ModelConfig, DenoiserParams, Matrix, Conditioning) {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DenoiserParams::init(&cfg, 2, &mut rng).unwrap();
        let x = gaussian(&mut rng, 10, 3, 1.0);
        let text = gaussian(&mut rng, 2, 5, 1.0);
        (cfg, p, x, Conditioning::neutral(10, Some(text)))
    }

    #[test]
    fn shape_purity_and_dead_head() {
        let (cfg, mut p, x, cond) = setup(1);
        let a = predict_x0(&x, 17, &cond, &p, &cfg).unwrap();
        let b = predict_x0(&x, 17, &cond, &p, &cfg).unwrap();
        assert_eq!(a.dim(), x.dim());
        assert_eq!(a, b);
        p.w_out.fill(0.0);
        assert!(predict_x0(&x, 17, &cond, &p, &cfg).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guidance_algebra() {
        let (cfg, p, x, cond) = setup(2);
        let c = predict_x0(&x, 5, &cond, &p, &cfg).unwrap();
        let u = predict_x0(&x, 5, &cond.without_text(), &p, &cfg).unwrap();
        assert_eq!(cfg_predict(&x, 5, &cond, &p, &cfg, 1.0).unwrap(), c);
        assert_eq!(cfg_predict(&x, 5, &cond, &p, &cfg, 0.0).unwrap(), u);
        assert_ne!(c, u);
        let s = [0.5, 1.5, 2.5].map(|s| cfg_predict(&x, 5, &cond, &p, &cfg, s).unwrap());
        let mid = (&s[0] + &s[2]) * 0.5;
        assert!((&mid - &s[1]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(0, 6);
        assert_eq!(e.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = timestep_embedding(3, 4);
        assert!((e[[0, 0]] - 3f64.sin()).abs() < 1e-15);
        assert!((e[[0, 3]] - (3.0f64 * 0.01).cos()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, p, x, cond) = setup(3);
        assert!(predict_x0(&x, 1, &Conditioning::neutral(9, None), &p, &cfg).is_err());
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(predict_x0(&bad, 1, &cond, &p, &cfg), Err(Error::Validation(_))));
        assert!(cfg_predict(&x, 1, &cond, &p, &cfg, -1.0).is_err());
    }

    #[test]
    fn analysis_conditioning_matches_modules() {
        let mut cfg = tiny();
        cfg.motion_dims = 4;
        let seq = synth_periodic_motion(64, 4, 16, 1.0, 0.01, 3).unwrap();
        let cond = Conditioning::from_frames(&seq.frames().to_owned(), None, &cfg).unwrap();
        assert_eq!(cond.len(), 64);
        assert!(cond.m.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert!(cond.phase.phi.iter().all(|&p| (0.0..2.0 * std::f64::consts::PI).contains(&p)));
    }

    #[test]
    fn loss_gradient_matches_cotangent_form() {
        let (cfg, p, x, cond) = setup(4);
        let x0 = x.mapv(|v| 0.5 * v);
        let (loss, g) = x0_loss_and_grad(&x, 40, &x0, &cond, &p, &cfg).unwrap();
        let pred = predict_x0(&x, 40, &cond, &p, &cfg).unwrap();
        let diff = &pred - &x0;
        assert!((loss - diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).abs() < 1e-14);
        let up = diff * (2.0 / x0.len() as f64);
        let g2 = denoiser_grad(&x, 40, &cond, &p, &cfg, &up).unwrap();
        for (a, b) in g.flatten().iter().zip(g2.params.flatten()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
