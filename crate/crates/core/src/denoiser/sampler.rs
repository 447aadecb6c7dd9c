use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, Error, Result};
use crate::motion::MotionSequence;
use crate::params::ParamTree;
use crate::Matrix;

use super::checkpoint::Checkpoint;
use super::config::{DiffusionConfig, ModelConfig};
use super::model::{cfg_predict, Conditioning, DenoiserParams};
use super::schedule::{beta_schedule, strided_timesteps};
use super::train::class_text;

/// Frame rate stamped on generated sequences.
pub const SAMPLE_FPS: f64 = 20.0;

/// Deterministic strided sampler. `M` and `Φ` start neutral and are
/// re-estimated from each intermediate clean estimate.
pub fn sample_motion(
    params: &DenoiserParams,
    model: &ModelConfig,
    diffusion: &DiffusionConfig,
    text: Option<&Matrix>,
    len: usize,
    seed: u64,
) -> Result<Matrix> {
    diffusion.validate()?;
    if len < 2 {
        return arg_err("sample length must be at least 2");
    }
    let mut finite = true;
    params.visit_params(&mut |_, m| finite &= m.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Validation("model parameters contain non-finite values".into()));
    }
    let schedule = beta_schedule(diffusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Matrix = Array2::from_shape_simple_fn((len, model.motion_dims), || StandardNormal.sample(&mut rng));
    let mut cond = Conditioning::neutral(len, text.cloned());
    let times = strided_timesteps(diffusion.steps, diffusion.sample_steps);
    let mut x0 = x.clone();
    for (i, &t) in times.iter().enumerate() {
        x0 = cfg_predict(&x, t, &cond, params, model, diffusion.guidance_scale)?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite estimate at timestep {t}")));
        }
        let Some(&prev) = times.get(i + 1) else { break };
        let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let eps = (&x - &(&x0 * ab_t.sqrt())) / (1.0 - ab_t).sqrt();
        x = &x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
        cond = Conditioning::from_frames(&x0, cond.text.take(), model)?;
    }
    Ok(x0)
}

/// Samples one sequence for `class_id` (unconditional when `None`).
pub fn sample(ckpt: &Checkpoint, class_id: Option<u64>, len: usize, seed: u64) -> Result<MotionSequence> {
    let text = class_id.map(|c| class_text(c, &ckpt.model)).transpose()?;
    let frames = sample_motion(ckpt.params(), &ckpt.model, &ckpt.diffusion, text.as_ref(), len, seed)?;
    let name = match class_id {
        Some(c) => format!("sample_c{c}_s{seed}"),
        None => format!("sample_uncond_s{seed}"),
    };
    MotionSequence::new(frames, SAMPLE_FPS, name)
}
