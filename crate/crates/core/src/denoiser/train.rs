use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::motion::{stub_text_embedding, synth_periodic_motion, MotionSequence};
use crate::params::ParamTree;
use crate::Matrix;

use super::checkpoint::Checkpoint;
use super::config::{DiffusionConfig, ModelConfig, TrainConfig};
use super::model::{x0_loss_and_grad, Conditioning, DenoiserParams};
use super::schedule::{beta_schedule, q_sample};

/// Periods of the two toy classes, indexed by class id.
pub const TOY_PERIODS: [usize; 2] = [16, 8];
/// Seed shared by every prompt embedding so a class always maps to the same
/// tokens.
pub const TEXT_SEED: u64 = 0x7e47;

/// Prompt tokens for a class.
pub fn class_text(class_id: u64, cfg: &ModelConfig) -> Result<Matrix> {
    Ok(stub_text_embedding(class_id, cfg.text_len, cfg.text_dims, TEXT_SEED)?.tokens)
}

/// `n` sequences alternating between the toy classes.
pub fn toy_dataset(n: usize, len: usize, dims: usize, seed: u64) -> Result<Vec<(MotionSequence, u64)>> {
    (0..n)
        .map(|i| {
            let class = (i % TOY_PERIODS.len()) as u64;
            let item_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            Ok((synth_periodic_motion(len, dims, TOY_PERIODS[class as usize], 1.0, 0.05, item_seed)?, class))
        })
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= lr * (update + self.weight_decay * params[i]);
        }
    }
}

/// Scales `grads` in place to at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

struct Example {
    x0: Matrix,
    text: Matrix,
    cond: Conditioning,
}

struct BatchItem {
    index: usize,
    t: usize,
    drop_text: bool,
    noise: Matrix,
}

/// Seeded x0-prediction training with classifier-free dropout.
pub fn train_toy(
    dataset: &[(MotionSequence, u64)],
    model: &ModelConfig,
    diffusion: &DiffusionConfig,
    train: &TrainConfig,
    init: Option<DenoiserParams>,
) -> Result<TrainOutcome> {
    model.validate()?;
    diffusion.validate()?;
    train.validate()?;
    let Some((first, _)) = dataset.first() else {
        return arg_err("training set is empty");
    };
    let (len, dims) = (first.len(), first.dims());
    if dims != model.motion_dims || dataset.iter().any(|(s, _)| s.len() != len || s.dims() != dims) {
        return arg_err(format!("every sequence must be {len}×{}", model.motion_dims));
    }
    let schedule = beta_schedule(diffusion)?;

    // Conditioning signals come from the clean motion and never change.
    let examples: Vec<Example> = dataset
        .par_iter()
        .map(|(seq, class)| {
            let x0 = seq.frames().to_owned();
            let text = class_text(*class, model)?;
            let cond = Conditioning::from_frames(&x0, None, model)?;
            Ok(Example { x0, text, cond })
        })
        .collect::<Result<_>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(diffusion.seed);
    let mut params = match init {
        Some(p) => p,
        None => DenoiserParams::init(model, diffusion.layers, &mut init_rng)?,
    };
    let mut flat = params.flatten();
    let mut opt = AdamW::new(flat.len(), train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(diffusion.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let batch: Vec<BatchItem> = (0..train.batch_size)
            .map(|_| BatchItem {
                index: rng.gen_range(0..examples.len()),
                t: rng.gen_range(1..=diffusion.steps),
                drop_text: rng.gen::<f64>() < diffusion.cfg_mask_prob,
                noise: Array2::from_shape_simple_fn((len, dims), || StandardNormal.sample(&mut rng)),
            })
            .collect();
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|item| {
                let ex = &examples[item.index];
                let x_t = q_sample(&ex.x0, item.t, &item.noise, &schedule)?;
                let mut cond = ex.cond.clone();
                if !item.drop_text {
                    cond.text = Some(ex.text.clone());
                }
                let (loss, grads) = x0_loss_and_grad(&x_t, item.t, &ex.x0, &cond, &params, model)?;
                Ok((loss, grads.flatten()))
            })
            .collect::<Result<_>>()?;

        // Reduce in batch order so the sum is independent of scheduling.
        let scale = 1.0 / train.batch_size as f64;
        let mut grads = vec![0.0; flat.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss {loss} at step {step}")));
        }
        losses.push(loss);
        clip_grad_norm(&mut grads, train.clip_norm);
        opt.step(&mut flat, &grads, train.lr_at(step));
        params.assign_flat(&flat);
    }

    Ok(TrainOutcome { checkpoint: Checkpoint::new(model.clone(), diffusion.clone(), params), losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut opt = AdamW::new(3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -4.0, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut opt = AdamW::new(1, 0.5);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn lr_decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(4999), 2e-4);
        assert!((cfg.lr_at(5000) - 1.8e-4).abs() < 1e-18);
    }

    #[test]
    fn toy_dataset_alternates_classes() {
        let data = toy_dataset(4, 64, 8, 1).unwrap();
        assert_eq!(data.iter().map(|d| d.1).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
        assert_eq!(data[0].0.dims(), 8);
    }

    #[test]
    fn rejects_bad_datasets() {
        let model = ModelConfig { d_model: 8, d_inner: 8, d_state: 2, heads: 2, ..ModelConfig::default() };
        let diff = DiffusionConfig { layers: 1, ..Default::default() };
        let train = TrainConfig { steps: 1, batch_size: 2, ..Default::default() };
        assert!(train_toy(&[], &model, &diff, &train, None).is_err());
        let wrong = toy_dataset(2, 32, 4, 0).unwrap();
        assert!(train_toy(&wrong, &model, &diff, &train, None).is_err());
    }

    #[test]
    fn nan_parameters_abort_with_divergence() {
        let model = ModelConfig { d_model: 8, d_inner: 8, d_state: 2, heads: 2, ..ModelConfig::default() };
        let diff = DiffusionConfig { layers: 1, ..Default::default() };
        let train = TrainConfig { steps: 2, batch_size: 2, ..Default::default() };
        let mut init = DenoiserParams::init(&model, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        init.w_out[[0, 0]] = f64::NAN;
        let data = toy_dataset(2, 32, 8, 0).unwrap();
        assert!(matches!(train_toy(&data, &model, &diff, &train, Some(init)), Err(Error::Divergence(_))));
    }
}
