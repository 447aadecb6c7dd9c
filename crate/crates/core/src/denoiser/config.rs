use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::pdcam::SoftmaxAxes;
use crate::periodicity::PeriodThresholds;
use crate::ps_mamba::SsmDims;
use crate::saliency::SaliencyConfig;

/// Noise schedule, guidance and sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cfg_mask_prob: f64,
    pub guidance_scale: f64,
    pub sample_steps: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cfg_mask_prob: 0.1,
            guidance_scale: 2.5,
            sample_steps: 10,
            layers: 6,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return arg_err(format!("need 0 < beta_start < beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        if !(0.0..=1.0).contains(&self.cfg_mask_prob) {
            return arg_err(format!("cfg_mask_prob must lie in [0, 1], got {}", self.cfg_mask_prob));
        }
        if self.steps == 0 || self.sample_steps == 0 || self.sample_steps > self.steps {
            return arg_err(format!("need 1 <= sample_steps ({}) <= steps ({})", self.sample_steps, self.steps));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return arg_err("guidance_scale must be finite and non-negative");
        }
        if self.layers == 0 {
            return arg_err("layers must be at least 1");
        }
        Ok(())
    }
}

/// Network widths and the analysis settings that produce `M` and `Φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the motion representation.
    pub motion_dims: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub heads: usize,
    /// Width of the raw text tokens.
    pub text_dims: usize,
    /// Tokens per prompt.
    pub text_len: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `d_model`.
    pub ff_mult: usize,
    pub softmax_axes: SoftmaxAxes,
    pub saliency: SaliencyConfig,
    pub thresholds: PeriodThresholds,
    /// DPC segments per sequence; `None` uses one per 32 frames.
    pub segments: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let ssm = SsmDims::default();
        Self {
            motion_dims: 8,
            d_model: ssm.d_model,
            d_inner: ssm.d_inner,
            d_state: ssm.d_state,
            heads: 4,
            text_dims: 16,
            text_len: 4,
            ff_mult: 2,
            softmax_axes: SoftmaxAxes::Efficient,
            saliency: SaliencyConfig::default(),
            thresholds: PeriodThresholds::default(),
            segments: None,
        }
    }
}

impl ModelConfig {
    /// Small widths for the synthetic two-class task.
    pub fn toy() -> Self {
        Self { d_model: 32, d_inner: 64, d_state: 8, ..Self::default() }
    }

    pub fn ssm_dims(&self) -> SsmDims {
        SsmDims { d_model: self.d_model, d_inner: self.d_inner, d_state: self.d_state }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssm_dims().validate()?;
        self.saliency.validate()?;
        self.thresholds.validate()?;
        if self.motion_dims == 0 || self.text_dims == 0 || self.text_len == 0 || self.ff_mult == 0 {
            return arg_err("motion_dims, text_dims, text_len and ff_mult must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return arg_err(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return arg_err("d_model must be even for the timestep embedding");
        }
        if self.segments == Some(0) {
            return arg_err("segments must be at least 1");
        }
        Ok(())
    }
}

/// Optimiser and batching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, lr: 2e-4, weight_decay: 1e-2, clip_norm: 1.0, lr_decay: 0.9, lr_decay_every: 5000 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return arg_err("batch_size and lr_decay_every must be positive");
        }
        let finite_pos = [self.lr, self.clip_norm, self.lr_decay];
        if finite_pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.weight_decay >= 0.0) {
            return arg_err("lr, clip_norm and lr_decay must be positive, weight_decay non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi((step / self.lr_decay_every) as i32)
    }
}
