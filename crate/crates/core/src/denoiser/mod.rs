//! Toy text-to-motion diffusion model.
//!
//! Each layer runs a phase/saliency-aware selective scan block, a
//! cross-attention block against the prompt tokens and a feed-forward
//! sublayer, all residual. The network predicts the clean sequence directly.
//! Keyframe weights and phase come from the clean data during training and
//! from the running clean estimate during sampling.

mod checkpoint;
mod config;
mod model;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{write_loss_curve, Checkpoint, ParamEntry, BLOB_FILE, MANIFEST_FILE};
pub use config::{DiffusionConfig, ModelConfig, TrainConfig};
pub use model::{
    analyze_frames, cfg_predict, denoiser_grad, forward_on_tape, predict_x0, timestep_embedding, x0_loss_and_grad, CondVars,
    Conditioning, DenoiserGrads, DenoiserParams, LayerParams,
};
pub use sampler::{sample, sample_motion, SAMPLE_FPS};
pub use schedule::{beta_schedule, q_sample, strided_timesteps, Schedule};
pub use train::{class_text, clip_grad_norm, toy_dataset, train_toy, AdamW, TrainOutcome, TEXT_SEED, TOY_PERIODS};
