//! Periodicity- and saliency-aware sequence modelling.
//!
//! The crate is organised bottom-up:
//!
//! * [`motion`] holds the frame-matrix data model, its two file formats and
//!   the seeded synthetic generators.
//! * [`saliency`] detects keyframes with segmented density-peaks clustering
//!   and turns peak scores into per-frame weights.
//! * [`periodicity`] estimates per-segment periods from FFT autocorrelation
//!   and spectral entropy, and produces the phase track.
//! * [`autodiff`] is a small reverse-mode tape over dense matrices; the
//!   neural blocks below are written against it.
//! * [`ps_mamba`] is the keyframe/phase-modulated bidirectional selective
//!   state-space block, [`pdcam`] the phase-rotated linear differential
//!   cross-attention, and [`baseline`] the unmodulated reference blocks.
//! * [`denoiser`] stacks the blocks into an x0-predicting diffusion model with
//!   classifier-free guidance, training, sampling and checkpoints.
//! * [`gradcheck`] compares tape gradients against central differences.

pub mod autodiff;
pub mod baseline;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod motion;
pub mod params;
pub mod pdcam;
pub mod periodicity;
pub mod ps_mamba;
pub mod saliency;

pub use error::{Error, Result};

/// Dense row-major matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
