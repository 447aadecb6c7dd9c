use crate::error::{arg_err, Result};
use crate::Matrix;

use super::config::DiffusionConfig;

/// Linear noise schedule. Index `t − 1` holds the values of step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ 1..=steps`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn beta_schedule(cfg: &DiffusionConfig) -> Result<Schedule> {
    cfg.validate()?;
    let n = cfg.steps;
    let betas: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(Schedule { betas, alphas, alpha_bars })
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` for `t ∈ 1..=steps`.
pub fn q_sample(x0: &Matrix, t: usize, noise: &Matrix, schedule: &Schedule) -> Result<Matrix> {
    if t == 0 || t > schedule.steps() {
        return arg_err(format!("timestep {t} outside 1..={}", schedule.steps()));
    }
    if noise.dim() != x0.dim() {
        return arg_err(format!("noise shape {:?} differs from x0 {:?}", noise.dim(), x0.dim()));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// `sample_steps` timesteps from `steps` down to `steps / sample_steps`.
pub fn strided_timesteps(steps: usize, sample_steps: usize) -> Vec<usize> {
    (0..sample_steps).map(|i| steps - i * steps / sample_steps).collect()
}
