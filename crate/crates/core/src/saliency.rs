//! Keyframe detection by segmented density-peaks clustering.
//!
//! Each temporal segment is clustered independently: a Gaussian-kernel local
//! density `rho`, the separation `delta` to the nearest denser frame, and the
//! peak score `gamma = rho·delta`. The number of keyframes per segment comes
//! from the elbow of the descending `gamma` curve. Peak scores of all
//! keyframes in the sequence are then min–max normalised into frame weights;
//! every other frame keeps weight 1.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::motion::{MotionSequence, SegmentSpan};
use crate::Matrix;

/// Floor applied to the cutoff distance when every pairwise distance is zero.
pub const MIN_CUTOFF: f64 = 1e-12;

/// How normalised peak scores become keyframe weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Keyframes get their normalised score in `[0, 1]`, other frames 1.
    #[default]
    Eq3,
    /// Keyframes get `1 + score`, other frames 1.
    OnePlusGamma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// Fraction of pairwise distances that fall inside the cutoff.
    pub fraction: f64,
    pub weight_mode: WeightMode,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { fraction: 0.015, weight_mode: WeightMode::Eq3 }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return arg_err(format!("dpc fraction must lie in (0, 1), got {}", self.fraction));
        }
        Ok(())
    }
}

/// Per-segment clustering diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DpcDiagnostics {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Cutoff in squared-distance units.
    pub d_c: f64,
    /// Sorted keyframe indices local to the segment.
    pub keyframe_local_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeWeights {
    pub weights: Vec<f64>,
    /// Sorted global keyframe indices.
    pub keyframes: Vec<usize>,
    pub segments: Vec<SegmentSpan>,
    pub per_segment: Vec<DpcDiagnostics>,
}

impl KeyframeWeights {
    /// All-ones weights with no keyframes (the unmodulated case).
    pub fn uniform(len: usize) -> Self {
        Self { weights: vec![1.0; len], keyframes: Vec::new(), segments: Vec::new(), per_segment: Vec::new() }
    }

    pub fn report(&self) -> SaliencyReport {
        SaliencyReport {
            keyframes: self.keyframes.clone(),
            weights: self.weights.clone(),
            segments: self
                .segments
                .iter()
                .zip(&self.per_segment)
                .map(|(span, dpc)| DpcSegmentReport {
                    start: span.start,
                    end: span.end,
                    d_c: dpc.d_c,
                    k: dpc.keyframe_local_indices.len(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpcSegmentReport {
    pub start: usize,
    pub end: usize,
    pub d_c: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub keyframes: Vec<usize>,
    pub weights: Vec<f64>,
    pub segments: Vec<DpcSegmentReport>,
}

/// Squared Euclidean distances between all frame pairs.
pub fn pairwise_sq_dist(segment: ArrayView2<'_, f64>) -> Result<Matrix> {
    let m = segment.nrows();
    if m < 2 {
        return arg_err(format!("pairwise distances need at least 2 frames, got {m}"));
    }
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = segment.row(i).iter().zip(segment.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

/// Nearest-rank `fraction` quantile of the strictly upper-triangular distances.
///
/// Never returns zero: a zero quantile falls back to the smallest positive
/// distance, and an all-zero matrix to [`MIN_CUTOFF`].
pub fn cutoff_distance(dists: &Matrix, fraction: f64) -> f64 {
    let m = dists.nrows();
    let mut upper: Vec<f64> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).map(|(i, j)| dists[[i, j]]).collect();
    if upper.is_empty() {
        return MIN_CUTOFF;
    }
    upper.sort_by(f64::total_cmp);
    let rank = ((fraction * upper.len() as f64).ceil() as usize).clamp(1, upper.len());
    let q = upper[rank - 1];
    if q > 0.0 {
        return q;
    }
    upper.into_iter().find(|&d| d > 0.0).unwrap_or(MIN_CUTOFF)
}

/// Gaussian-kernel density `rho_i = Σ_{j≠i} exp(-(d_ij/d_c)²)`.
pub fn local_density(dists: &Matrix, d_c: f64) -> Vec<f64> {
    let m = dists.nrows();
    (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| {
                    let r = dists[[i, j]] / d_c;
                    (-r * r).exp()
                })
                .sum()
        })
        .collect()
}

/// Distance to the nearest denser frame; the densest frame gets the largest
/// distance in the segment. Equal densities rank the lower index as denser.
pub fn separation_distance(rho: &[f64], dists: &Matrix) -> Vec<f64> {
    let m = rho.len();
    let denser = |j: usize, i: usize| rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
    let global_max = dists.iter().copied().fold(0.0, f64::max);
    (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| denser(j, i))
                .map(|j| dists[[i, j]])
                .min_by(f64::total_cmp)
                .unwrap_or(global_max)
        })
        .collect()
}

/// Elbow of a descending curve: index of the point farthest from the chord
/// joining the first and last points, on axes scaled to the unit square.
///
/// Returns 0 for curves with fewer than three points or zero range.
pub fn elbow_index(sorted_desc: &[f64]) -> usize {
    let n = sorted_desc.len();
    if n < 3 {
        return 0;
    }
    let (hi, lo) = (sorted_desc[0], sorted_desc[n - 1]);
    let range = hi - lo;
    if !(range > 0.0) {
        return 0;
    }
    let mut best = (0, 0.0);
    for (i, &g) in sorted_desc.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (g - lo) / range;
        // Chord from (0, 1) to (1, 0): distance ∝ |x + y - 1|.
        let dist = (x + y - 1.0).abs();
        if dist > best.1 {
            best = (i, dist);
        }
    }
    best.0
}

/// Density-peaks keyframes of one segment.
pub fn detect_keyframes(segment: ArrayView2<'_, f64>, fraction: f64) -> Result<DpcDiagnostics> {
    let m = segment.nrows();
    let dists = pairwise_sq_dist(segment)?;
    let d_c = cutoff_distance(&dists, fraction);
    let rho = local_density(&dists, d_c);
    let delta = separation_distance(&rho, &dists);
    let gamma: Vec<f64> = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| gamma[i]).collect();
    let k = elbow_index(&sorted).clamp(1, m.div_ceil(4));

    let mut keyframe_local_indices = order[..k].to_vec();
    keyframe_local_indices.sort_unstable();
    Ok(DpcDiagnostics { rho, delta, gamma, d_c, keyframe_local_indices })
}

/// Default segment count `⌈L/32⌉`.
pub fn default_num_segments(len: usize) -> usize {
    len.div_ceil(32).max(1)
}

/// Splits `[0, len)` into `n` contiguous spans of `⌊len/n⌋` frames; the last
/// span absorbs the remainder.
pub fn equal_spans(len: usize, n: usize) -> Result<Vec<SegmentSpan>> {
    if n < 1 || n > len / 2 {
        return arg_err(format!("segment count {n} outside [1, {}] for {len} frames", len / 2));
    }
    let base = len / n;
    Ok((0..n)
        .map(|s| SegmentSpan { start: s * base, end: if s + 1 == n { len } else { (s + 1) * base } })
        .collect())
}

/// Per-frame keyframe weights for a whole sequence.
pub fn keyframe_weights(seq: &MotionSequence, num_segments: usize, cfg: &SaliencyConfig) -> Result<KeyframeWeights> {
    cfg.validate()?;
    let len = seq.len();
    let spans = equal_spans(len, num_segments)?;
    let frames = seq.frames();
    let per_segment = spans
        .par_iter()
        .map(|span| detect_keyframes(frames.slice(ndarray::s![span.start..span.end, ..]), cfg.fraction))
        .collect::<Result<Vec<_>>>()?;

    let mut keyframes = Vec::new();
    let mut scores = Vec::new();
    for (span, dpc) in spans.iter().zip(&per_segment) {
        for &i in &dpc.keyframe_local_indices {
            keyframes.push(span.start + i);
            scores.push(dpc.gamma[i]);
        }
    }
    let weights = weights_from_scores(len, &keyframes, &scores, cfg.weight_mode);
    Ok(KeyframeWeights { weights, keyframes, segments: spans, per_segment })
}

/// Min–max normalises keyframe scores into a length-`len` weight vector.
///
/// Equal scores (including a single keyframe) normalise to 1.
pub fn weights_from_scores(len: usize, keyframes: &[usize], scores: &[f64], mode: WeightMode) -> Vec<f64> {
    let mut weights = vec![1.0; len];
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (&frame, &g) in keyframes.iter().zip(scores) {
        let normalized = if hi > lo { (g - lo) / (hi - lo) } else { 1.0 };
        weights[frame] = match mode {
            WeightMode::Eq3 => normalized,
            WeightMode::OnePlusGamma => 1.0 + normalized,
        };
    }
    weights
}
