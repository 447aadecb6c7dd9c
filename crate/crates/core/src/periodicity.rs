//! Dominant-period detection and phase encoding.
//!
//! A segment is reduced to its channel mean, its normalised linear
//! autocorrelation is computed through the power spectrum, and three
//! criteria (peak height, prominence over the mean ACF, spectral entropy)
//! decide whether it is periodic. The detected period drives a per-frame
//! phase `φ = 2πt/T` that restarts at every segment boundary.

use std::f64::consts::TAU;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex;
use num_traits::{Float, FromPrimitive};
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::motion::{MotionSequence, SegmentSpan};
use crate::saliency::KeyframeWeights;
use crate::Matrix;

/// Scalar types the spectral routines run on (`f32` and `f64`).
pub trait Real: FftNum + Float + FromPrimitive {}
impl<T: FftNum + Float + FromPrimitive> Real for T {}

/// Segments shorter than this are reported non-periodic without analysis.
pub const MIN_ANALYZABLE: usize = 4;

/// Normalised autocorrelation `R(τ)` for `τ = 0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Acf<T> {
    pub values: Vec<T>,
    /// The mean-removed signal had no energy; `values` is all zeros.
    pub zero_power: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeriodThresholds {
    pub peak: f64,
    pub prominence: f64,
    pub entropy: f64,
}

impl Default for PeriodThresholds {
    fn default() -> Self {
        Self { peak: 0.3, prominence: 0.15, entropy: 0.7 }
    }
}

impl PeriodThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.peak) && ok(self.prominence) && ok(self.entropy)) {
            return arg_err("period thresholds must be finite");
        }
        if !(0.0..=1.0).contains(&self.entropy) {
            return arg_err(format!("entropy threshold must lie in [0, 1], got {}", self.entropy));
        }
        Ok(())
    }
}

/// Outcome of the three-criteria test on one ACF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodDecision {
    pub periodic: bool,
    pub period: usize,
    pub peak_lag: Option<usize>,
    pub peak_value: f64,
    pub mean_acf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub span: SegmentSpan,
    pub periodic: bool,
    /// Detected period in frames; the span length when not periodic.
    pub period: usize,
    pub peak_lag: Option<usize>,
    pub peak_value: f64,
    pub mean_acf: f64,
    pub entropy: f64,
    pub thresholds_used: PeriodThresholds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTrack {
    /// Per-frame phase in `[0, 2π)`.
    pub phi: Vec<f64>,
    /// `L×2` rows of `(sin φ, cos φ)`.
    pub encoding: Matrix,
    pub reports: Vec<PeriodReport>,
}

impl PhaseTrack {
    /// Zero phase and zero encoding, used before any estimate exists.
    pub fn zeros(len: usize) -> Self {
        Self { phi: vec![0.0; len], encoding: Array2::zeros((len, 2)), reports: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Per-frame mean over feature dimensions.
pub fn mean_signal(segment: ArrayView2<'_, f64>) -> Vec<f64> {
    segment.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default()
}

/// Smallest power of two that holds a linear (non-wrapping) correlation.
pub fn fft_size(len: usize) -> usize {
    (2 * len).saturating_sub(1).max(1).next_power_of_two()
}

fn centered<T: Real>(x: &[T]) -> (Vec<T>, bool) {
    let n = T::from_usize(x.len().max(1)).unwrap();
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let centered: Vec<T> = x.iter().map(|&v| v - mean).collect();
    let energy = centered.iter().fold(T::zero(), |a, &v| a + v * v);
    let scale = x.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    let tol = T::epsilon() * T::epsilon() * scale * scale * n * T::from_f64(16.0).unwrap();
    (centered, !(energy > tol))
}

/// Direct `O(L²)` biased autocorrelation, normalised by `R(0)`.
pub fn autocorrelation_naive<T: Real>(x: &[T]) -> Acf<T> {
    let (c, zero_power) = centered(x);
    let n = c.len();
    if zero_power {
        return Acf { values: vec![T::zero(); n], zero_power };
    }
    let raw: Vec<T> = (0..n)
        .map(|lag| (0..n - lag).fold(T::zero(), |a, t| a + c[t] * c[t + lag]))
        .collect();
    let r0 = raw[0];
    Acf { values: raw.into_iter().map(|v| v / r0).collect(), zero_power }
}

fn padded_spectrum<T: Real>(c: &[T], planner: &mut FftPlanner<T>) -> Vec<Complex<T>> {
    let size = fft_size(c.len());
    let mut buf: Vec<Complex<T>> = c
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(size)
        .collect();
    planner.plan_fft_forward(size).process(&mut buf);
    buf
}

/// Autocorrelation through the power spectrum of the zero-padded signal.
pub fn autocorrelation_fft<T: Real>(x: &[T]) -> Acf<T> {
    let (c, zero_power) = centered(x);
    let n = c.len();
    if zero_power {
        return Acf { values: vec![T::zero(); n], zero_power };
    }
    let mut planner = FftPlanner::new();
    let mut buf = padded_spectrum(&c, &mut planner);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), T::zero());
    }
    planner.plan_fft_inverse(buf.len()).process(&mut buf);
    let r0 = buf[0].re;
    Acf { values: buf[..n].iter().map(|z| z.re / r0).collect(), zero_power }
}

/// Shannon entropy of a power distribution, normalised by `log N`.
pub fn normalized_entropy<T: Real>(power: &[T]) -> T {
    let n = power.len();
    let total = power.iter().fold(T::zero(), |a, &p| a + p);
    if n < 2 || !(total > T::zero()) {
        return T::one();
    }
    let h = power.iter().fold(T::zero(), |a, &p| {
        let q = p / total;
        if q > T::zero() {
            a - q * q.ln()
        } else {
            a
        }
    });
    (h / T::from_usize(n).unwrap().ln()).max(T::zero()).min(T::one())
}

/// Normalised spectral entropy of the mean-removed, zero-padded signal.
///
/// A signal without energy scores 1.
pub fn spectral_entropy<T: Real>(x: &[T]) -> T {
    let (c, zero_power) = centered(x);
    if zero_power {
        return T::one();
    }
    let mut planner = FftPlanner::new();
    let power: Vec<T> = padded_spectrum(&c, &mut planner).iter().map(|z| z.norm_sqr()).collect();
    normalized_entropy(&power)
}

/// Lag of the highest local maximum of `R` at `τ ≥ 2`.
pub fn dominant_lag(acf: &[f64]) -> Option<usize> {
    let n = acf.len();
    (2..n.saturating_sub(1))
        .filter(|&t| acf[t] > acf[t - 1] && acf[t] >= acf[t + 1])
        .max_by(|&a, &b| acf[a].total_cmp(&acf[b]).then(b.cmp(&a)))
}

/// Peak, prominence and entropy test on a normalised ACF.
pub fn classify_periodic(acf: &Acf<f64>, entropy: f64, th: &PeriodThresholds) -> PeriodDecision {
    let n = acf.values.len();
    let mean_acf = if n > 1 { acf.values[1..].iter().sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let not_periodic = |peak_lag, peak_value| PeriodDecision { periodic: false, period: n, peak_lag, peak_value, mean_acf };
    if acf.zero_power {
        return not_periodic(None, 0.0);
    }
    let Some(lag) = dominant_lag(&acf.values) else {
        return not_periodic(None, 0.0);
    };
    let peak = acf.values[lag];
    let periodic = peak > th.peak && peak - mean_acf > th.prominence && entropy < th.entropy;
    PeriodDecision { periodic, period: if periodic { lag } else { n }, peak_lag: Some(lag), peak_value: peak, mean_acf }
}

/// Runs the full period analysis on `frames[span]`.
pub fn analyze_segment(frames: ArrayView2<'_, f64>, span: SegmentSpan, th: &PeriodThresholds) -> PeriodReport {
    let len = span.len();
    if len < MIN_ANALYZABLE {
        return PeriodReport {
            span,
            periodic: false,
            period: len,
            peak_lag: None,
            peak_value: 0.0,
            mean_acf: 0.0,
            entropy: 1.0,
            thresholds_used: *th,
        };
    }
    let x = mean_signal(frames.slice(ndarray::s![span.start..span.end, ..]));
    let acf = autocorrelation_fft(&x);
    let entropy = spectral_entropy(&x);
    let d = classify_periodic(&acf, entropy, th);
    PeriodReport {
        span,
        periodic: d.periodic,
        period: d.period,
        peak_lag: d.peak_lag,
        peak_value: d.peak_value,
        mean_acf: d.mean_acf,
        entropy,
        thresholds_used: *th,
    }
}

/// Period analysis of a whole sequence as one segment.
pub fn detect_period(seq: &MotionSequence, th: &PeriodThresholds) -> PeriodReport {
    analyze_segment(seq.frames(), SegmentSpan { start: 0, end: seq.len() }, th)
}

/// Spans between consecutive keyframes: `[0,k₁), [k₁,k₂), …, [k_m, len)`.
pub fn keyframe_spans(len: usize, keyframes: &[usize]) -> Vec<SegmentSpan> {
    let mut cuts: Vec<usize> = keyframes.iter().copied().filter(|&k| k > 0 && k < len).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut spans = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(len)) {
        if c > start {
            spans.push(SegmentSpan { start, end: c });
            start = c;
        }
    }
    spans
}

/// Phase of local frame `t` for period `period`, reduced to `[0, 2π)`.
pub fn phase_at(t: usize, period: usize) -> f64 {
    let p = period.max(1);
    TAU * (t % p) as f64 / p as f64
}

/// Segment-wise phase track between keyframes.
pub fn phase_track(seq: &MotionSequence, kf: &KeyframeWeights, th: &PeriodThresholds) -> Result<PhaseTrack> {
    let len = seq.len();
    if kf.weights.len() != len {
        return arg_err(format!("keyframe weights cover {} frames, sequence has {len}", kf.weights.len()));
    }
    let reports: Vec<PeriodReport> =
        keyframe_spans(len, &kf.keyframes).into_iter().map(|span| analyze_segment(seq.frames(), span, th)).collect();
    let mut phi = Vec::with_capacity(len);
    for r in &reports {
        phi.extend((0..r.span.len()).map(|t| phase_at(t, r.period)));
    }
    let mut encoding = Array2::zeros((len, 2));
    for (i, &p) in phi.iter().enumerate() {
        encoding[[i, 0]] = p.sin();
        encoding[[i, 1]] = p.cos();
    }
    Ok(PhaseTrack { phi, encoding, reports })
}
