//! Motion sequences, text-embedding stubs and their on-disk formats.
//!
//! Two file formats are supported and dispatched by extension:
//!
//! * `.csv`: a header row whose first field is the frame rate and whose
//!   remaining `D` fields name the feature columns, followed by `L` rows of `D`
//!   floats.
//! * `.mbin`: a 16-byte little-endian header (`b"T2MM"`, `u32` L, `u32` D,
//!   `u32` fps×1000) followed by `L·D` little-endian `f32` values, row-major.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, Error, Result};
use crate::Matrix;

const MBIN_MAGIC: &[u8; 4] = b"T2MM";
const MBIN_HEADER_LEN: usize = 16;

/// An `L×D` matrix of pose features with its frame rate.
///
/// Immutable after construction; every constructor validates `L ≥ 2`,
/// `D ≥ 1`, finite entries and a positive frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Matrix,
    fps: f64,
    name: String,
}

impl MotionSequence {
    pub fn new(frames: Matrix, fps: f64, name: impl Into<String>) -> Result<Self> {
        let (l, d) = frames.dim();
        if l < 2 {
            return Err(Error::Validation(format!("sequence needs at least 2 frames, got {l}")));
        }
        if d < 1 {
            return Err(Error::Validation("sequence needs at least 1 feature dimension".into()));
        }
        if let Some(((t, c), v)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value {v} at frame {t}, dim {c}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps, name: name.into() })
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Matrix {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.frames.ncols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Token matrix standing in for an encoded text prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Matrix,
    pub class_id: u64,
}

/// Half-open frame range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return arg_err(format!("empty span [{start}, {end})"));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionFormat {
    Csv,
    Mbin,
}

impl MotionFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Self::Csv),
            Some("mbin") => Ok(Self::Mbin),
            other => Err(Error::Format(format!(
                "cannot infer motion format from extension {other:?} (expected .csv or .mbin)"
            ))),
        }
    }
}

/// Loads a motion file, inferring the format from its extension.
pub fn load_motion_auto(path: &Path) -> Result<MotionSequence> {
    load_motion(path, MotionFormat::from_path(path)?)
}

/// Saves a motion file, inferring the format from its extension.
pub fn save_motion_auto(seq: &MotionSequence, path: &Path) -> Result<()> {
    save_motion(seq, path, MotionFormat::from_path(path)?)
}

pub fn load_motion(path: &Path, format: MotionFormat) -> Result<MotionSequence> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("motion").to_string();
    match format {
        MotionFormat::Csv => parse_csv(&fs::read_to_string(path)?, name),
        MotionFormat::Mbin => parse_mbin(&fs::read(path)?, name),
    }
}

pub fn save_motion(seq: &MotionSequence, path: &Path, format: MotionFormat) -> Result<()> {
    let bytes = match format {
        MotionFormat::Csv => encode_csv(seq).into_bytes(),
        MotionFormat::Mbin => encode_mbin(seq)?,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn parse_csv(text: &str, name: impl Into<String>) -> Result<MotionSequence> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
    let mut fields = header.split(',').map(str::trim);
    let fps_field = fields.next().unwrap_or_default();
    let fps: f64 = fps_field
        .parse()
        .map_err(|_| Error::Format(format!("header must start with the frame rate, got {fps_field:?}")))?;
    let dims = fields.count();
    if dims == 0 {
        return Err(Error::Format("header names no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {}: cannot parse {field:?}", i + 1)))?;
            data.push(v);
        }
        if data.len() - before != dims {
            return Err(Error::Format(format!(
                "row {}: expected {dims} values, found {}",
                i + 1,
                data.len() - before
            )));
        }
        rows += 1;
    }
    let frames = Array2::from_shape_vec((rows, dims), data).map_err(|e| Error::Format(e.to_string()))?;
    MotionSequence::new(frames, fps, name)
}

pub fn encode_csv(seq: &MotionSequence) -> String {
    let mut s = format!("{}", seq.fps);
    for d in 0..seq.dims() {
        s.push_str(&format!(",f{d}"));
    }
    s.push('\n');
    for row in seq.frames.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_mbin(bytes: &[u8], name: impl Into<String>) -> Result<MotionSequence> {
    if bytes.len() < MBIN_HEADER_LEN {
        return Err(Error::Format(format!("mbin header needs 16 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MBIN_MAGIC {
        return Err(Error::Format("bad mbin magic (expected T2MM)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (l, d, fps_milli) = (word(4), word(8), word(12));
    let expected = l
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("mbin dimensions overflow".into()))?;
    let payload = &bytes[MBIN_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "mbin payload is {} bytes, header declares {l}x{d} ({expected} bytes)",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames = Array2::from_shape_vec((l, d), data).map_err(|e| Error::Format(e.to_string()))?;
    MotionSequence::new(frames, fps_milli as f64 / 1000.0, name)
}

pub fn encode_mbin(seq: &MotionSequence) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u32")))
    };
    let fps_milli = (seq.fps * 1000.0).round();
    if !(0.0..=u32::MAX as f64).contains(&fps_milli) {
        return arg_err(format!("fps {} not representable in mbin header", seq.fps));
    }
    let mut out = Vec::with_capacity(MBIN_HEADER_LEN + 4 * seq.frames.len());
    out.extend_from_slice(MBIN_MAGIC);
    out.extend_from_slice(&to_u32(seq.len(), "L")?.to_le_bytes());
    out.extend_from_slice(&to_u32(seq.dims(), "D")?.to_le_bytes());
    out.extend_from_slice(&(fps_milli as u32).to_le_bytes());
    for v in seq.frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Seeded multi-channel sinusoid with additive Gaussian noise.
///
/// `frame(t, d) = amp·sin(2πt/T + πd/D) + ε`. Channel phases are spread over
/// half a cycle so the channel mean keeps the fundamental (a full-cycle
/// spread would cancel exactly under averaging).
pub fn synth_periodic_motion(
    len: usize,
    dims: usize,
    period: usize,
    amp: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<MotionSequence> {
    if period < 2 {
        return arg_err(format!("period must be at least 2 frames, got {period}"));
    }
    if len < 2 * period {
        return arg_err(format!("length {len} < 2·period {period}: period unrecoverable"));
    }
    if dims < 1 {
        return arg_err("dims must be at least 1");
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) || !amp.is_finite() {
        return arg_err("noise_sigma must be finite and non-negative, amp finite");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Array2::from_shape_fn((len, dims), |(t, d)| {
        let phase = 2.0 * PI * t as f64 / period as f64 + PI * d as f64 / dims as f64;
        let eps: f64 = StandardNormal.sample(&mut rng);
        amp * phase.sin() + noise_sigma * eps
    });
    MotionSequence::new(frames, 20.0, format!("synth_T{period}_s{seed}"))
}

/// Seeded i.i.d. Gaussian frames; the aperiodic counterpart of
/// [`synth_periodic_motion`].
pub fn synth_white_noise(len: usize, dims: usize, sigma: f64, seed: u64) -> Result<MotionSequence> {
    if len < 2 || dims < 1 {
        return arg_err("white noise needs len >= 2 and dims >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = Array2::from_shape_fn((len, dims), |_| {
        let eps: f64 = StandardNormal.sample(&mut rng);
        sigma * eps
    });
    MotionSequence::new(frames, 20.0, format!("noise_s{seed}"))
}

/// Deterministic class-keyed token matrix with unit-norm rows.
///
/// The RNG stream is selected by `class_id` and rows are drawn in order, so
/// each row is a pure function of `(seed, class_id, row)`.
pub fn stub_text_embedding(class_id: u64, text_len: usize, dims: usize, seed: u64) -> Result<TextEmbedding> {
    if text_len < 1 || dims < 1 {
        return arg_err("text embedding needs L_t >= 1 and D >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id);
    let mut tokens = Array2::<f64>::zeros((text_len, dims));
    for mut row in tokens.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    Ok(TextEmbedding { tokens, class_id })
}
