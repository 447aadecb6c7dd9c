use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rhythm_ssm::denoiser::{sample, toy_dataset, train_toy, write_loss_curve, Checkpoint, TrainOutcome};
use rhythm_ssm::gradcheck::run_suite;
use rhythm_ssm::motion::{load_motion_auto, save_motion_auto, synth_periodic_motion, synth_white_noise, MotionSequence};
use rhythm_ssm::periodicity::{
    analyze_segment, autocorrelation_fft, autocorrelation_naive, detect_period, mean_signal, phase_track, PeriodReport, PeriodThresholds,
    PhaseTrack,
};
use rhythm_ssm::ps_mamba::{ps_mamba_block, PsMambaParams, SsmDims};
use rhythm_ssm::saliency::{default_num_segments, keyframe_weights, DpcSegmentReport, SaliencyConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct PeriodSegment {
    pub start: usize,
    pub end: usize,
    pub periodic: bool,
    #[serde(rename = "T")]
    pub period: usize,
    pub peak_lag: Option<usize>,
    pub peak_value: f64,
    pub mean_acf: f64,
    pub entropy: f64,
}

impl From<&PeriodReport> for PeriodSegment {
    fn from(r: &PeriodReport) -> Self {
        Self {
            start: r.span.start,
            end: r.span.end,
            periodic: r.periodic,
            period: r.period,
            peak_lag: r.peak_lag,
            peak_value: r.peak_value,
            mean_acf: r.mean_acf,
            entropy: r.entropy,
        }
    }
}

/// Combined saliency and periodicity report written by `analyze`.
#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub name: String,
    pub frames: usize,
    pub dims: usize,
    pub fps: f64,
    pub keyframes: Vec<usize>,
    pub weights: Vec<f64>,
    /// DPC segments with their cutoff and keyframe count.
    pub segments: Vec<DpcSegmentReport>,
    /// Periodicity of each DPC segment.
    pub period_segments: Vec<PeriodSegment>,
    /// Spans between consecutive keyframes, as used for the phase track.
    pub phase_spans: Vec<PeriodSegment>,
    /// The whole sequence analysed as one span.
    pub sequence: PeriodSegment,
}

pub fn analyze_sequence(
    seq: &MotionSequence,
    segments: Option<usize>,
    saliency: &SaliencyConfig,
    thresholds: &PeriodThresholds,
) -> Result<AnalysisReport, CliError> {
    let n = segments.unwrap_or_else(|| default_num_segments(seq.len()));
    let kf = keyframe_weights(seq, n, saliency)?;
    let track = phase_track(seq, &kf, thresholds)?;
    let dpc = kf.report();
    Ok(AnalysisReport {
        name: seq.name().to_string(),
        frames: seq.len(),
        dims: seq.dims(),
        fps: seq.fps(),
        keyframes: dpc.keyframes,
        weights: dpc.weights,
        segments: dpc.segments,
        period_segments: kf
            .segments
            .iter()
            .map(|&span| PeriodSegment::from(&analyze_segment(seq.frames(), span, thresholds)))
            .collect(),
        phase_spans: track.reports.iter().map(PeriodSegment::from).collect(),
        sequence: PeriodSegment::from(&detect_period(seq, thresholds)),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<MotionSequence, CliError> {
    load_motion_auto(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn analyze(cfg: &CliConfig, input: &Path, segments: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    let seq = load(input)?;
    let report = analyze_sequence(&seq, segments.or(cfg.model.segments), &cfg.model.saliency, &cfg.model.thresholds)?;
    let periodic = report.period_segments.iter().filter(|s| s.periodic).count();
    eprintln!(
        "{}: {} frames, {} keyframes, {periodic}/{} periodic segments, sequence T={} ({})",
        report.name,
        report.frames,
        report.keyframes.len(),
        report.period_segments.len(),
        report.sequence.period,
        if report.sequence.periodic { "periodic" } else { "aperiodic" },
    );
    emit(&to_json(&report), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    Periodic,
    Noise,
}

pub struct SynthArgs {
    pub kind: SynthKind,
    pub len: usize,
    pub dims: usize,
    pub period: usize,
    pub amp: f64,
    pub noise: f64,
    pub seed: u64,
}

pub fn synth(a: &SynthArgs, out: &Path) -> Result<(), CliError> {
    let seq = match a.kind {
        SynthKind::Periodic => synth_periodic_motion(a.len, a.dims, a.period, a.amp, a.noise, a.seed)?,
        SynthKind::Noise => synth_white_noise(a.len, a.dims, a.noise, a.seed)?,
    };
    save_motion_auto(&seq, out)?;
    eprintln!("wrote {} ({}×{})", out.display(), seq.len(), seq.dims());
    Ok(())
}

pub fn train(cfg: &CliConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    let data = toy_dataset(cfg.data.sequences, cfg.data.len, cfg.model.motion_dims, cfg.data.seed)?;
    let start = Instant::now();
    let outcome = train_toy(&data, &cfg.model, &cfg.diffusion, &cfg.train, None)?;
    outcome.checkpoint.save(out)?;
    write_loss_curve(&out.join("loss.csv"), &outcome.losses)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "trained {} steps in {:.1}s, final loss {last:.5}; checkpoint in {}",
        outcome.losses.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(outcome)
}

pub fn sample_cmd(
    checkpoint: &Path,
    class: Option<u64>,
    len: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| CliError::input(format!("{}: {e}", checkpoint.display())))?;
    let seq = sample(&ckpt, class, len, seed)?;
    save_motion_auto(&seq, out)?;
    let r = detect_period(&seq, &ckpt.model.thresholds);
    eprintln!("wrote {}; detected T={} ({})", out.display(), r.period, if r.periodic { "periodic" } else { "aperiodic" });
    Ok(())
}

pub fn gradcheck(module: &str, seed: u64) -> Result<(), CliError> {
    let reports = run_suite(module, seed)?;
    println!("module,groups,max_rel_err,tolerance,passed");
    let mut failed = Vec::new();
    for r in &reports {
        println!("{},{},{:e},{:e},{}", r.module, r.groups.len(), r.max_rel_err(), r.tolerance, r.passed());
        for g in r.groups.iter().filter(|g| g.rel_err >= r.tolerance) {
            eprintln!("  {}: {} rel err {:e}", r.module, g.group, g.rel_err);
        }
        if !r.passed() {
            failed.push(r.module.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

/// Median wall time in seconds of one block forward at each length.
pub fn bench_lengths(lengths: &[usize], dims: &SsmDims, repeats: usize, seed: u64) -> Result<Vec<(usize, f64)>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PsMambaParams::init(dims, &mut rng);
    lengths
        .iter()
        .map(|&len| {
            let x = synth_white_noise(len, dims.d_model, 1.0, seed)?.into_frames();
            let m = vec![1.0; len];
            let phase = PhaseTrack::zeros(len).encoding;
            ps_mamba_block(&x, &m, &phase, &params)?;
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    let y = ps_mamba_block(&x, &m, &phase, &params);
                    let dt = t.elapsed().as_secs_f64();
                    std::hint::black_box(y).map(|_| dt)
                })
                .collect::<Result<_, _>>()?;
            times.sort_by(f64::total_cmp);
            Ok((len, times[times.len() / 2]))
        })
        .collect()
}

pub fn bench(lengths: &[usize], dims: &SsmDims, repeats: usize, seed: u64) -> Result<(), CliError> {
    if lengths.is_empty() || lengths.contains(&0) || repeats == 0 {
        return Err(CliError::input("bench needs positive lengths and repeats"));
    }
    dims.validate()?;
    let rows = bench_lengths(lengths, dims, repeats, seed)?;
    let mut out = String::from("L,median_seconds\n");
    for (len, t) in rows {
        writeln!(out, "{len},{t:e}").unwrap();
    }
    print!("{out}");
    Ok(())
}

pub fn acf(input: &Path, naive: bool, out: Option<&Path>) -> Result<(), CliError> {
    let seq = load(input)?;
    let x = mean_signal(seq.frames());
    let r = if naive { autocorrelation_naive(&x) } else { autocorrelation_fft(&x) };
    let mut text = String::from("tau,r\n");
    for (tau, v) in r.values.iter().enumerate() {
        writeln!(text, "{tau},{v:e}").unwrap();
    }
    emit(&text, out)
}
