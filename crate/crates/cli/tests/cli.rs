use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rhythm-ssm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Keys and value kinds of a JSON document, with arrays reduced to their
/// first element.
fn shape(v: &Value) -> Value {
    match v {
        Value::Null => Value::String("null".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::Number(_) => Value::String("number".into()),
        Value::String(_) => Value::String("string".into()),
        Value::Array(a) => Value::Array(a.first().map(shape).into_iter().collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
    }
}

fn analyze(input: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["analyze", s(input)];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(&args).stdout).unwrap()
}

#[test]
fn analyze_periodic_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let periodic = dir.path().join("p.csv");
    ok(&["synth", "--period", "16", "--len", "128", "--seed", "4", "--out", s(&periodic)]);
    let report = analyze(&periodic, &["--segments", "1"]);
    let segs = report["period_segments"].as_array().unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0]["periodic"], true);
    assert!((15..=17).contains(&segs[0]["T"].as_u64().unwrap()));

    let noise = dir.path().join("n.mbin");
    ok(&["synth", "--kind", "noise", "--noise", "1", "--len", "128", "--seed", "4", "--out", s(&noise)]);
    let report = analyze(&noise, &[]);
    assert!(report["period_segments"].as_array().unwrap().iter().all(|s| s["periodic"] == false));
}

#[test]
fn analyze_report_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.csv");
    let out = dir.path().join("r.json");
    ok(&["synth", "--period", "8", "--len", "64", "--dims", "3", "--out", s(&input)]);
    ok(&["analyze", s(&input), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(golden("analyze_schema.json")).unwrap()).unwrap();
    assert_eq!(shape(&report), expected);
}

#[test]
fn csv_outputs_have_stable_headers() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.csv");
    ok(&["synth", "--len", "40", "--out", s(&input)]);
    let acf = String::from_utf8(ok(&["acf", s(&input), "--fft"]).stdout).unwrap();
    let bench = String::from_utf8(ok(&["bench", "--lengths", "16,32", "--repeats", "1"]).stdout).unwrap();
    let headers = std::fs::read_to_string(golden("csv_headers.txt")).unwrap();
    let mut lines = headers.lines();
    assert_eq!(acf.lines().next(), lines.next());
    assert_eq!(bench.lines().next(), lines.next());
    assert_eq!(acf.lines().count(), 41);
    assert_eq!(bench.lines().count(), 3);
}

#[test]
fn acf_backends_agree() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("n.csv");
    ok(&["synth", "--kind", "noise", "--noise", "2", "--len", "300", "--dims", "4", "--out", s(&input)]);
    let parse = |flag: &str| -> Vec<f64> {
        let text = String::from_utf8(ok(&["acf", s(&input), flag]).stdout).unwrap();
        text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
    };
    let (naive, fft) = (parse("--naive"), parse("--fft"));
    assert_eq!(naive.len(), fft.len());
    let diff = naive.iter().zip(&fft).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max diff {diff}");
}

#[test]
fn gradcheck_pdcam_passes() {
    let out = ok(&["gradcheck", "--module", "pdcam"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "pdcam");
    assert!(row[2].parse::<f64>().unwrap() < 1e-4);
    assert_eq!(row[4], "true");
}

#[test]
fn exit_codes_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["analyze", "/nonexistent/file.csv"]).status.code(), Some(2));
    assert_eq!(run(&["analyze"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--module", "everything"]).status.code(), Some(2));

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[model]\nunknown_key = 1\n").unwrap();
    let input = dir.path().join("p.csv");
    ok(&["synth", "--len", "40", "--out", s(&input)]);
    assert_eq!(run(&["--config", s(&bad_cfg), "analyze", s(&input)]).status.code(), Some(2));

    let garbage = dir.path().join("g.csv");
    std::fs::write(&garbage, "not,a,motion\nfile\n").unwrap();
    assert_eq!(run(&["analyze", s(&garbage)]).status.code(), Some(2));

    let out = bin().env("RHYTHM_SSM_THREADS", "0").args(["analyze", s(&input)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().env("RHYTHM_SSM_THREADS", "1").args(["analyze", s(&input)]).output().unwrap();
    assert!(out.status.success());
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[model]\nmotion_dims = 4\nd_model = 8\nd_inner = 8\nd_state = 2\nheads = 2\n\
         [diffusion]\nlayers = 1\nsteps = 100\nsample_steps = 3\nseed = 7\n\
         [train]\nsteps = 6\nbatch_size = 2\n\
         [data]\nsequences = 4\nlen = 32\n",
    )
    .unwrap();
    path
}

#[test]
fn train_and_sample_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", s(&cfg), "train", "--out", s(out)]);
    }
    let loss_a = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss_a, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(loss_a.lines().next(), Some("step,loss"));
    assert_eq!(loss_a.lines().count(), 7);

    let (m1, m2) = (dir.path().join("m1.mbin"), dir.path().join("m2.mbin"));
    for out in [&m1, &m2] {
        ok(&["sample", "--checkpoint", s(&a), "--class", "1", "--len", "32", "--seed", "3", "--out", s(out)]);
    }
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    assert_eq!(run(&["sample", "--checkpoint", s(&dir.path().join("none")), "--out", s(&m1)]).status.code(), Some(2));
}

#[test]
fn toy_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let dir = tempfile::tempdir().unwrap();
    // A zero-step run validates the whole file without training.
    let out = run(&["--config", s(&path), "train", "--steps", "0", "--out", s(&dir.path().join("c"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
