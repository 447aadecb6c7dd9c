use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhythm_ssm::denoiser::*;
use rhythm_ssm::params::ParamTree;

fn tiny() -> (ModelConfig, DiffusionConfig) {
    let model = ModelConfig { motion_dims: 4, d_model: 8, d_inner: 8, d_state: 2, heads: 2, ..ModelConfig::default() };
    let diffusion = DiffusionConfig { layers: 2, steps: 100, sample_steps: 4, seed: 5, ..Default::default() };
    (model, diffusion)
}

fn checkpoint() -> Checkpoint {
    let (model, diffusion) = tiny();
    let params = DenoiserParams::init(&model, diffusion.layers, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    Checkpoint::new(model, diffusion, params)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ckpt);

    let text = class_text(1, &ckpt.model).unwrap();
    let x = ndarray::Array2::from_shape_fn((16, 4), |(i, j)| ((i * 7 + j) as f64).sin());
    let cond = Conditioning::from_frames(&x, Some(text), &ckpt.model).unwrap();
    let a = predict_x0(&x, 40, &cond, ckpt.params(), &ckpt.model).unwrap();
    let b = predict_x0(&x, 40, &cond, back.params(), &back.model).unwrap();
    assert_eq!(a, b);
}

#[test]
fn index_is_contiguous_and_complete() {
    let ckpt = checkpoint();
    let index = ckpt.index();
    let mut offset = 0;
    for e in &index {
        assert_eq!(e.offset, offset);
        offset += e.shape[0] * e.shape[1];
    }
    assert_eq!(offset, ckpt.params().num_params());
    let mut names: Vec<&str> = index.iter().map(|e| e.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), index.len());
}

#[test]
fn tampering_is_rejected() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();

    let blob_path = dir.path().join(BLOB_FILE);
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[0] ^= 1;
    std::fs::write(&blob_path, &blob).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
    blob[0] ^= 1;
    blob.truncate(blob.len() - 4);
    std::fs::write(&blob_path, &blob).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());

    ckpt.save(dir.path()).unwrap();
    let manifest_path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, text.replace("\"layers\": 2", "\"layers\": 3")).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn training_is_deterministic_and_improves() {
    let (model, diffusion) = tiny();
    let data = toy_dataset(8, 32, 4, 3).unwrap();
    let train = TrainConfig { steps: 60, batch_size: 4, lr: 3e-3, ..Default::default() };
    let a = train_toy(&data, &model, &diffusion, &train, None).unwrap();
    let b = train_toy(&data, &model, &diffusion, &train, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint, b.checkpoint);
    let head: f64 = a.losses[..10].iter().sum();
    let tail: f64 = a.losses[50..].iter().sum();
    assert!(tail < head, "loss did not decrease: {head} → {tail}");
    assert!(a.losses.iter().all(|l| *l >= 0.0));

    let s1 = sample(&a.checkpoint, Some(0), 32, 11).unwrap();
    let s2 = sample(&b.checkpoint, Some(0), 32, 11).unwrap();
    assert_eq!(s1.frames(), s2.frames());
}

#[test]
fn unconditional_training_ignores_class() {
    let (model, mut diffusion) = tiny();
    diffusion.cfg_mask_prob = 1.0;
    let data = toy_dataset(4, 32, 4, 3).unwrap();
    let swapped: Vec<_> = data.iter().map(|(s, c)| (s.clone(), 1 - c)).collect();
    let train = TrainConfig { steps: 5, batch_size: 2, ..Default::default() };
    let a = train_toy(&data, &model, &diffusion, &train, None).unwrap();
    let b = train_toy(&swapped, &model, &diffusion, &train, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint, b.checkpoint);
}
