use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rhythm_ssm::baseline::{linear_diff_cross_attention, vanilla_mamba_block};
use rhythm_ssm::pdcam::*;
use rhythm_ssm::ps_mamba::*;
use rhythm_ssm::Matrix;

fn noise(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssm_reduces_to_vanilla(seed in 0u64..10_000, len in 2usize..24, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = SsmDims { d_model: d, d_inner: 2 * d, d_state: 3 };
        let p = PsMambaParams::init(&dims, &mut rng);
        let x = noise(&mut rng, len, d);
        let out = ps_mamba_block(&x, &vec![1.0; len], &Array2::zeros((len, 2)), &p).unwrap();
        prop_assert!(max_diff(&out, &vanilla_mamba_block(&x, &p)) <= 1e-12);
    }

    #[test]
    fn pdcam_reduces_to_plain(seed in 0u64..10_000, lm in 1usize..12, lt in 1usize..6, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let mut p = PdcamParams::init(d, heads, &mut rng).unwrap();
        p.beta.fill(0.0);
        p.lambda_q2 = noise(&mut rng, heads, 2) * 0.3;
        p.lambda_k2 = noise(&mut rng, heads, 2) * 0.3;
        let x = noise(&mut rng, lm, d);
        let t = noise(&mut rng, lt, d);
        let phi: Vec<f64> = (0..lm).map(|_| rng.gen_range(0.0..6.28)).collect();
        let out = multi_head_pdcam(&x, &t, &vec![1.0; lm], &phi, &p, SoftmaxAxes::Efficient).unwrap();
        prop_assert!(max_diff(&out, &linear_diff_cross_attention(&x, &t, &p)) <= 1e-12);
    }

    #[test]
    fn rotation_preserves_pair_norms(seed in 0u64..10_000, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q1, q2) = (noise(&mut rng, 7, 3), noise(&mut rng, 7, 3));
        let phi: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..6.28)).collect();
        let (r1, r2) = phase_rotate(&q1, &q2, &phi, beta).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let before = q1[[i, j]].hypot(q2[[i, j]]);
                let after = r1[[i, j]].hypot(r2[[i, j]]);
                prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before));
            }
        }
    }

    #[test]
    fn text_permutation_invariance(seed in 0u64..10_000, lt in 2usize..7) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PdcamParams::init(4, 2, &mut rng).unwrap();
        p.alpha_imp.fill(0.4);
        let x = noise(&mut rng, 6, 4);
        let t = noise(&mut rng, lt, 4);
        let m: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let phi: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..6.28)).collect();
        let mut perm: Vec<usize> = (0..lt).collect();
        perm.shuffle(&mut rng);
        let tp = Array2::from_shape_fn(t.dim(), |(i, j)| t[[perm[i], j]]);
        for axes in [SoftmaxAxes::Efficient, SoftmaxAxes::PaperLiteral] {
            let a = multi_head_pdcam(&x, &t, &m, &phi, &p, axes).unwrap();
            let b = multi_head_pdcam(&x, &tp, &m, &phi, &p, axes).unwrap();
            prop_assert!(max_diff(&a, &b) <= 1e-12);
        }
    }

    #[test]
    fn outputs_finite_for_equal_tokens(seed in 0u64..10_000, v in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PdcamParams::init(4, 2, &mut rng).unwrap();
        let x = noise(&mut rng, 5, 4) * 20.0;
        let t = Array2::from_elem((3, 4), v);
        for axes in [SoftmaxAxes::Efficient, SoftmaxAxes::PaperLiteral] {
            let out = multi_head_pdcam(&x, &t, &[1.0; 5], &[0.5; 5], &p, axes).unwrap();
            prop_assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn lambda_at_init(alpha in -2.0f64..2.0, m in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let mut p = PdcamParams::init(4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.alpha_imp.fill(alpha);
        let (_, lam) = token_lambda(&p, &m);
        for (l, mi) in lam.iter().zip(&m) {
            prop_assert!((l - LAMBDA_INIT * (1.0 + alpha * (mi - 1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_states_stay_bounded(seed in 0u64..10_000, len in 50usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = SsmDims { d_model: 3, d_inner: 4, d_state: 3 };
        let p = PsMambaParams::init(&dims, &mut rng);
        let x = Array2::from_shape_simple_fn((len, 4), || rng.gen_range(-1.0..1.0));
        let m = vec![1.0; len];
        let bound = max_state_magnitude(&x, &p.fwd, &m);
        // Repeating the input must not let the states grow without bound.
        let long = Array2::from_shape_fn((4 * len, 4), |(i, j)| x[[i % len, j]]);
        let long_bound = max_state_magnitude(&long, &p.fwd, &vec![1.0; 4 * len]);
        prop_assert!(bound.is_finite() && long_bound.is_finite());
        prop_assert!(long_bound < 10.0 * bound.max(1e-9) + 10.0);
    }
}
