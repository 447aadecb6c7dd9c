use ndarray::Array2;
use proptest::prelude::*;
use rhythm_ssm::motion::MotionSequence;
use rhythm_ssm::saliency::*;

fn frames(max_len: usize, dims: usize) -> impl Strategy<Value = Array2<f64>> {
    (6..max_len).prop_flat_map(move |len| {
        prop::collection::vec(-5.0f64..5.0, len * dims).prop_map(move |v| Array2::from_shape_vec((len, dims), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn selection_is_scale_invariant(x in frames(40, 3), c in 0.1f64..10.0) {
        let base = detect_keyframes(x.view(), 0.015).unwrap();
        let scaled = detect_keyframes(x.mapv(|v| v * c).view(), 0.015).unwrap();
        prop_assert_eq!(&base.keyframe_local_indices, &scaled.keyframe_local_indices);
        let c2 = c * c;
        for i in 0..base.rho.len() {
            prop_assert!((base.rho[i] - scaled.rho[i]).abs() < 1e-9);
            prop_assert!((base.delta[i] * c2 - scaled.delta[i]).abs() <= 1e-9 * (1.0 + scaled.delta[i]));
        }
    }

    #[test]
    fn statistics_permute_with_frames(x in frames(30, 2), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..x.nrows()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permuted = Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]]);
        let a = detect_keyframes(x.view(), 0.015).unwrap();
        let b = detect_keyframes(permuted.view(), 0.015).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((b.rho[i] - a.rho[p]).abs() < 1e-9);
            // Tied densities are ranked by index, so only untied non-peak frames keep their delta.
            if a.rho.iter().filter(|&&r| r >= a.rho[p]).count() > 1 {
                let ties = a.rho.iter().filter(|&&r| (r - a.rho[p]).abs() < 1e-12).count();
                if ties == 1 {
                    prop_assert!((b.delta[i] - a.delta[p]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn weight_vector_contract(x in frames(80, 3), segments in 1usize..4) {
        let seq = MotionSequence::new(x, 20.0, "p").unwrap();
        let segments = segments.min(seq.len() / 2);
        let kw = keyframe_weights(&seq, segments, &SaliencyConfig::default()).unwrap();
        prop_assert_eq!(kw.weights.len(), seq.len());
        for (i, w) in kw.weights.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(w));
            if !kw.keyframes.contains(&i) {
                prop_assert_eq!(*w, 1.0);
            }
        }
        for diag in &kw.per_segment {
            let m = diag.rho.len() as f64;
            prop_assert!(diag.rho.iter().all(|&r| (0.0..=m - 1.0 + 1e-9).contains(&r)));
            prop_assert!(diag.gamma.iter().all(|&g| g >= 0.0));
        }
    }
}
