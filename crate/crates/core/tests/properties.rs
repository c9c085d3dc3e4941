mod common;

use common::props::*;
use latent_backdoor::defense::{gaussian_blur, gaussian_kernel};
use latent_backdoor::Tensor;
use proptest::prelude::*;

fn holds(check: Check) -> std::result::Result<(), TestCaseError> {
    check.map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trigger_matches_loop(seed in any::<u64>(), side in 1usize..=10, n in 1usize..4) {
        holds(trigger_matches_pixel_loop(seed, side, n))?;
    }

    #[test]
    fn mean_identity(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        holds(mean_identity_matches_pairwise_loop(seed, n, m))?;
    }

    #[test]
    fn phi_mean(seed in any::<u64>(), m in 1usize..8, layer in 1usize..=3) {
        holds(phi_is_feature_mean(seed, m, layer))?;
    }

    #[test]
    fn model_round_trip(seed in any::<u64>(), padded in any::<bool>(), frozen in 0usize..=3) {
        holds(model_bytes_round_trip(seed, padded, frozen))?;
    }

    #[test]
    fn trigger_round_trip(seed in any::<u64>(), side in 1usize..=10, layer in 1usize..4) {
        holds(trigger_bytes_round_trip(seed, side, layer))?;
    }

    #[test]
    fn wipe_confined_to_head(seed in any::<u64>()) {
        holds(wipe_touches_only_head(seed))?;
    }

    #[test]
    fn blur_preserves_constants(v in 0.0f64..1.0, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let kernel = gaussian_kernel(k, 1.0).unwrap();
        prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let x = Tensor::full(&[1, 1, 9, 9], v);
        let y = gaussian_blur(&x, k, 1.0).unwrap();
        prop_assert!(y.max_abs_diff(&x) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn frozen_layers_unchanged_by_fine_tune(seed in any::<u64>()) {
        holds(frozen_layers_byte_identical(seed))?;
    }

    #[test]
    fn fine_tune_deterministic(seed in any::<u64>()) {
        holds(fine_tune_is_deterministic(seed))?;
    }
}
