//! Differentiable operations against the plain pixel-space implementations.

use augsearch_autodiff::Tensor;
use augsearch_core::augment::{self, OpDraws};
use augsearch_core::{reference, OpKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c, h, w], |_| rng.gen())
}

/// Largest per-pixel deviation over several magnitudes, each with its own
/// random draws.
fn worst_deviation(kind: OpKind, x: &Tensor, seed: u64) -> f32 {
    let s = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for mu in [0.0, 0.17, 0.5, 0.73, 1.0, rng.gen()] {
        let draws = OpDraws::sample(kind, s[0], s[2], s[3], &mut rng);
        let ours = augment::apply_value(kind, x, mu, &draws).unwrap();
        let oracle = reference::apply(kind, x, mu, &draws);
        worst = worst.max(ours.max_abs_diff(&oracle));
    }
    worst
}

#[test]
fn every_op_matches_the_pixel_space_oracle() {
    let x = random_images(50, 3, 16, 16, 1);
    for (i, &kind) in OpKind::ALL.iter().enumerate() {
        let d = worst_deviation(kind, &x, 10 + i as u64);
        assert!(d <= 1e-5, "{}: {d:e}", kind.name());
    }
}

#[test]
fn oracle_agreement_holds_on_non_square_single_channel_images() {
    let x = random_images(4, 1, 5, 9, 2);
    for &kind in &OpKind::ALL {
        let d = worst_deviation(kind, &x, 3);
        assert!(d <= 1e-5, "{}: {d:e}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_stay_in_unit_range_and_keep_shape(
        op in 0usize..17,
        mu in 0.0f32..=1.0,
        seed in any::<u64>(),
    ) {
        let kind = OpKind::ALL[op];
        let x = random_images(3, 3, 8, 8, seed);
        let draws = OpDraws::sample(kind, 3, 8, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = augment::apply_value(kind, &x, mu, &draws).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn oracle_agreement_on_random_magnitudes(
        op in 0usize..17,
        mu in 0.0f32..=1.0,
        seed in any::<u64>(),
    ) {
        let kind = OpKind::ALL[op];
        let x = random_images(2, 3, 7, 6, seed);
        let draws = OpDraws::sample(kind, 2, 7, 6, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let ours = augment::apply_value(kind, &x, mu, &draws).unwrap();
        let oracle = reference::apply(kind, &x, mu, &draws);
        prop_assert!(ours.max_abs_diff(&oracle) <= 1e-5);
    }
}

/// Ops whose output pixels are selected, thresholded or reordered input
/// pixels (no arithmetic blend) must agree bit for bit.
const ROUTING_OPS: [OpKind; 7] = [
    OpKind::Flip,
    OpKind::Invert,
    OpKind::Solarize,
    OpKind::Posterize,
    OpKind::Cutout,
    OpKind::AutoContrast,
    OpKind::Equalize,
];

#[test]
fn routing_ops_match_the_oracle_exactly() {
    let x = random_images(50, 3, 16, 16, 1);
    for (i, &kind) in ROUTING_OPS.iter().enumerate() {
        assert_eq!(worst_deviation(kind, &x, 40 + i as u64), 0.0, "{}", kind.name());
    }
}
