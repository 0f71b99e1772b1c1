use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repflow::synth::{shift_circular, texture};
use repflow::{tv_energy, tvl1_flow, FeatureMap, FlowField, TvParams};

fn params() -> impl Strategy<Value = TvParams> {
    (0.0f64..0.5, 0.0f64..2.0, 0.01f64..2.0).prop_map(|(tau, lambda, theta)| TvParams {
        tau,
        lambda,
        theta,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_frames_give_exactly_zero_flow(seed in any::<u64>(), n in 2usize..14, tv in params(), iters in 1usize..40) {
        let f: FeatureMap<f64> = texture(n, n + 1, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(tvl1_flow(&f, &f, &tv, iters).unwrap().is_zero());
    }

    #[test]
    fn runs_are_bitwise_identical(seed in any::<u64>(), dx in -2i64..=2, dy in -2i64..=2, iters in 1usize..30) {
        let f: FeatureMap<f32> = texture(10, 10, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = shift_circular(&f, dx, dy);
        let a = tvl1_flow(&f, &g, &TvParams::default(), iters).unwrap();
        let b = tvl1_flow(&f, &g, &TvParams::default(), iters).unwrap();
        let bits = |u: &FlowField<f32>| u.ux.data().iter().chain(u.uy.data()).map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn solve_does_not_increase_energy(seed in any::<u64>(), dx in -1i64..=1, dy in -1i64..=1) {
        let f: FeatureMap<f64> = texture(24, 24, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = shift_circular(&f, dx, dy);
        let tv = TvParams::default();
        let u = tvl1_flow(&f, &g, &tv, 100).unwrap();
        let e0 = tv_energy(&FlowField::zeros(24, 24), &f, &g, tv.lambda).unwrap();
        prop_assert!(tv_energy(&u, &f, &g, tv.lambda).unwrap() <= e0);
    }
}

#[test]
fn zero_flow_energy_is_weighted_frame_difference() {
    let f: FeatureMap<f64> = texture(8, 8, &mut ChaCha8Rng::seed_from_u64(1));
    let g = shift_circular(&f, 1, 0);
    let expected: f64 = f
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * 0.15;
    let e = tv_energy(&FlowField::zeros(8, 8), &f, &g, 0.15).unwrap();
    assert!((e - expected).abs() <= 1e-9 * expected);
    assert_eq!(
        tv_energy(&FlowField::zeros(8, 8), &f, &f, 0.15).unwrap(),
        0.0
    );
}

#[test]
fn flat_frames_with_different_levels_stay_finite() {
    let a = FeatureMap::<f32>::filled(1, 9, 9, 10.0);
    let b = FeatureMap::<f32>::filled(1, 9, 9, 200.0);
    assert!(tvl1_flow(&a, &b, &TvParams::default(), 50)
        .unwrap()
        .is_finite());
}
