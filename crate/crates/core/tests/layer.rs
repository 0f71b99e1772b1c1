use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repflow::gradcheck::{run_gradcheck, GradcheckConfig};
use repflow::layer::*;
use repflow::synth::{shift_circular, texture};
use repflow::tensor::{ConvLayer, PaddingSpec};
use repflow::{tvl1_flow, FeatureMap, FlowField, TvParams};

fn pair(seed: u64, n: usize, dx: i64) -> (FeatureMap<f64>, FeatureMap<f64>) {
    let f1: FeatureMap<f64> = texture(n, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let f2 = shift_circular(&f1, dx, 0);
    (f1, f2)
}

fn random_features(rng: &mut ChaCha8Rng, c: usize, n: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(c, n, n, |_, _, _| rng.gen_range(-0.5..0.5))
}

#[test]
fn forward_matches_reference_solver() {
    let (f1, f2) = pair(11, 16, 1);
    let params = FlowParams::<f64>::default();
    for iters in [1, 5, 10, 20, 50, 100] {
        let (u, _) = rep_flow_forward(&f1, &f2, &params, iters).unwrap();
        let oracle = tvl1_flow(&f1, &f2, &params.tv(), iters).unwrap();
        let err = u.relative_error(&oracle);
        assert!(err < 1e-10, "iterations {iters}: {err:e}");
    }
}

#[test]
fn forward_matches_reference_at_other_scalars() {
    let (f1, f2) = pair(5, 16, -1);
    let tv = TvParams {
        tau: 0.1,
        lambda: 0.4,
        theta: 0.7,
    };
    let params = FlowParams::<f64>::from_tv(&tv);
    let (u, _) = rep_flow_forward(&f1, &f2, &params, 30).unwrap();
    let oracle = tvl1_flow(&f1, &f2, &tv, 30).unwrap();
    assert!(u.relative_error(&oracle) < 1e-10);
}

#[test]
fn identical_frames_stay_inside_and_tau_gradient_vanishes() {
    let (f1, _) = pair(2, 12, 0);
    let params = FlowParams::<f64>::default();
    let (u, tape) = rep_flow_forward(&f1, &f1, &params, 8).unwrap();
    assert!(u.is_zero());
    assert!(tape.final_dual().is_zero());
    for rec in tape.records() {
        assert!(rec.branch.iter().all(|b| *b == Branch::Inside));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let up = FlowField::new(
        random_features(&mut rng, 1, 12),
        random_features(&mut rng, 1, 12),
    )
    .unwrap();
    let g = rep_flow_backward(&tape, &up).unwrap();
    assert_eq!(g.params.d_tau, 0.0);
}

#[test]
fn zero_tau_keeps_dual_at_zero() {
    let (f1, f2) = pair(9, 10, 1);
    let params = FlowParams::<f64> {
        tau: 0.0,
        ..FlowParams::default()
    };
    let (u, tape) = rep_flow_forward(&f1, &f2, &params, 1).unwrap();
    assert!(tape.final_dual().is_zero());

    // u = v computed directly from the thresholding step at u = 0
    let lt = params.lambda * params.theta;
    let gx = repflow::tensor::conv2d(&f2, &params.sobel_x, &PaddingSpec::replicate(1)).unwrap();
    let gy = repflow::tensor::conv2d(&f2, &params.sobel_y, &PaddingSpec::replicate(1)).unwrap();
    for i in 0..f1.len() {
        let (a, b) = (gx.data()[i], gy.data()[i]);
        let g2 = a * a + b * b;
        let rho = f2.data()[i] - f1.data()[i];
        let (vx, vy) = if rho < -lt * g2 {
            (lt * a, lt * b)
        } else if rho > lt * g2 {
            (-lt * a, -lt * b)
        } else {
            let s = rho / (g2 + 1e-12);
            (-s * a, -s * b)
        };
        assert!((u.ux.data()[i] - vx).abs() < 1e-12);
        assert!((u.uy.data()[i] - vy).abs() < 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (f1, f2) = pair(3, 12, 1);
    let (_, tape) = rep_flow_forward(&f1, &f2, &FlowParams::default(), 6).unwrap();
    let g = rep_flow_backward(&tape, &FlowField::zeros(12, 12)).unwrap();
    assert_eq!(g.params, FlowParamGrads::zeros());
    assert!(g.d_f1.data().iter().chain(g.d_f2.data()).all(|v| *v == 0.0));
}

#[test]
fn backward_rejects_mismatched_upstream() {
    let (f1, f2) = pair(3, 12, 1);
    let (_, tape) = rep_flow_forward(&f1, &f2, &FlowParams::default(), 2).unwrap();
    assert!(rep_flow_backward(&tape, &FlowField::zeros(12, 11)).is_err());
}

#[test]
fn forward_rejects_bad_inputs() {
    let (f1, f2) = pair(3, 8, 1);
    let p = FlowParams::<f64>::default();
    assert!(rep_flow_forward(&f1, &FeatureMap::zeros(1, 8, 7), &p, 3).is_err());
    assert!(rep_flow_forward(&f1, &f2, &p, 0).is_err());
    let mut bad = f2.clone();
    bad.data_mut()[5] = f64::INFINITY;
    assert!(rep_flow_forward(&f1, &bad, &p, 3).is_err());
}

#[test]
fn more_iterations_approach_the_converged_flow() {
    let (f1, f2) = pair(21, 24, 1);
    let p = FlowParams::<f64>::default();
    let oracle = tvl1_flow(&f1, &f2, &p.tv(), 100).unwrap();
    let e10 = rep_flow_forward(&f1, &f2, &p, 10)
        .unwrap()
        .0
        .mean_endpoint_error(&oracle)
        .unwrap();
    let e100 = rep_flow_forward(&f1, &f2, &p, 100)
        .unwrap()
        .0
        .mean_endpoint_error(&oracle)
        .unwrap();
    assert!(e10 > e100, "{e10} vs {e100}");
}

#[test]
fn layer_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, cp) in [(4, 2), (1, 1), (3, 5)] {
        let w = LayerWeights::random(c, cp, 3, &mut rng);
        let ft = random_features(&mut rng, c, 9);
        let ft1 = random_features(&mut rng, c, 9);
        let (out, tape) = layer_forward_taped(&ft, &ft1, &w).unwrap();
        assert_eq!(out.shape(), ft.shape());
        assert_eq!(tape.flow_stack().channels(), 2 * cp);
    }
}

#[test]
fn layer_rejects_channel_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = LayerWeights::random(4, 2, 3, &mut rng);
    let ft = random_features(&mut rng, 3, 8);
    assert!(layer_forward(&ft, &ft, &w).is_err());
}

#[test]
fn identical_layer_inputs_give_bias_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut w = LayerWeights::random(3, 2, 5, &mut rng);
    let ft = random_features(&mut rng, 3, 10);
    let (out, tape) = layer_forward_taped(&ft, &ft, &w).unwrap();
    assert!(tape.flow_stack().data().iter().all(|v| *v == 0.0));
    assert!(out.data().iter().all(|v| *v == 0.0));
    w.expand.bias = vec![0.5, -1.0, 2.0];
    let out = layer_forward(&ft, &ft, &w).unwrap();
    for c in 0..3 {
        assert!(out.channel(c).iter().all(|v| *v == w.expand.bias[c]));
    }
}

#[test]
fn layer_matches_hand_composed_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (c, cp, iters) = (8, 4, 10);
    let w = LayerWeights::random(c, cp, iters, &mut rng);
    let ft = random_features(&mut rng, c, 12);
    let ft1 = random_features(&mut rng, c, 12);
    let out = layer_forward(&ft, &ft1, &w).unwrap();

    let rt = normalize_255(&w.reduce.forward(&ft).unwrap()).unwrap().0;
    let rt1 = normalize_255(&w.reduce.forward(&ft1).unwrap()).unwrap().0;
    let mut planes = Vec::new();
    for k in 0..cp {
        let u = tvl1_flow(&rt.plane(k), &rt1.plane(k), &TvParams::default(), iters).unwrap();
        planes.push(u.ux);
        planes.push(u.uy);
    }
    let expected = w
        .expand
        .forward(&FeatureMap::stack(&planes).unwrap())
        .unwrap();
    let scale = expected.max_abs();
    for (a, b) in out.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-10 * scale);
    }
}

#[test]
fn layer_and_flow_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = LayerWeights::random(3, 3, 7, &mut rng);
    let ft = random_features(&mut rng, 3, 11);
    let ft1 = random_features(&mut rng, 3, 11);
    let r = random_features(&mut rng, 3, 11);
    let run = || {
        let (out, tape) = layer_forward_taped(&ft, &ft1, &w).unwrap();
        (out, layer_backward(&tape, &w, &r).unwrap())
    };
    let (o1, g1) = run();
    let (o2, g2) = run();
    assert_eq!(o1, o2);
    assert_eq!(g1, g2);
}

#[test]
fn fcf_identical_frames_give_stage_b_zero_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let wa = LayerWeights::random(2, 2, 5, &mut rng);
    let wb = LayerWeights::random(2, 2, 5, &mut rng);
    let mid = ConvLayer::random(2, 2, 3, 3, PaddingSpec::replicate(1), &mut rng);
    let f = random_features(&mut rng, 2, 10);
    let (out, tape) = flow_conv_flow_taped(&f, &f, &f, &wa, &mid, &wb).unwrap();
    let (a1, a2) = tape.stage_a_flows();
    assert!(a1.data().iter().chain(a2.data()).all(|v| *v == 0.0));
    assert!(tape.stage_b_flows().data().iter().all(|v| *v == 0.0));
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn fcf_rejects_mismatched_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let wa = LayerWeights::random(2, 2, 2, &mut rng);
    let mid = ConvLayer::random(2, 2, 3, 3, PaddingSpec::replicate(1), &mut rng);
    let f = random_features(&mut rng, 2, 10);
    let g = random_features(&mut rng, 2, 9);
    assert!(flow_conv_flow(&f, &f, &g, &wa, &mid, &wa).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for iterations in [1, 5, 10] {
        let report = run_gradcheck(&GradcheckConfig {
            iterations,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(
            report.passed(),
            "iterations {iterations}: {:?}",
            report.failing()
        );
        assert_eq!(report.leaves.len(), 13);
    }
}

#[test]
fn scalar_gradient_matches_finite_difference_for_sum_loss() {
    let (f1, f2) = pair(31, 16, 1);
    let p = FlowParams::<f64>::default();
    let (_, tape) = rep_flow_forward(&f1, &f2, &p, 10).unwrap();
    let ones = FeatureMap::filled(1, 16, 16, 1.0);
    let g = rep_flow_backward(&tape, &FlowField::new(ones.clone(), ones).unwrap()).unwrap();
    let loss = |theta: f64| {
        let q = FlowParams { theta, ..p.clone() };
        let u = rep_flow_forward(&f1, &f2, &q, 10).unwrap().0;
        u.ux.sum() + u.uy.sum()
    };
    let h = 1e-6;
    let fd = (loss(p.theta + h) - loss(p.theta - h)) / (2.0 * h);
    assert!(
        (fd - g.params.d_theta).abs() / fd.abs() < 1e-4,
        "{fd} vs {}",
        g.params.d_theta
    );
}

#[test]
fn optimizer_moves_learnable_flow_leaves_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut w = LayerWeights::random(2, 2, 5, &mut rng);
    w.flow.learn = LearnFlags::DIVERGENCE_AND_SCALARS;
    let before = w.clone();
    let ft = random_features(&mut rng, 2, 10);
    let ft1 = shift_circular(&ft, 1, 0);
    let r = random_features(&mut rng, 2, 10);
    let (_, tape) = layer_forward_taped(&ft, &ft1, &w).unwrap();
    let g = layer_backward(&tape, &w, &r).unwrap();
    let mut state = LayerMomentum::zeros_like(&w);
    step_layer(
        &mut w,
        &g,
        &Sgd {
            lr: 0.5,
            ..Sgd::default()
        },
        &mut state,
    )
    .unwrap();
    assert_ne!(w.flow.theta, before.flow.theta);
    assert_ne!(w.flow.w_x, before.flow.w_x);
    assert_eq!(w.flow.sobel_x, before.flow.sobel_x);
    assert_eq!(w.flow.sobel_y, before.flow.sobel_y);
    assert_eq!(w.reduce.bias, before.reduce.bias);
    assert_ne!(w.expand.weights, before.expand.weights);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identical_frames_are_a_fixed_point(
        seed in any::<u64>(),
        tau in 0.01f64..2.0,
        lambda in 0.01f64..2.0,
        theta in 0.01f64..2.0,
        wx in prop::array::uniform2(-2.0f64..2.0),
        iters in 1usize..20,
    ) {
        let mut p = FlowParams::<f64>::from_tv(&TvParams { tau, lambda, theta });
        p.w_x.weights_mut().copy_from_slice(&wx);
        let f: FeatureMap<f64> = texture(8, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let (u, _) = rep_flow_forward(&f, &f, &p, iters).unwrap();
        prop_assert!(u.is_zero());
    }

    #[test]
    fn layer_output_shape_equals_input(c in 1usize..5, cp in 1usize..5, n in 3usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LayerWeights::random(c, cp, 2, &mut rng);
        let ft = random_features(&mut rng, c, n);
        let ft1 = random_features(&mut rng, c, n);
        prop_assert_eq!(layer_forward(&ft, &ft1, &w).unwrap().shape(), (c, n, n));
    }

    #[test]
    fn scalars_stay_positive_after_steps(g in prop::array::uniform3(-1e3f64..1e3), lr in 0.0f64..10.0) {
        let mut p = FlowParams::<f64>::default().with_learn(LearnFlags::ALL);
        let mut grads = FlowParamGrads::zeros();
        grads.d_tau = g[0];
        grads.d_lambda = g[1];
        grads.d_theta = g[2];
        let mut st = FlowMomentum::zeros();
        for _ in 0..5 {
            step_flow_params(&mut p, &grads, &Sgd { lr, ..Sgd::default() }, &mut st).unwrap();
        }
        prop_assert!(p.tau > 0.0 && p.lambda > 0.0 && p.theta > 0.0);
    }
}
