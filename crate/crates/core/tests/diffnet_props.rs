use gesf_core::diffnet::gradcheck::{central_difference, relative_error};
use gesf_core::diffnet::{
    logistic_label, softmax_ce, Activation, Mlp, Optimizer, OptimizerState, ParamStore, Parameters,
};
use ndarray::Array2;
use proptest::prelude::*;

fn arb_dims() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..6, 2..5)
}

fn arb_activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Identity)]
}

fn input(dim: usize, seed: u64) -> Vec<f64> {
    (0..dim).map(|i| ((i as f64 + 1.3) * (seed as f64 + 0.7)).sin() * 2.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn mlp_gradients_match_finite_differences(dims in arb_dims(), act in arb_activation(), seed in any::<u64>()) {
        let net = Mlp::init(&dims, act, seed).unwrap();
        let x = input(dims[0], seed);
        let w = input(*dims.last().unwrap(), seed ^ 1);
        let dot = |y: &[f64]| y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &w).unwrap();
        let numeric = central_difference(
            |p| {
                let mut probe = net.clone();
                probe.assign(p);
                dot(&probe.forward(&x).unwrap().0)
            },
            &net.flatten(),
            1e-6,
        );
        prop_assert!(relative_error(&grads.flatten(), &numeric) <= 1e-5);
        let numeric_x = central_difference(|xp| dot(&net.forward(xp).unwrap().0), &x, 1e-6);
        prop_assert!(relative_error(&dx, &numeric_x) <= 1e-5);
    }

    #[test]
    fn batch_backward_sums_per_sample_gradients(dims in arb_dims(), seed in any::<u64>(), rows in 1usize..5) {
        let net = Mlp::init(&dims, Activation::Tanh, seed).unwrap();
        let d = dims[0];
        let out = *dims.last().unwrap();
        let x = Array2::from_shape_fn((rows, d), |(i, j)| input(d, seed + i as u64)[j]);
        let dy = Array2::from_shape_fn((rows, out), |(i, j)| input(out, seed ^ (i as u64 + 9))[j]);
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (g, dx) = net.backward_batch(&cache, dy.view()).unwrap();
        let mut total = vec![0.0; net.parameter_count()];
        for i in 0..rows {
            let (_, c) = net.forward(&x.row(i).to_vec()).unwrap();
            let (gi, dxi) = net.backward(&c, &dy.row(i).to_vec()).unwrap();
            for (t, v) in total.iter_mut().zip(gi.flatten()) {
                *t += v;
            }
            for (a, b) in dx.row(i).iter().zip(&dxi) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        for (a, b) in g.flatten().iter().zip(&total) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn tanh_hidden_values_are_bounded(dims in arb_dims(), seed in any::<u64>(), scale in 1.0f64..1e3) {
        let net = Mlp::init(&dims, Activation::Tanh, seed).unwrap();
        let x: Vec<f64> = input(dims[0], seed).iter().map(|v| v * scale).collect();
        let (_, cache) = net.forward(&x).unwrap();
        for i in 1..dims.len() - 1 {
            prop_assert!(cache.layer_input(i).iter().all(|h| h.abs() <= 1.0));
        }
    }

    #[test]
    fn softmax_ce_is_shift_invariant(
        logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
        shift in -100.0f64..100.0,
        pick in any::<usize>(),
    ) {
        let c = pick % logits.len();
        let (l0, g0) = softmax_ce(&logits, c).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let (l1, g1) = softmax_ce(&shifted, c).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0));
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(g0.iter().sum::<f64>().abs() <= 1e-12);
        // Finite differences lose all precision once the softmax saturates.
        let moderate: Vec<f64> = logits.iter().map(|z| z / 4.0).collect();
        let (_, gm) = softmax_ce(&moderate, c).unwrap();
        let numeric = central_difference(|z| softmax_ce(z, c).unwrap().0, &moderate, 1e-6);
        prop_assert!(relative_error(&gm, &numeric) <= 1e-5);
    }

    #[test]
    fn logistic_label_difference_is_minus_score(s in -50.0f64..50.0) {
        let (l1, d1) = logistic_label(s, true).unwrap();
        let (l0, d0) = logistic_label(s, false).unwrap();
        prop_assert!((l1 - l0 + s).abs() <= 1e-12 * s.abs().max(1.0));
        prop_assert!(l0 >= 0.0 && l1 >= 0.0);
        let n1 = central_difference(|z| logistic_label(z[0], true).unwrap().0, &[s], 1e-6)[0];
        let n0 = central_difference(|z| logistic_label(z[0], false).unwrap().0, &[s], 1e-6)[0];
        prop_assert!((d1 - n1).abs() <= 1e-7 && (d0 - n0).abs() <= 1e-7);
    }

    #[test]
    fn flatten_assign_and_param_store_round_trip(dims in arb_dims(), seed in any::<u64>()) {
        let net = Mlp::init(&dims, Activation::Tanh, seed).unwrap();
        let mut other = net.zeros_like();
        other.assign(&net.flatten());
        prop_assert_eq!(&other, &net);

        let mut store = ParamStore::default();
        store.insert_all("net", &net);
        let text = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        let mut restored = net.zeros_like();
        back.restore("net", &mut restored).unwrap();
        prop_assert_eq!(restored, net);
    }
}

#[test]
fn optimizers_descend_a_quadratic() {
    // f(W) = |W|^2 / 2 with gradient W.
    for kind in [Optimizer::Sgd, Optimizer::Momentum, Optimizer::Adam] {
        let mut net = Mlp::init(&[3, 2], Activation::Identity, 5).unwrap();
        let start: f64 = net.flatten().iter().map(|x| x * x).sum();
        let mut state = OptimizerState::new(kind, net.parameter_count());
        for _ in 0..300 {
            let grads = net.clone();
            state.step(&mut net, &grads, 0.05);
        }
        let end: f64 = net.flatten().iter().map(|x| x * x).sum();
        assert!(end < 1e-2 * start, "{kind:?}: {start} -> {end}");
    }
}
