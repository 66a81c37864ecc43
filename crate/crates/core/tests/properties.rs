use nth_lab_core::dynamics::{flow_step, grad_theta_f, loss, sample_grads, FlowState, Scheme};
use nth_lab_core::kernel::{
    g3_kernel, kernel_regression_predict, layer_kernel_from_grads, snapshot_from_grads, GramMatrix, KernelKind,
};
use nth_lab_core::limitgram::{build_limit_stack, quantile};
use nth_lab_core::linalg::dot;
use nth_lab_core::model::{compute_c_sigma, forward, init_params};
use nth_lab_core::quadrature::GaussHermite;
use nth_lab_core::{Activation, Dataset, Matrix, NetworkConfig};
use proptest::prelude::*;

fn config(m: usize, depth: usize) -> NetworkConfig {
    NetworkConfig::new(4, m, depth, 0.5, Activation::Softplus).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_datasets_are_valid(n in 1usize..10, d in 2usize..6, seed in any::<u64>()) {
        let ds = Dataset::generate(n, d, seed).unwrap();
        prop_assert_eq!(ds.n(), n);
        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
            prop_assert!((dot(x, x) - 1.0).abs() < 1e-12);
            prop_assert!(y.abs() <= 1.0);
        }
        prop_assert_eq!(Dataset::generate(n, d, seed).unwrap(), ds);
    }

    #[test]
    fn ntk_is_symmetric_psd_and_splits_by_layer(seed in any::<u64>(), m in 4usize..24, depth in 2usize..5, n in 1usize..6) {
        let c = config(m, depth);
        let p = init_params(&c, seed);
        let ds = Dataset::generate(n, 4, seed ^ 1).unwrap();
        let grads = sample_grads(&c, &p, &ds).unwrap();
        let snap = snapshot_from_grads(0.0, &grads, true).unwrap();
        let flat: Vec<Vec<f64>> = ds
            .inputs
            .iter()
            .map(|x| grad_theta_f(&c, &p, &forward(&c, &p, x).unwrap()).flatten())
            .collect();
        let layers = snap.per_layer.as_ref().unwrap();
        prop_assert_eq!(layers.len(), depth + 1);
        for i in 0..n {
            for j in 0..n {
                let direct = dot(&flat[i], &flat[j]);
                let split: f64 = layers.iter().map(|g| g.get(i, j)).sum();
                prop_assert!((direct - snap.k2.get(i, j)).abs() <= 1e-9 * direct.abs().max(1.0));
                prop_assert!((split - snap.k2.get(i, j)).abs() <= 1e-12 * split.abs().max(1.0));
                prop_assert_eq!(snap.k2.get(i, j), snap.k2.get(j, i));
            }
        }
        prop_assert!(snap.lambda_min >= -1e-10 * snap.k2.trace());
        for l in 1..=depth + 1 {
            prop_assert!(layer_kernel_from_grads(&grads, l).unwrap().lambda_min().unwrap() >= -1e-10);
        }
    }

    #[test]
    fn g3_symmetric_in_first_pair(seed in any::<u64>(), n in 1usize..5) {
        let c = config(12, 3);
        let p = init_params(&c, seed);
        let ds = Dataset::generate(n, 4, seed.wrapping_add(3)).unwrap();
        let grads = sample_grads(&c, &p, &ds).unwrap();
        let g3 = g3_kernel(&c, &p, &grads);
        prop_assert!(g3.max_asymmetry() <= 1e-12 * g3.max_abs().max(1.0));
    }

    #[test]
    fn flow_never_increases_loss(seed in any::<u64>(), step in 0.01f64..0.2) {
        let c = config(16, 2);
        let ds = Dataset::generate(4, 4, seed ^ 7).unwrap();
        let mut state = FlowState::new(init_params(&c, seed), step, Scheme::Rk4).unwrap();
        let mut prev = loss(&c, &state.params, &ds).unwrap();
        for _ in 0..5 {
            let out = flow_step(&state, &c, &ds).unwrap();
            prop_assert!(out.loss_after <= prev + 1e-12);
            prev = out.loss_after;
            state = out.state;
        }
    }

    #[test]
    fn frozen_kernel_residual_norm_decreases(seed in any::<u64>(), t in 0.0f64..20.0) {
        let n = 5;
        let mut rng = nth_lab_core::GaussianRng::new(seed);
        let b = Matrix::from_fn(n, n, |_, _| rng.normal());
        let k = GramMatrix::new(KernelKind::EmpiricalK2, b.matmul(&b.transpose()).unwrap()).unwrap();
        let r0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let a = kernel_regression_predict(&k, &r0, t, n).unwrap();
        let later = kernel_regression_predict(&k, &r0, t + 1.0, n).unwrap();
        prop_assert!(a.norm2() <= dot(&r0, &r0).sqrt() * (1.0 + 1e-12));
        prop_assert!(later.norm2() <= a.norm2() * (1.0 + 1e-12));
    }

    #[test]
    fn quantiles_are_monotone(v in prop::collection::vec(-1e6f64..1e6, 1..40), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(quantile(&v, lo) <= quantile(&v, hi));
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(quantile(&v, 0.0), min);
        prop_assert_eq!(quantile(&v, 1.0), max);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn limit_stack_invariants(seed in any::<u64>(), n in 2usize..6, depth in 2usize..6) {
        let ds = Dataset::generate(n, 4, seed).unwrap();
        let act = Activation::Softplus;
        let cs = compute_c_sigma(act).unwrap();
        let s = build_limit_stack(&ds, act, 0.5, cs, depth).unwrap();
        for l in 1..=depth {
            let k = s.ktilde(l);
            let b = s.btilde(l);
            for i in 0..n {
                prop_assert!((k.get(i, i) - k.get(0, 0)).abs() <= 1e-10);
                prop_assert!(b[i] * b[i] < k.get(i, i));
            }
        }
        prop_assert!((s.ktilde(1).get(0, 0) - 1.0).abs() <= 1e-8);
        prop_assert!(s.hierarchy.windows(2).all(|w| w[1] > w[0]), "{:?}", s.hierarchy);
        prop_assert!(s.lambda0 > 0.0);
        prop_assert!(s.k_l1.lambda_min().unwrap() > s.lambda0);
    }

    #[test]
    fn gauss_hermite_integrates_polynomials(k in 0u32..20) {
        let gh = GaussHermite::new(30);
        let exact: f64 = if k % 2 == 1 { 0.0 } else { (1..k).step_by(2).map(f64::from).product() };
        let got = gh.expect1(|x| x.powi(k as i32));
        // rounding scales with the absolute moment, which is what odd k cancel
        let scale = gh.expect1(|x| x.abs().powi(k as i32));
        prop_assert!((got - exact).abs() <= 1e-12 * scale, "k = {} got {} want {}", k, got, exact);
    }
}
