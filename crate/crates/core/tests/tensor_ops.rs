use pagn_core::tensor::gradcheck::{op_suite, DEFAULT_TOLERANCE};
use pagn_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    let report = op_suite(20, 11).unwrap();
    for r in &report {
        assert!(r.trials >= 20);
        assert!(r.passed(DEFAULT_TOLERANCE), "{}: max relative error {:e}", r.op, r.max_rel_err);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (3, 1, 3)] {
        let x = Tensor::<f64>::randn(&[2, 3, 7, 7], &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3, k, k], &mut rng);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let yshape = g.shape(y).to_vec();
        let probe = Tensor::<f64>::randn(&yshape, &mut rng);
        let lhs = g.value(y).dot(&probe).unwrap();

        // output padding that restores the original extent
        let h_back = (yshape[2] - 1) * stride + k - 2 * pad;
        let op = 7 - h_back;
        let pv = g.constant(probe);
        let xt = g.conv_transpose2d(pv, wv, None, stride, pad, op).unwrap();
        assert_eq!(g.shape(xt), x.shape());
        let rhs = g.value(xt).dot(&x).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "stride {stride} pad {pad}: {lhs} vs {rhs}");
    }
}

#[test]
fn batch_norm_momentum_one_copies_batch_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::randn(&[4, 2, 3, 3], &mut rng).map(|v| 2.0 * v + 1.0));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let mut running_mean = vec![0.0; 2];
    let mut running_var = vec![1.0; 2];
    let momentum = 1.0;
    for c in 0..2 {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * stats.var[c];
    }
    assert_eq!(running_mean, stats.mean);
    assert_eq!(running_var, stats.var);
    // per-channel batch mean of the normalized output is zero
    let d = g.value(y).data();
    for c in 0..2 {
        let m: f64 = (0..4).flat_map(|n| d[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter()).sum::<f64>() / 36.0;
        assert!(m.abs() <= 1e-5);
    }
    // eval with those statistics reproduces the train-mode output
    let z = g.batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(z).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[3, 2, 8, 8], &mut rng));
        let w = g.leaf(Tensor::randn(&[4, 2, 3, 3], &mut rng));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.instance_norm(y, 1e-5).unwrap();
        let y = g.relu(y);
        let loss = g.mean(y);
        g.backward(loss).unwrap().get(w).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn instance_norm_output_is_standardized(
        seed in 0u64..10_000,
        c in 1usize..4,
        h in 2usize..7,
        w in 2usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[2, c, h, w], &mut rng).map(|v| 3.0 * v - 1.0));
        let y = g.instance_norm(x, 1e-5).unwrap();
        let d = g.value(y).data();
        let m = h * w;
        for grp in d.chunks(m) {
            let mean = grp.iter().sum::<f64>() / m as f64;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn conv_output_extent_follows_formula(
        h in 3usize..20,
        k in 1usize..4,
        stride in 1usize..4,
        pad in 0usize..2,
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, h, h]));
        let wt = g.constant(Tensor::zeros(&[2, 1, k, k]));
        let y = g.conv2d(x, wt, None, stride, pad).unwrap();
        let expect = (h + 2 * pad - k) / stride + 1;
        prop_assert_eq!(g.shape(y), &[1, 2, expect, expect][..]);
    }
}
