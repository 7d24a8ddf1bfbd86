use pagn_core::critics::{fit_pointwise_critic, loss_gradcheck_suite, lsgan_optimum};
use pagn_core::tensor::gradcheck::DEFAULT_TOLERANCE;
use pagn_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_loss_matches_finite_differences() {
    for r in loss_gradcheck_suite(20, 3).unwrap() {
        assert!(r.passed(DEFAULT_TOLERANCE), "{}: {:e}", r.op, r.max_rel_err);
    }
}

#[test]
fn pointwise_critic_on_uneven_support() {
    let (old, young, gen) = ([7, 2, 1], [1, 6, 3], [2, 2, 6]);
    let fitted = fit_pointwise_critic(&old, &young, &gen, 3000, 0.5).unwrap();
    for u in 0..3 {
        let want = lsgan_optimum(old[u] as f64 / 10.0, young[u] as f64 / 10.0, gen[u] as f64 / 10.0);
        assert!((fitted[u] - want).abs() <= 1e-2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixel_loss_ignores_joint_pixel_permutation(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[2, 3, h, w], &mut rng);
        let y = Tensor::<f64>::randn(&[2, 3, h, w], &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor<f64>| {
            let mut d = t.data().to_vec();
            for (plane, src) in d.chunks_mut(h * w).zip(t.data().chunks(h * w)) {
                for (i, &p) in perm.iter().enumerate() {
                    plane[i] = src[p];
                }
            }
            Tensor::new(t.shape(), d).unwrap()
        };
        let eval = |a: Tensor<f64>, b: Tensor<f64>| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(a), g.constant(b));
            let l = pagn_core::critics::pixel_loss(&mut g, a, b).unwrap();
            g.value(l).item().unwrap()
        };
        let base = eval(x.clone(), y.clone());
        let perm_val = eval(permute(&x), permute(&y));
        prop_assert!((base - perm_val).abs() <= 1e-12);
    }

    #[test]
    fn ls_losses_are_nonnegative(seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let o = g.constant(Tensor::randn(&[2, 1, 12, 3], &mut rng));
        let y = g.constant(Tensor::randn(&[3, 1, 12, 3], &mut rng));
        let q = g.constant(Tensor::randn(&[2, 1, 12, 3], &mut rng));
        let d = pagn_core::critics::gan_d_loss_ls(&mut g, o, y, q).unwrap();
        let gl = pagn_core::critics::gan_g_loss_ls(&mut g, q).unwrap();
        prop_assert!(g.value(d).item().unwrap() >= 0.0);
        prop_assert!(g.value(gl).item().unwrap() >= 0.0);
    }
}
