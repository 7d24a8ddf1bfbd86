//! Training objectives: least-squares adversarial losses over score maps, the
//! cross-entropy reference critic, identity and pixel losses, and the
//! weighted generator total.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{run_trials, OpCheck};
use crate::tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_p: f64,
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::morph()
    }
}

impl LossWeights {
    pub fn morph() -> Self {
        LossWeights { lambda_a: 300.0, lambda_p: 0.10, lambda_i: 0.005 }
    }

    pub fn cacd() -> Self {
        LossWeights { lambda_a: 750.0, lambda_p: 0.20, lambda_i: 0.005 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_p", self.lambda_p), ("lambda_i", self.lambda_i)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TensorError::Contract { op: "loss_weights", detail: format!("{name} = {v} must be >= 0") });
            }
        }
        Ok(())
    }
}

fn mean_sq_offset<T: Scalar>(g: &mut Graph<T>, s: Var, target: f64) -> Var {
    let d = g.add_scalar(s, -target);
    let sq = g.square(d);
    g.mean(sq)
}

fn same_map_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
        return Err(TensorError::Shape { op, detail: format!("{sa:?} vs {sb:?}") });
    }
    Ok(())
}

/// Least-squares critic loss: elderly scores pulled to 1, both young real and
/// generated scores pulled to 0. Each term averages over batch and map cells:
/// `½·mean(s_old−1)² + ½·(mean s_young² + mean s_gen²)`.
pub fn gan_d_loss_ls<T: Scalar>(g: &mut Graph<T>, old: Var, young: Var, gen: Var) -> Result<Var> {
    same_map_shape(g, "gan_d_loss_ls", old, young)?;
    same_map_shape(g, "gan_d_loss_ls", old, gen)?;
    let pos = mean_sq_offset(g, old, 1.0);
    let neg_y = mean_sq_offset(g, young, 0.0);
    let neg_g = mean_sq_offset(g, gen, 0.0);
    let neg = g.add(neg_y, neg_g)?;
    let total = g.add(pos, neg)?;
    Ok(g.scale(total, 0.5))
}

/// Least-squares generator loss: generated scores pulled to 1.
pub fn gan_g_loss_ls<T: Scalar>(g: &mut Graph<T>, gen: Var) -> Result<Var> {
    Ok(mean_sq_offset(g, gen, 1.0))
}

/// Per-sample probability for the cross-entropy critic: sigmoid of the mean
/// score over the map.
pub fn score_probability<T: Scalar>(g: &mut Graph<T>, score: Var) -> Result<Var> {
    let shape = g.shape(score).to_vec();
    let n = shape[0];
    let cells: usize = shape[1..].iter().product();
    let flat = g.reshape(score, &[n, cells])?;
    let sum = g.sum_axis(flat, 1)?;
    let mean = g.scale(sum, 1.0 / cells as f64);
    Ok(g.sigmoid(mean))
}

/// Binary cross-entropy critic loss on probabilities in (0, 1).
pub fn gan_d_loss_ce<T: Scalar>(g: &mut Graph<T>, d_old: Var, d_gen: Var) -> Result<Var> {
    for v in [d_old, d_gen] {
        if let Some(bad) = g.value(v).data().iter().find(|p| !(p.as_f64() > 0.0 && p.as_f64() < 1.0)) {
            return Err(TensorError::Contract { op: "gan_d_loss_ce", detail: format!("probability {bad} outside (0,1)") });
        }
    }
    let log_old = g.ln(d_old)?;
    let neg = g.scale(d_gen, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_gen = g.ln(one_minus)?;
    let a = g.mean(log_old);
    let b = g.mean(log_gen);
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Mean over the batch of squared Euclidean distance between embedding rows.
pub fn identity_loss<T: Scalar>(g: &mut Graph<T>, feat_in: Var, feat_out: Var) -> Result<Var> {
    let n = *g.shape(feat_in).first().unwrap_or(&1);
    let d = g.sub(feat_in, feat_out)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Mean squared pixel difference, normalized per image by `C·H·W`.
pub fn pixel_loss<T: Scalar>(g: &mut Graph<T>, x: Var, gx: Var) -> Result<Var> {
    let d = g.sub(gx, x)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `λa·gan + λp·pixel + λi·identity`; `pixel` is `None` on iterations that
/// skip the pixel term.
pub fn total_g_loss<T: Scalar>(
    g: &mut Graph<T>,
    gan: Var,
    pixel: Option<Var>,
    identity: Var,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let a = g.scale(gan, w.lambda_a);
    let i = g.scale(identity, w.lambda_i);
    let mut total = g.add(a, i)?;
    if let Some(p) = pixel {
        let p = g.scale(p, w.lambda_p);
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// Critic objective used by the trainer; identical to the least-squares loss.
pub fn total_d_loss(gan_d: Var) -> Var {
    gan_d
}

/// Pointwise minimizer of the least-squares critic loss on a discrete support.
pub fn lsgan_optimum(p_old: f64, p_young: f64, p_gen: f64) -> f64 {
    p_old / (p_old + p_young + p_gen)
}

/// Fits one free scalar score per support point by gradient descent on
/// [`gan_d_loss_ls`], with each distribution represented by a batch whose
/// point counts are `counts_*[u]`. Returns the fitted scores.
pub fn fit_pointwise_critic(
    counts_old: &[usize],
    counts_young: &[usize],
    counts_gen: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let k = counts_old.len();
    if counts_young.len() != k || counts_gen.len() != k || k == 0 {
        return Err(TensorError::Shape { op: "fit_pointwise_critic", detail: "support sizes differ".into() });
    }
    let mut s = vec![0.5f64; k];
    for _ in 0..steps {
        let mut g = Graph::<f64>::new();
        let sv = g.leaf(Tensor::new(&[k, 1], s.clone())?);
        let batch = |g: &mut Graph<f64>, counts: &[usize]| -> Result<Var> {
            let mut parts = Vec::new();
            for (u, &c) in counts.iter().enumerate() {
                let row = g.narrow(sv, 0, u, 1)?;
                parts.extend(std::iter::repeat_n(row, c));
            }
            if parts.is_empty() {
                return Err(TensorError::Contract { op: "fit_pointwise_critic", detail: "empty batch".into() });
            }
            g.concat(&parts, 0)
        };
        let old = batch(&mut g, counts_old)?;
        let young = batch(&mut g, counts_young)?;
        let gen = batch(&mut g, counts_gen)?;
        let loss = gan_d_loss_ls(&mut g, old, young, gen)?;
        let grads = g.backward(loss)?;
        let gs = grads.get_or_zeros(sv, &[k, 1]);
        for (v, d) in s.iter_mut().zip(gs.data()) {
            *v -= lr * d;
        }
    }
    Ok(s)
}

/// Finite-difference checks of every loss, on random shapes and values.
pub fn loss_gradcheck_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let map = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        vec![rng.gen_range(1..4), 1, rng.gen_range(1..5), rng.gen_range(1..4)]
    };
    let mut out = Vec::new();
    out.push(run_trials("gan_d_loss_ls", trials, seed, |rng| {
        let s = map(rng);
        let (mut sy, mut sg) = (s.clone(), s.clone());
        sy[0] = rng.gen_range(1..4);
        sg[0] = rng.gen_range(1..4);
        let inputs = vec![Tensor::randn(&s, rng), Tensor::randn(&sy, rng), Tensor::randn(&sg, rng)];
        (inputs, |g: &mut Graph<f64>, v: &[Var]| gan_d_loss_ls(g, v[0], v[1], v[2]))
    })?);
    out.push(run_trials("gan_g_loss_ls", trials, seed + 1, |rng| {
        let s = map(rng);
        (vec![Tensor::randn(&s, rng)], |g: &mut Graph<f64>, v: &[Var]| gan_g_loss_ls(g, v[0]))
    })?);
    out.push(run_trials("gan_d_loss_ce", trials, seed + 2, |rng| {
        let s = map(rng);
        let (mut sg, n) = (s.clone(), rng.gen_range(1..4));
        sg[0] = n;
        (vec![Tensor::randn(&s, rng), Tensor::randn(&sg, rng)], |g: &mut Graph<f64>, v: &[Var]| {
            let a = score_probability(g, v[0])?;
            let b = score_probability(g, v[1])?;
            gan_d_loss_ce(g, a, b)
        })
    })?);
    out.push(run_trials("identity_loss", trials, seed + 3, |rng| {
        let s = [rng.gen_range(1..4), rng.gen_range(2..6)];
        (vec![Tensor::randn(&s, rng), Tensor::randn(&s, rng)], |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.l2_normalize(v[0])?;
            let b = g.l2_normalize(v[1])?;
            identity_loss(g, a, b)
        })
    })?);
    out.push(run_trials("pixel_loss", trials, seed + 4, |rng| {
        let s = [rng.gen_range(1..3), 3, rng.gen_range(1..5), rng.gen_range(1..5)];
        (vec![Tensor::randn(&s, rng), Tensor::randn(&s, rng)], |g: &mut Graph<f64>, v: &[Var]| {
            pixel_loss(g, v[0], v[1])
        })
    })?);
    out.push(run_trials("total_g_loss", trials, seed + 5, |rng| {
        let with_pixel = rng.gen_bool(0.5);
        let inputs = vec![Tensor::randn(&[1], rng), Tensor::randn(&[1], rng), Tensor::randn(&[1], rng)];
        (inputs, move |g: &mut Graph<f64>, v: &[Var]| {
            let p = with_pixel.then_some(v[1]);
            total_g_loss(g, v[0], p, v[2], &LossWeights::morph())
        })
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_map(g: &mut Graph<f64>, n: usize, v: f64) -> Var {
        g.leaf(Tensor::full(&[n, 1, 12, 3], v))
    }

    #[test]
    fn d_loss_hand_case() {
        let mut g = Graph::<f64>::new();
        let o = constant_map(&mut g, 2, 0.8);
        let y = constant_map(&mut g, 2, 0.1);
        let q = constant_map(&mut g, 2, 0.3);
        let l = gan_d_loss_ls(&mut g, o, y, q).unwrap();
        assert!((g.value(l).item().unwrap() - 0.07).abs() < 1e-12);
        assert_eq!(g.value(total_d_loss(l)).item().unwrap(), g.value(l).item().unwrap());
    }

    #[test]
    fn d_loss_zero_at_target_maps() {
        let mut g = Graph::<f64>::new();
        let o = constant_map(&mut g, 3, 1.0);
        let y = constant_map(&mut g, 3, 0.0);
        let q = constant_map(&mut g, 3, 0.0);
        let l = gan_d_loss_ls(&mut g, o, y, q).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn g_loss_hand_case() {
        let mut g = Graph::<f64>::new();
        let q = constant_map(&mut g, 4, 0.3);
        let l = gan_g_loss_ls(&mut g, q).unwrap();
        assert!((g.value(l).item().unwrap() - 0.49).abs() < 1e-12);
        let one = constant_map(&mut g, 4, 1.0);
        let l = gan_g_loss_ls(&mut g, one).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn mismatched_score_maps_are_rejected() {
        let mut g = Graph::<f64>::new();
        let o = constant_map(&mut g, 2, 0.8);
        let y = g.leaf(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(gan_d_loss_ls(&mut g, o, y, o).is_err());
    }

    #[test]
    fn ce_hand_cases() {
        let mut g = Graph::<f64>::new();
        let half = g.leaf(Tensor::full(&[5], 0.5));
        let l = gan_d_loss_ce(&mut g, half, half).unwrap();
        assert!((g.value(l).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let hi = g.leaf(Tensor::full(&[5], 1.0 - 1e-9));
        let lo = g.leaf(Tensor::full(&[5], 1e-9));
        let l = gan_d_loss_ce(&mut g, hi, lo).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-8);
        let bad = g.leaf(Tensor::full(&[5], 1.0));
        assert!(gan_d_loss_ce(&mut g, bad, half).is_err());
    }

    #[test]
    fn identity_and_pixel_hand_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let b = g.leaf(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let l = identity_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item().unwrap() - 2.0).abs() < 1e-12);
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let gx = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let l = pixel_loss(&mut g, x, gx).unwrap();
        assert!((g.value(l).item().unwrap() - 0.25).abs() < 1e-12);
        let l = pixel_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn weighted_total_matches_hand_sum() {
        let mut g = Graph::<f64>::new();
        let gan = g.leaf(Tensor::scalar(0.49));
        let pix = g.leaf(Tensor::scalar(0.25));
        let id = g.leaf(Tensor::scalar(2.0));
        let t = total_g_loss(&mut g, gan, Some(pix), id, &LossWeights::morph()).unwrap();
        assert!((g.value(t).item().unwrap() - 147.035).abs() < 1e-9);
        let zero = LossWeights { lambda_a: 0.0, lambda_p: 0.0, lambda_i: 0.0 };
        let t = total_g_loss(&mut g, gan, Some(pix), id, &zero).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 0.0);
        let neg = LossWeights { lambda_a: -1.0, ..zero };
        assert!(total_g_loss(&mut g, gan, None, id, &neg).is_err());
    }

    #[test]
    fn pointwise_critic_reaches_closed_form() {
        let s = fit_pointwise_critic(&[2, 3, 5], &[5, 3, 2], &[1, 1, 8], 4000, 0.5).unwrap();
        let p = |c: &[usize], u: usize| c[u] as f64 / c.iter().sum::<usize>() as f64;
        for (u, got) in s.iter().enumerate() {
            let want = lsgan_optimum(p(&[2, 3, 5], u), p(&[5, 3, 2], u), p(&[1, 1, 8], u));
            assert!((got - want).abs() < 1e-2, "point {u}: {got} vs {want}");
        }
    }
}
