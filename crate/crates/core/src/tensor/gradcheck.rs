//! Central finite-difference verification of reverse-mode gradients.
//!
//! Each case builds a scalar `sum(f(inputs) * R)` with a fixed random
//! projection `R`, differentiates it with [`Graph::backward`], and compares
//! every input coordinate against `(L(x+h) - L(x-h)) / 2h` evaluated by
//! re-running the forward pass. Runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Result, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error over every input coordinate for one case.
pub fn check_case<F>(inputs: &[Tensor<f64>], build: &F, h: f64, rng: &mut impl Rng) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let proj = Tensor::randn(g.shape(out), rng);
    let loss = project(&mut g, out, &proj)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out, &proj)?;
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn project(g: &mut Graph<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(proj.clone());
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Summary of all random trials of one operation.
#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Draws inputs and a builder per trial; returns the worst error seen.
pub fn run_trials<G, F>(op: &str, trials: usize, seed: u64, mut gen: G) -> Result<OpCheck>
where
    G: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, F),
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (inputs, build) = gen(&mut rng);
        worst = worst.max(check_case(&inputs, &build, DEFAULT_STEP, &mut rng)?);
    }
    Ok(OpCheck { op: op.to_string(), trials, max_rel_err: worst })
}

fn random_shape(rng: &mut impl Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4);
    (0..rank).map(|_| rng.gen_range(1..=if rank > 2 { 4 } else { 6 })).collect()
}

/// Standard normal values pushed away from the origin so that kinked
/// activations are never probed at their kink.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, rng).map(|v| if v.abs() < 1e-2 { v.signum() * 1e-2 + v } else { v })
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn unary_case(f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    move |rng| {
        let shape = random_shape(rng);
        let b: Builder = Box::new(move |g, v| f(g, v[0]));
        (vec![away_from_zero(&shape, rng)], b)
    }
}

/// Checks every differentiable tensor operation with `trials` random cases.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let mut s = seed;
    let mut next_seed = || {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
        s
    };

    out.push(run_trials("conv2d", trials, next_seed(), |rng| {
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let h = rng.gen_range(k.max(2)..=6);
        let w = rng.gen_range(k.max(2)..=6);
        let inputs = vec![
            Tensor::randn(&[n, ci, h, w], rng),
            Tensor::randn(&[co, ci, k, k], rng),
            Tensor::randn(&[co], rng),
        ];
        let b: Builder = Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
        (inputs, b)
    })?);

    out.push(run_trials("conv_transpose2d", trials, next_seed(), |rng| {
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = if k > 1 { rng.gen_range(0..=1) } else { 0 };
        let op = rng.gen_range(0..stride);
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let h = rng.gen_range(2..=4);
        let w = rng.gen_range(2..=4);
        let inputs = vec![
            Tensor::randn(&[n, ci, h, w], rng),
            Tensor::randn(&[ci, co, k, k], rng),
            Tensor::randn(&[co], rng),
        ];
        let b: Builder = Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad, op));
        (inputs, b)
    })?);

    out.push(run_trials("instance_norm", trials, next_seed(), |rng| {
        let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)];
        let b: Builder = Box::new(|g, v| g.instance_norm(v[0], 1e-5));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("batch_norm_train", trials, next_seed(), |rng| {
        let c = rng.gen_range(1..=3);
        let shape = vec![rng.gen_range(2..=4), c, rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let inputs = vec![Tensor::randn(&shape, rng), Tensor::randn(&[c], rng), Tensor::randn(&[c], rng)];
        let b: Builder = Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0));
        (inputs, b)
    })?);

    out.push(run_trials("batch_norm_eval", trials, next_seed(), |rng| {
        let c = rng.gen_range(1..=3);
        let shape = vec![rng.gen_range(1..=3), c, rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let inputs = vec![Tensor::randn(&shape, rng), Tensor::randn(&[c], rng), Tensor::randn(&[c], rng)];
        let b: Builder = Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5));
        (inputs, b)
    })?);

    out.push(run_trials("relu", trials, next_seed(), unary_case(|g, x| Ok(g.relu(x))))?);
    out.push(run_trials("leaky_relu", trials, next_seed(), unary_case(|g, x| g.leaky_relu(x, 0.2)))?);
    out.push(run_trials("tanh", trials, next_seed(), unary_case(|g, x| Ok(g.tanh(x))))?);
    out.push(run_trials("sigmoid", trials, next_seed(), unary_case(|g, x| Ok(g.sigmoid(x))))?);
    out.push(run_trials("scale", trials, next_seed(), unary_case(|g, x| Ok(g.scale(x, -1.7))))?);
    out.push(run_trials("add_scalar", trials, next_seed(), unary_case(|g, x| Ok(g.add_scalar(x, 0.3))))?);
    out.push(run_trials("sum", trials, next_seed(), unary_case(|g, x| Ok(g.sum(x))))?);
    out.push(run_trials("mean", trials, next_seed(), unary_case(|g, x| Ok(g.mean(x))))?);

    out.push(run_trials("ln", trials, next_seed(), |rng| {
        let shape = random_shape(rng);
        let b: Builder = Box::new(|g, v| g.ln(v[0]));
        (vec![Tensor::uniform(&shape, 0.2, 3.0, rng)], b)
    })?);

    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        out.push(run_trials(name, trials, next_seed(), move |rng| {
            let shape = random_shape(rng);
            let b: Builder = Box::new(move |g, v| match which {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            });
            (vec![Tensor::randn(&shape, rng), Tensor::randn(&shape, rng)], b)
        })?);
    }

    out.push(run_trials("concat", trials, next_seed(), |rng| {
        let shape = random_shape(rng);
        let axis = rng.gen_range(0..shape.len());
        let mut other = shape.clone();
        other[axis] = rng.gen_range(1..=3);
        let b: Builder = Box::new(move |g, v| g.concat(&[v[0], v[1]], axis));
        (vec![Tensor::randn(&shape, rng), Tensor::randn(&other, rng)], b)
    })?);

    out.push(run_trials("narrow", trials, next_seed(), |rng| {
        let mut shape = random_shape(rng);
        let axis = rng.gen_range(0..shape.len());
        shape[axis] = shape[axis].max(2);
        let len = rng.gen_range(1..shape[axis]);
        let start = rng.gen_range(0..=shape[axis] - len);
        let b: Builder = Box::new(move |g, v| g.narrow(v[0], axis, start, len));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("reshape", trials, next_seed(), |rng| {
        let shape = random_shape(rng);
        let flat = vec![shape.iter().product::<usize>()];
        let b: Builder = Box::new(move |g, v| g.reshape(v[0], &flat));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("sum_axis", trials, next_seed(), |rng| {
        let mut shape = random_shape(rng);
        if shape.len() == 1 {
            shape.push(rng.gen_range(1..=4));
        }
        let axis = rng.gen_range(0..shape.len());
        let b: Builder = Box::new(move |g, v| g.sum_axis(v[0], axis));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("global_avg_pool", trials, next_seed(), |rng| {
        let shape: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=4)).collect();
        let b: Builder = Box::new(|g, v| g.global_avg_pool(v[0]));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("linear", trials, next_seed(), |rng| {
        let (n, f, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let inputs = vec![Tensor::randn(&[n, f], rng), Tensor::randn(&[o, f], rng), Tensor::randn(&[o], rng)];
        let b: Builder = Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])));
        (inputs, b)
    })?);

    out.push(run_trials("l2_normalize", trials, next_seed(), |rng| {
        let shape = [rng.gen_range(1..=4), rng.gen_range(2..=6)];
        let b: Builder = Box::new(|g, v| g.l2_normalize(v[0]));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    out.push(run_trials("bce_with_logits", trials, next_seed(), |rng| {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let target = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let b: Builder = Box::new(move |g, v| g.bce_with_logits(v[0], &target));
        (vec![Tensor::randn(&shape, rng)], b)
    })?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_denominator() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x evaluated through two separate leaves would be wrong if
        // only one side were differentiated; emulate by detaching one factor.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4], &mut rng);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let d = g.detach(v[0]);
            g.mul(v[0], d)
        };
        let err = check_case(&[x], &build, DEFAULT_STEP, &mut rng).unwrap();
        assert!(err > 0.1);
    }
}
