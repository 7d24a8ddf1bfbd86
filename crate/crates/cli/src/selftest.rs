//! Small fixed cases with obvious answers, one or more per module.

use anyhow::{ensure, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pagn_core::critics::{
    gan_d_loss_ce, gan_d_loss_ls, gan_g_loss_ls, identity_loss, pixel_loss, total_d_loss, total_g_loss, LossWeights,
};
use pagn_core::eval::{
    calibrate_threshold, compare_ablation, evaluate_aging_accuracy, evaluate_identity, Synthesis,
};
use pagn_core::faces::{oracle_identity_distance, render_face, sample_dataset, sample_identity, AgeCluster, DatasetConfig};
use pagn_core::nn::{
    build_age_extractor, build_generator, build_one_pathway_discriminator, build_pyramid_discriminator, LayerSpec,
    Mode, Network, NetworkSpec, ScaleConfig, NORM_EPS,
};
use pagn_core::pretrain::triplet_loss;
use pagn_core::tensor::{AdamConfig, AdamState, Graph, Parameter, Tensor};
use pagn_core::trainer::{generate, Checkpoint, TrainConfig, TrainState};

pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: Option<String>,
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5E1F)
}

fn scalar(g: &Graph, v: pagn_core::tensor::Var) -> Result<f64> {
    Ok(g.value(v).item()? as f64)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn tensor_checks(out: &mut Vec<(&'static str, &'static str, Result<()>)>) {
    out.push(("tensor", "delta kernel convolution is the identity", (|| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[1, 1, 5, 5], &mut rng()));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = g.constant(k);
        let y = g.conv2d(x, w, None, 1, 1)?;
        ensure!(g.value(y) == g.value(x));
        Ok(())
    })()));
    out.push(("tensor", "unit 1x1 transposed convolution is the identity", (|| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[1, 1, 4, 4], &mut rng()));
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv_transpose2d(x, w, None, 1, 0, 0)?;
        ensure!(g.value(y) == g.value(x));
        Ok(())
    })()));
    out.push(("tensor", "normalizing a constant channel gives zeros", (|| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 5.0));
        let y = g.instance_norm(x, NORM_EPS)?;
        ensure!(g.value(y).max_abs() <= 1e-3);
        let (gm, bt) = (g.constant(Tensor::ones(&[1])), g.constant(Tensor::zeros(&[1])));
        let (z, _) = g.batch_norm_train(x, gm, bt, NORM_EPS)?;
        ensure!(g.value(z).max_abs() <= 1e-3);
        Ok(())
    })()));
    out.push(("tensor", "activations at fixed points", (|| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0])?);
        let r = g.relu(x);
        ensure!(g.value(r).data() == [0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::zeros(&[1]));
        let (t, s) = (g.tanh(z), g.sigmoid(z));
        ensure!(g.value(t).data() == [0.0] && g.value(s).data() == [0.5]);
        Ok(())
    })()));
    out.push(("tensor", "gradient of a linear form is its coefficient", (|| {
        let mut g = Graph::<f32>::new();
        let xv = Tensor::randn(&[6], &mut rng());
        let w = g.leaf(Tensor::zeros(&[6]));
        let x = g.constant(xv.clone());
        let p = g.mul(w, x)?;
        let loss = g.sum(p);
        let grads = g.backward(loss)?;
        ensure!(grads.get(w) == Some(&xv));
        Ok(())
    })()));
    out.push(("tensor", "zero gradient leaves Adam parameters unchanged", (|| {
        let mut params = vec![Parameter::new("p", Tensor::<f32>::ones(&[3]))];
        params[0].set_grad(Tensor::zeros(&[3]))?;
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, 1e-3)?;
        ensure!(params[0].value == Tensor::ones(&[3]) && adam.t == 1);
        Ok(())
    })()));
}

fn nn_checks(out: &mut Vec<(&'static str, &'static str, Result<()>)>) {
    let scale = ScaleConfig::default();
    out.push(("nn_blocks", "zeroed residual block is the identity", (|| {
        let spec = NetworkSpec {
            name: "res".into(),
            input_shape: vec![2, 5, 5],
            layers: vec![LayerSpec::ResidualBlock { channels: 2 }],
            taps: vec![],
        };
        let mut net = Network::new(spec, &mut rng())?;
        for p in &mut net.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::randn(&[2, 2, 5, 5], &mut rng());
        ensure!(net.infer(&x)?.0 == x);
        Ok(())
    })()));
    out.push(("nn_blocks", "generator is pure and keeps the image shape", (|| {
        let g = build_generator(&scale, &mut rng())?;
        let x = Tensor::uniform(&[2, 3, 48, 48], -1.0, 1.0, &mut rng());
        let (a, b) = (generate(&g, &x)?, generate(&g, &x)?);
        ensure!(a == b && a.shape() == x.shape());
        ensure!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        Ok(())
    })()));
    out.push(("critics", "all-zero pathways score zero", (|| {
        let phi = build_age_extractor(&scale, &mut rng())?;
        let taps_shapes = phi.spec.infer_shapes()?.taps;
        let mut d = build_pyramid_discriminator(&taps_shapes, &mut rng())?;
        for p in d.pathways.iter_mut().flat_map(|n| n.params.iter_mut()) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let (_, taps) = phi.infer(&Tensor::uniform(&[2, 3, 48, 48], -1.0, 1.0, &mut rng()))?;
        let mut g = Graph::<f32>::new();
        let tv: Vec<_> = taps.into_iter().map(|t| g.constant(t)).collect();
        let vars = d.bind(&mut g, false);
        let (s, _) = d.forward(&mut g, &vars, &tv, Mode::Eval)?;
        ensure!(g.value(s).shape() == [2, 1, 12, 3] && g.value(s).max_abs() == 0.0);
        let one = build_one_pathway_discriminator(&taps_shapes, &mut rng())?;
        ensure!(one.parameter_count() < d.parameter_count());
        Ok(())
    })()));
}

fn loss_checks(out: &mut Vec<(&'static str, &'static str, Result<()>)>) {
    out.push(("critics", "perfect estimator has zero least-squares loss", (|| {
        let mut g = Graph::<f64>::new();
        let (o, y, q) =
            (g.constant(Tensor::ones(&[4, 1, 3, 3])), g.constant(Tensor::zeros(&[4, 1, 3, 3])), g.constant(Tensor::zeros(&[4, 1, 3, 3])));
        let d = gan_d_loss_ls(&mut g, o, y, q)?;
        let gl = gan_g_loss_ls(&mut g, o)?;
        let td = total_d_loss(d);
        ensure!(g.value(d).item()? == 0.0 && g.value(gl).item()? == 0.0 && td == d);
        Ok(())
    })()));
    out.push(("critics", "cross-entropy critic near its perfect limit", (|| {
        let mut g = Graph::<f64>::new();
        let (o, q) = (g.constant(Tensor::full(&[4], 1.0 - 1e-9)), g.constant(Tensor::full(&[4], 1e-9)));
        let l = gan_d_loss_ce(&mut g, o, q)?;
        ensure!(g.value(l).item()?.abs() < 1e-6);
        Ok(())
    })()));
    out.push(("critics", "identity and pixel losses vanish on equal inputs", (|| {
        let mut g = Graph::<f32>::new();
        let e = g.constant(Tensor::randn(&[3, 8], &mut rng()));
        let x = g.constant(Tensor::randn(&[2, 3, 4, 4], &mut rng()));
        let (il, pl) = (identity_loss(&mut g, e, e)?, pixel_loss(&mut g, x, x)?);
        ensure!(scalar(&g, il)? == 0.0 && scalar(&g, pl)? == 0.0);
        Ok(())
    })()));
    out.push(("critics", "zero weights annihilate the generator loss", (|| {
        let mut g = Graph::<f32>::new();
        let (a, p, i) = (g.constant(Tensor::scalar(0.49)), g.constant(Tensor::scalar(0.25)), g.constant(Tensor::scalar(2.0)));
        let w = LossWeights { lambda_a: 0.0, lambda_p: 0.0, lambda_i: 0.0 };
        let t = total_g_loss(&mut g, a, Some(p), i, &w)?;
        ensure!(scalar(&g, t)? == 0.0);
        Ok(())
    })()));
}

fn data_checks(out: &mut Vec<(&'static str, &'static str, Result<()>)>) {
    out.push(("synthetic", "rendering is deterministic", (|| {
        let id = sample_identity(&mut rng());
        ensure!(render_face(&id, 33.0, 48)? == render_face(&id, 33.0, 48)?);
        let img = render_face(&id, 33.0, 48)?;
        ensure!(oracle_identity_distance(&img, &img) == Some(0.0));
        Ok(())
    })()));
    out.push(("synthetic", "partition sizes, seeding and disjoint identities", (|| {
        let cfg = DatasetConfig { identities_per_split: 4, samples_per_cluster: 8, image_size: 32, ..Default::default() };
        let a = sample_dataset(&cfg)?;
        ensure!(AgeCluster::ALL.iter().all(|&c| a.train.cluster(c).len() == 8 && a.test.cluster(c).len() == 8));
        ensure!(a.train.identities == sample_dataset(&cfg)?.train.identities);
        ensure!(a.train.identities != sample_dataset(&DatasetConfig { master_seed: 8, ..cfg })?.train.identities);
        ensure!(a.train.identities.iter().all(|i| !a.test.identities.contains(i)));
        Ok(())
    })()));
}

fn training_checks(out: &mut Vec<(&'static str, &'static str, Result<()>)>) {
    out.push(("pretrain", "triplet loss at its fixed points", (|| {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0])?);
        let n = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0])?);
        let sat = triplet_loss(&mut g, a, a, n, 0.2)?;
        let deg = triplet_loss(&mut g, a, a, a, 0.2)?;
        ensure!(scalar(&g, sat)? == 0.0 && close(scalar(&g, deg)?, 0.2, 1e-7));
        Ok(())
    })()));
    out.push(("trainer", "checkpoint round trip is exact and bad magic is rejected", (|| {
        let scale = ScaleConfig { image_size: 32, base_channels: 4, ..Default::default() };
        let mut age = build_age_extractor(&scale, &mut rng())?;
        age.truncate_after_last_tap()?;
        let state = TrainState::new(TrainConfig { scale, ..Default::default() }, &age)?;
        let bytes = state.to_checkpoint()?.to_bytes()?;
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        ensure!(back == state);
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        ensure!(Checkpoint::from_bytes(&bad).is_err());
        Ok(())
    })()));
    out.push(("eval", "passthrough control reproduces natural statistics", (|| {
        let cfg = DatasetConfig { identities_per_split: 6, samples_per_cluster: 12, ..Default::default() };
        let d = sample_dataset(&cfg)?;
        let inputs = d.test.cluster(AgeCluster::new(0)?).iter().map(|s| s.image.clone()).collect();
        let synth = Synthesis::passthrough(inputs);
        let acc = evaluate_aging_accuracy(&synth, &d.test);
        ensure!(acc.synthesized.len() == 3 && acc.benchmark.len() == 4);
        ensure!(acc.synthesized.iter().all(|s| s.mean == acc.benchmark[0].mean));
        let cal = calibrate_threshold(&d.train, 100, 0.01, 1)?;
        let ver = evaluate_identity(&synth, &cal);
        ensure!(ver.categories.iter().all(|c| c.verification_rate == 1.0 && c.mean_confidence == 100.0));
        let ab = compare_ablation((&acc, &ver), (&acc, &ver))?;
        ensure!(ab.pyramid == ab.one_pathway);
        Ok(())
    })()));
}

pub fn run() -> Vec<CheckResult> {
    let mut raw = Vec::new();
    tensor_checks(&mut raw);
    nn_checks(&mut raw);
    loss_checks(&mut raw);
    data_checks(&mut raw);
    training_checks(&mut raw);
    raw.into_iter()
        .map(|(module, name, r)| CheckResult {
            module,
            name,
            passed: r.is_ok(),
            detail: r.err().map(|e| format!("{e:#}")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for r in super::run() {
            assert!(r.passed, "{} {}: {:?}", r.module, r.name, r.detail);
        }
    }
}
