use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Mode, Network, NetworkSpec, NnError, Result, ScaleConfig, LEAKY_SLOPE};
use crate::tensor::{BnBatchStats, Graph, Var};

/// Conv ordinals of the age extractor whose activations feed the critic.
pub const AGE_TAPS: [usize; 4] = [2, 4, 7, 10];

/// Side length of each pathway's score patch.
pub const PATCH: usize = 3;

fn conv_relu(layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, stride: usize) {
    layers.push(LayerSpec::conv(cin, cout, 3, stride, 1));
    layers.push(LayerSpec::Relu);
}

/// Encoder, residual bottleneck and decoder; maps `[N,3,S,S]` to the same shape
/// with values in (-1, 1).
pub fn build_generator(cfg: &ScaleConfig, rng: &mut impl Rng) -> Result<Network> {
    cfg.validate()?;
    let c = |s| cfg.stage_channels(s);
    let mut layers = Vec::new();
    let mut cin = 3;
    for s in 0..3 {
        layers.push(LayerSpec::conv(cin, c(s), 3, 2, 1));
        layers.push(LayerSpec::InstanceNorm);
        layers.push(LayerSpec::Relu);
        cin = c(s);
    }
    for _ in 0..4 {
        layers.push(LayerSpec::ResidualBlock { channels: cin });
    }
    for cout in [c(1), c(0), c(0)] {
        layers.push(LayerSpec::ConvTranspose {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
        });
        layers.push(LayerSpec::InstanceNorm);
        layers.push(LayerSpec::Relu);
        cin = cout;
    }
    layers.push(LayerSpec::conv(cin, 3, 3, 1, 1));
    layers.push(LayerSpec::Tanh);
    let spec = NetworkSpec { name: "generator".into(), input_shape: cfg.image_shape().to_vec(), layers, taps: vec![] };
    Network::new(spec, rng)
}

fn ten_conv_trunk(cfg: &ScaleConfig, downsample_at: &[usize]) -> Vec<LayerSpec> {
    let widths = [0u32, 0, 1, 1, 2, 2, 2, 3, 3, 3].map(|s| cfg.stage_channels(s));
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        let stride = if downsample_at.contains(&(i + 1)) { 2 } else { 1 };
        conv_relu(&mut layers, cin, w, stride);
        cin = w;
    }
    layers
}

/// Ten-conv age classifier with one-vs-all logits; its tapped activations at
/// four depths form the critic's input once the head is removed.
pub fn build_age_extractor(cfg: &ScaleConfig, rng: &mut impl Rng) -> Result<Network> {
    cfg.validate()?;
    let mut layers = ten_conv_trunk(cfg, &[3, 5, 8]);
    layers.push(LayerSpec::GlobalPool);
    layers.push(LayerSpec::Linear { in_features: cfg.stage_channels(3), out_features: cfg.n_age_labels });
    let spec = NetworkSpec {
        name: "phi_age".into(),
        input_shape: cfg.image_shape().to_vec(),
        layers,
        taps: AGE_TAPS.to_vec(),
    };
    Network::new(spec, rng)
}

/// Ten-conv identity descriptor producing unit-norm embeddings.
pub fn build_identity_descriptor(cfg: &ScaleConfig, rng: &mut impl Rng) -> Result<Network> {
    cfg.validate()?;
    let mut layers = ten_conv_trunk(cfg, &[1, 3, 5, 8]);
    layers.push(LayerSpec::GlobalPool);
    layers.push(LayerSpec::Linear { in_features: cfg.stage_channels(3), out_features: cfg.identity_embedding_dim });
    layers.push(LayerSpec::L2Normalize);
    let spec = NetworkSpec { name: "phi_id".into(), input_shape: cfg.image_shape().to_vec(), layers, taps: vec![] };
    Network::new(spec, rng)
}

/// One critic pathway for a `[C,S,S]` feature map: stride-2 convs with batch
/// norm and leaky ReLU until the side is at most 5, then a single-channel
/// conv onto a 3x3 patch.
pub fn build_pathway(name: &str, tap_shape: &[usize], rng: &mut impl Rng) -> Result<Network> {
    let &[c, s, s2] = tap_shape else {
        return Err(NnError::Config(format!("pathway input must be [C,S,S], got {tap_shape:?}")));
    };
    if s != s2 || s < PATCH {
        return Err(NnError::Config(format!("pathway input must be square with side >= {PATCH}, got {tap_shape:?}")));
    }
    let mut layers = Vec::new();
    let mut side = s;
    while side > 5 {
        layers.push(LayerSpec::conv(c, c, 3, 2, 1));
        layers.push(LayerSpec::BatchNorm { channels: c });
        layers.push(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE });
        side = side.div_ceil(2);
    }
    let head = if side == PATCH { LayerSpec::conv(c, 1, 3, 1, 1) } else { LayerSpec::conv(c, 1, side - 2, 1, 0) };
    layers.push(head);
    let spec = NetworkSpec { name: name.into(), input_shape: tap_shape.to_vec(), layers, taps: vec![] };
    Network::new(spec, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Pyramid,
    OnePathway,
}

/// Critic over age-extractor taps. Each pathway scores one tap; the 3x3
/// patches are stacked along the height axis into `[N,1,3P,3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub kind: DiscriminatorKind,
    pub pathways: Vec<Network>,
    /// Which age-extractor tap each pathway reads.
    pub tap_index: Vec<usize>,
}

/// Pyramid critic: one pathway per tap.
pub fn build_pyramid_discriminator(tap_shapes: &[Vec<usize>], rng: &mut impl Rng) -> Result<Discriminator> {
    let pathways = tap_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| build_pathway(&format!("disc.p{}", i + 1), s, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Discriminator { kind: DiscriminatorKind::Pyramid, pathways, tap_index: (0..tap_shapes.len()).collect() })
}

/// Ablation critic reading only the deepest tap.
pub fn build_one_pathway_discriminator(tap_shapes: &[Vec<usize>], rng: &mut impl Rng) -> Result<Discriminator> {
    let last = tap_shapes.len().checked_sub(1).ok_or_else(|| NnError::Config("no taps".into()))?;
    let pathway = build_pathway("disc.p1", &tap_shapes[last], rng)?;
    Ok(Discriminator { kind: DiscriminatorKind::OnePathway, pathways: vec![pathway], tap_index: vec![last] })
}

impl Discriminator {
    pub fn score_height(&self) -> usize {
        PATCH * self.pathways.len()
    }

    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Vec<Vec<Var>> {
        self.pathways.iter().map(|p| p.bind(g, with_grad)).collect()
    }

    /// Scores a batch given all age-extractor taps. Returns the score map and
    /// the batch-norm statistics of each pathway (empty in eval mode).
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Vec<Var>],
        taps: &[Var],
        mode: Mode,
    ) -> Result<(Var, Vec<Vec<BnBatchStats>>)> {
        let mut outs = Vec::with_capacity(self.pathways.len());
        let mut stats = Vec::with_capacity(self.pathways.len());
        for ((net, v), &ti) in self.pathways.iter().zip(vars).zip(&self.tap_index) {
            let tap = *taps
                .get(ti)
                .ok_or_else(|| NnError::Config(format!("critic needs tap {ti}, got {} taps", taps.len())))?;
            let f = net.forward(g, v, tap, mode)?;
            outs.push(f.output);
            stats.push(f.bn_stats);
        }
        Ok((g.concat(&outs, 2)?, stats))
    }

    pub fn update_running_stats(&mut self, stats: &[Vec<BnBatchStats>]) {
        for (p, s) in self.pathways.iter_mut().zip(stats) {
            p.update_running_stats(s);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.pathways.iter().map(Network::parameter_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pathways.len() != self.tap_index.len() || self.pathways.is_empty() {
            return Err(NnError::Config("critic pathways and tap indices disagree".into()));
        }
        for p in &self.pathways {
            p.validate()?;
            if p.spec.infer_shapes()?.output != [1, PATCH, PATCH] {
                return Err(NnError::Config(format!("pathway {} does not emit a {PATCH}x{PATCH} patch", p.name())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn generator_preserves_image_shape() {
        for size in [32, 48, 96] {
            let cfg = ScaleConfig { image_size: size, base_channels: 4, ..Default::default() };
            let g = build_generator(&cfg, &mut rng()).unwrap();
            let (y, _) = g.infer(&Tensor::randn(&[1, 3, size, size], &mut rng())).unwrap();
            assert_eq!(y.shape(), &[1, 3, size, size]);
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn age_taps_shrink_by_half() {
        let cfg = ScaleConfig::default();
        let net = build_age_extractor(&cfg, &mut rng()).unwrap();
        assert_eq!(net.spec.conv_count(), 10);
        let sides: Vec<usize> = net.spec.infer_shapes().unwrap().taps.iter().map(|s| s[1]).collect();
        assert_eq!(sides, vec![48, 24, 12, 6]);
    }

    #[test]
    fn pyramid_score_map_is_twelve_by_three() {
        let cfg = ScaleConfig::default();
        let mut phi = build_age_extractor(&cfg, &mut rng()).unwrap();
        phi.truncate_after_last_tap().unwrap();
        let shapes = phi.spec.infer_shapes().unwrap().taps;
        let d = build_pyramid_discriminator(&shapes, &mut rng()).unwrap();
        d.validate().unwrap();
        let (_, taps) = phi.infer(&Tensor::randn(&[2, 3, 48, 48], &mut rng())).unwrap();
        let mut g = Graph::new();
        let tv: Vec<Var> = taps.into_iter().map(|t| g.constant(t)).collect();
        let vars = d.bind(&mut g, true);
        let (s, stats) = d.forward(&mut g, &vars, &tv, Mode::Train).unwrap();
        assert_eq!(g.shape(s), &[2, 1, 12, 3]);
        assert_eq!(stats.len(), 4);

        let one = build_one_pathway_discriminator(&shapes, &mut rng()).unwrap();
        let vars = one.bind(&mut g, true);
        let (s, _) = one.forward(&mut g, &vars, &tv, Mode::Eval).unwrap();
        assert_eq!(g.shape(s), &[2, 1, 3, 3]);
    }

    #[test]
    fn pathways_reach_three_by_three_for_any_valid_size() {
        for side in [3, 4, 5, 6, 7, 12, 24, 28, 32, 40, 48, 96] {
            let p = build_pathway("p", &[2, side, side], &mut rng()).unwrap();
            assert_eq!(p.spec.infer_shapes().unwrap().output, vec![1, 3, 3], "side {side}");
        }
    }

    #[test]
    fn identity_embeddings_are_unit_norm() {
        let cfg = ScaleConfig::default();
        let net = build_identity_descriptor(&cfg, &mut rng()).unwrap();
        assert_eq!(net.spec.conv_count(), 10);
        let (e, _) = net.infer(&Tensor::randn(&[3, 3, 48, 48], &mut rng())).unwrap();
        assert_eq!(e.shape(), &[3, 32]);
        for row in e.data().chunks(32) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_residual_weights_give_identity_skip() {
        let spec = NetworkSpec {
            name: "res".into(),
            input_shape: vec![2, 5, 5],
            layers: vec![LayerSpec::ResidualBlock { channels: 2 }],
            taps: vec![],
        };
        let mut net = Network::new(spec, &mut rng()).unwrap();
        for p in &mut net.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::randn(&[2, 2, 5, 5], &mut rng());
        let (y, _) = net.infer(&x).unwrap();
        assert_eq!(y, x);
    }
}
