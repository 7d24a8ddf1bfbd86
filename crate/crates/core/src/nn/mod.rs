//! Declarative networks: layer specs, parameter initialization and forward
//! execution on a [`Graph`].

mod builders;

pub use builders::{
    build_age_extractor, build_generator, build_identity_descriptor, build_one_pathway_discriminator,
    build_pathway, build_pyramid_discriminator, Discriminator, DiscriminatorKind, AGE_TAPS,
};

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BnBatchStats, Graph, Parameter, Tensor, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid network '{network}': {detail}")]
    Spec { network: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Sizes shared by every network of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub identity_embedding_dim: usize,
    pub n_age_labels: usize,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            image_size: 48,
            base_channels: 16,
            channel_multiplier: 2,
            identity_embedding_dim: 32,
            n_age_labels: 4,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size < 32 {
            return Err(NnError::Config(format!(
                "image_size must be a multiple of 8 and at least 32, got {}",
                self.image_size
            )));
        }
        if self.base_channels < 4 {
            return Err(NnError::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.channel_multiplier < 1 {
            return Err(NnError::Config("channel_multiplier must be >= 1".into()));
        }
        if self.identity_embedding_dim < 2 || self.n_age_labels < 2 {
            return Err(NnError::Config("identity_embedding_dim and n_age_labels must be >= 2".into()));
        }
        Ok(())
    }

    /// Channel width of encoder stage `stage` (0-based).
    pub fn stage_channels(&self, stage: u32) -> usize {
        self.base_channels * self.channel_multiplier.pow(stage)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    InstanceNorm,
    BatchNorm { channels: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    /// Two 3x3 conv + instance norm + ReLU sublayers plus an identity skip.
    ResidualBlock { channels: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize },
    GlobalPool,
    L2Normalize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid)
    }
}

/// An ordered layer list. `taps` holds 1-based ordinals of `conv` layers whose
/// activations are exported alongside the final output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub taps: Vec<usize>,
}

/// Output of shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub output: Vec<usize>,
    pub taps: Vec<Vec<usize>>,
}

impl NetworkSpec {
    fn err(&self, detail: impl Into<String>) -> NnError {
        NnError::Spec { network: self.name.clone(), detail: detail.into() }
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    /// Index of the layer whose output is exported for each tap: the
    /// activation directly following the tapped conv, or the conv itself.
    pub fn tap_layer_indices(&self) -> Result<Vec<usize>> {
        let mut ordinal = 0;
        let mut out = Vec::new();
        let mut prev = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.is_conv() {
                continue;
            }
            ordinal += 1;
            if self.taps.contains(&ordinal) {
                let mut idx = i;
                for (j, next) in self.layers.iter().enumerate().skip(i + 1) {
                    if next.is_conv() || matches!(next, LayerSpec::ConvTranspose { .. }) {
                        break;
                    }
                    if next.is_activation() {
                        idx = j;
                        break;
                    }
                }
                out.push(idx);
            }
        }
        for &t in &self.taps {
            if t == 0 || t > ordinal {
                return Err(self.err(format!("tap ordinal {t} outside 1..={ordinal}")));
            }
            if t <= prev {
                return Err(self.err("tap ordinals must be strictly increasing"));
            }
            prev = t;
        }
        Ok(out)
    }

    /// Validates hyperparameters and channel flow; returns per-sample output
    /// and tap shapes (without the batch axis).
    pub fn infer_shapes(&self) -> Result<ShapeReport> {
        let tap_idx = self.tap_layer_indices()?;
        let mut shape = self.input_shape.clone();
        let mut taps = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = self.layer_shape(i, layer, &shape)?;
            if tap_idx.contains(&i) {
                taps.push(shape.clone());
            }
        }
        Ok(ShapeReport { output: shape, taps })
    }

    fn layer_shape(&self, i: usize, layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
        let need_image = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(self.err(format!("layer {i} expects a [C,H,W] input, got {s:?}"))),
            }
        };
        Ok(match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                let (c, h, w) = need_image(shape)?;
                if c != in_channels || kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(self.err(format!("layer {i}: conv {in_channels}->{out_channels} on {c} channels")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(self.err(format!("layer {i}: kernel {kernel} exceeds padded {h}x{w}")));
                }
                let o = |n: usize| (n + 2 * padding - kernel) / stride + 1;
                vec![out_channels, o(h), o(w)]
            }
            LayerSpec::ConvTranspose { in_channels, out_channels, kernel, stride, padding, output_padding } => {
                let (c, h, w) = need_image(shape)?;
                if c != in_channels || output_padding >= stride || kernel == 0 {
                    return Err(self.err(format!("layer {i}: invalid transposed conv on {c} channels")));
                }
                let o = |n: usize| (n - 1) * stride + kernel + output_padding - 2 * padding;
                vec![out_channels, o(h), o(w)]
            }
            LayerSpec::InstanceNorm | LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid => shape.to_vec(),
            LayerSpec::LeakyRelu { slope } => {
                if !(0.0..1.0).contains(&slope) {
                    return Err(self.err(format!("layer {i}: slope {slope} outside [0,1)")));
                }
                shape.to_vec()
            }
            LayerSpec::BatchNorm { channels } => {
                if shape.first() != Some(&channels) {
                    return Err(self.err(format!("layer {i}: batch norm over {channels} channels, input {shape:?}")));
                }
                shape.to_vec()
            }
            LayerSpec::ResidualBlock { channels } => {
                let (c, _, _) = need_image(shape)?;
                if c != channels {
                    return Err(self.err(format!("layer {i}: residual block of {channels} channels on {c}")));
                }
                shape.to_vec()
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::GlobalPool => vec![need_image(shape)?.0],
            LayerSpec::Linear { in_features, out_features } => {
                if shape != [in_features] {
                    return Err(self.err(format!("layer {i}: linear over {in_features} features, input {shape:?}")));
                }
                vec![out_features]
            }
            LayerSpec::L2Normalize => {
                if shape.len() != 1 {
                    return Err(self.err(format!("layer {i}: l2_normalize expects a vector, got {shape:?}")));
                }
                shape.to_vec()
            }
        })
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn update(&mut self, stats: &BnBatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; statistics are reported back.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Result of [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    pub taps: Vec<Var>,
    /// One entry per batch-norm layer, in order, when run in train mode.
    pub bn_stats: Vec<BnBatchStats>,
}

/// A network spec with its parameters and batch-norm state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Parameter>,
    pub bn: Vec<BnRunning>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Network {
    /// Validates `spec` and initializes parameters (Kaiming-uniform weights,
    /// zero biases, unit/zero batch-norm affine).
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.infer_shapes()?;
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let p = |name: String, value: Tensor| Parameter::new(name, value);
        for (i, layer) in spec.layers.iter().enumerate() {
            let prefix = format!("{}.{i}", spec.name);
            match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    params.push(p(
                        format!("{prefix}.weight"),
                        kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
                    ));
                    params.push(p(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])));
                }
                LayerSpec::ConvTranspose { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    params.push(p(
                        format!("{prefix}.weight"),
                        kaiming_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
                    ));
                    params.push(p(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])));
                }
                LayerSpec::BatchNorm { channels } => {
                    params.push(p(format!("{prefix}.gamma"), Tensor::ones(&[channels])));
                    params.push(p(format!("{prefix}.beta"), Tensor::zeros(&[channels])));
                    bn.push(BnRunning::new(channels));
                }
                LayerSpec::ResidualBlock { channels } => {
                    for sub in ["conv1", "conv2"] {
                        params.push(p(
                            format!("{prefix}.{sub}.weight"),
                            kaiming_uniform(&[channels, channels, 3, 3], channels * 9, rng),
                        ));
                        params.push(p(format!("{prefix}.{sub}.bias"), Tensor::zeros(&[channels])));
                    }
                }
                LayerSpec::Linear { in_features, out_features } => {
                    params.push(p(
                        format!("{prefix}.weight"),
                        kaiming_uniform(&[out_features, in_features], in_features, rng),
                    ));
                    params.push(p(format!("{prefix}.bias"), Tensor::zeros(&[out_features])));
                }
                _ => {}
            }
        }
        let net = Network { spec, params, bn };
        net.check_names()?;
        Ok(net)
    }

    fn check_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(self.spec.err(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Puts every parameter into the graph, as a gradient leaf when
    /// `with_grad` is set and the parameter is trainable, else as a constant.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if with_grad && p.trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Copies gradients of bound parameters into their `grad` fields (zero
    /// where the loss did not reach them).
    pub fn collect_grads(&mut self, grads: &crate::tensor::Gradients<f32>, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = grads.get_or_zeros(v, p.value.shape());
            p.set_grad(g)?;
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[BnBatchStats]) {
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s, BN_MOMENTUM);
        }
    }

    /// Runs the layer list on `x` (`[N, ...input_shape]`).
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, mode: Mode) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(self.spec.err("parameter binding does not match network"));
        }
        let in_shape = g.shape(x);
        if in_shape.len() != self.spec.input_shape.len() + 1 || in_shape[1..] != self.spec.input_shape[..] {
            return Err(NnError::Tensor(TensorError::Shape {
                op: "forward",
                detail: format!(
                    "network '{}' expects [N, {:?}], got {:?}",
                    self.spec.name, self.spec.input_shape, in_shape
                ),
            }));
        }
        let tap_idx = self.spec.tap_layer_indices()?;
        let mut taps = Vec::with_capacity(tap_idx.len());
        let mut bn_stats = Vec::new();
        let mut bn_i = 0;
        let mut pi = 0;
        let mut h = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let y = g.conv2d(h, vars[pi], Some(vars[pi + 1]), stride, padding)?;
                    pi += 2;
                    y
                }
                LayerSpec::ConvTranspose { stride, padding, output_padding, .. } => {
                    let y = g.conv_transpose2d(h, vars[pi], Some(vars[pi + 1]), stride, padding, output_padding)?;
                    pi += 2;
                    y
                }
                LayerSpec::InstanceNorm => g.instance_norm(h, NORM_EPS)?,
                LayerSpec::BatchNorm { .. } => {
                    let (gamma, beta) = (vars[pi], vars[pi + 1]);
                    pi += 2;
                    let y = match mode {
                        Mode::Train => {
                            let (y, stats) = g.batch_norm_train(h, gamma, beta, NORM_EPS)?;
                            bn_stats.push(stats);
                            y
                        }
                        Mode::Eval => {
                            let r = &self.bn[bn_i];
                            let mean: Vec<f64> = r.mean.iter().map(|&v| v as f64).collect();
                            let var: Vec<f64> = r.var.iter().map(|&v| v as f64).collect();
                            g.batch_norm_eval(h, gamma, beta, &mean, &var, NORM_EPS)?
                        }
                    };
                    bn_i += 1;
                    y
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(h, slope)?,
                LayerSpec::Tanh => g.tanh(h),
                LayerSpec::Sigmoid => g.sigmoid(h),
                LayerSpec::ResidualBlock { .. } => {
                    let mut r = h;
                    for _ in 0..2 {
                        r = g.conv2d(r, vars[pi], Some(vars[pi + 1]), 1, 1)?;
                        r = g.instance_norm(r, NORM_EPS)?;
                        r = g.relu(r);
                        pi += 2;
                    }
                    g.add(h, r)?
                }
                LayerSpec::Flatten => {
                    let s = g.shape(h).to_vec();
                    let n = s[0];
                    g.reshape(h, &[n, s[1..].iter().product()])?
                }
                LayerSpec::GlobalPool => g.global_avg_pool(h)?,
                LayerSpec::Linear { .. } => {
                    let y = g.linear(h, vars[pi], Some(vars[pi + 1]))?;
                    pi += 2;
                    y
                }
                LayerSpec::L2Normalize => g.l2_normalize(h)?,
            };
            if tap_idx.contains(&i) {
                taps.push(h);
            }
        }
        Ok(Forward { output: h, taps, bn_stats })
    }

    /// Eval-mode forward of a batch without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, &vars, xv, Mode::Eval)?;
        let taps = f.taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((g.value(f.output).clone(), taps))
    }

    /// Drops every layer after the last tap (and their parameters).
    pub fn truncate_after_last_tap(&mut self) -> Result<()> {
        let idx = self.spec.tap_layer_indices()?;
        let Some(&last) = idx.last() else {
            return Err(self.spec.err("network has no taps to truncate at"));
        };
        let mut keep_params = 0;
        let mut keep_bn = 0;
        for layer in &self.spec.layers[..=last] {
            keep_params += match layer {
                LayerSpec::Conv { .. }
                | LayerSpec::ConvTranspose { .. }
                | LayerSpec::BatchNorm { .. }
                | LayerSpec::Linear { .. } => 2,
                LayerSpec::ResidualBlock { .. } => 4,
                _ => 0,
            };
            if matches!(layer, LayerSpec::BatchNorm { .. }) {
                keep_bn += 1;
            }
        }
        self.spec.layers.truncate(last + 1);
        self.params.truncate(keep_params);
        self.bn.truncate(keep_bn);
        self.spec.infer_shapes()?;
        Ok(())
    }

    /// Structural validation after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.spec.infer_shapes()?;
        self.check_names()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fresh = Network::new(self.spec.clone(), &mut rng)?;
        if fresh.params.len() != self.params.len() || fresh.bn.len() != self.bn.len() {
            return Err(self.spec.err("parameter list does not match layer list"));
        }
        for (a, b) in fresh.params.iter().zip(&self.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(self.spec.err(format!("parameter {} has unexpected name or shape", b.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            name: "tiny".into(),
            input_shape: vec![3, 8, 8],
            layers: vec![
                LayerSpec::conv(3, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(4, 4, 3, 2, 1),
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
                LayerSpec::GlobalPool,
                LayerSpec::Linear { in_features: 4, out_features: 2 },
            ],
            taps: vec![1, 2],
        }
    }

    #[test]
    fn taps_follow_activation_after_conv() {
        let spec = tiny_spec();
        assert_eq!(spec.tap_layer_indices().unwrap(), vec![1, 4]);
        let shapes = spec.infer_shapes().unwrap();
        assert_eq!(shapes.taps, vec![vec![4, 8, 8], vec![4, 4, 4]]);
        assert_eq!(shapes.output, vec![2]);
    }

    #[test]
    fn tap_ordinals_are_validated() {
        let mut spec = tiny_spec();
        spec.taps = vec![3];
        assert!(spec.infer_shapes().is_err());
        spec.taps = vec![2, 1];
        assert!(spec.infer_shapes().is_err());
    }

    #[test]
    fn channel_flow_is_validated() {
        let mut spec = tiny_spec();
        spec.layers[2] = LayerSpec::conv(5, 4, 3, 2, 1);
        assert!(Network::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::new(tiny_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.infer(&Tensor::zeros(&[1, 3, 9, 9])).is_err());
        assert!(net.infer(&Tensor::zeros(&[2, 3, 8, 8])).is_ok());
    }

    #[test]
    fn train_forward_then_backward_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(tiny_spec(), &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let x = g.constant(Tensor::randn(&[3, 3, 8, 8], &mut rng));
        let f = net.forward(&mut g, &vars, x, Mode::Train).unwrap();
        assert_eq!(f.bn_stats.len(), 1);
        let loss = g.mean(f.output);
        let grads = g.backward(loss).unwrap();
        for (p, &v) in net.params.iter().zip(&vars) {
            let gr = grads.get(v).unwrap_or_else(|| panic!("no gradient for {}", p.name));
            assert!(gr.max_abs() > 0.0, "zero gradient for {}", p.name);
        }
        net.collect_grads(&grads, &vars).unwrap();
        net.update_running_stats(&f.bn_stats);
        assert_ne!(net.bn[0], BnRunning::new(4));
    }

    #[test]
    fn truncation_drops_head_parameters() {
        let mut net = Network::new(tiny_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.truncate_after_last_tap().unwrap();
        assert_eq!(net.spec.layers.len(), 5);
        assert_eq!(net.params.len(), 6);
        net.validate().unwrap();
    }

    #[test]
    fn scale_config_invariants() {
        assert!(ScaleConfig::default().validate().is_ok());
        assert!(ScaleConfig { image_size: 44, ..Default::default() }.validate().is_err());
        assert!(ScaleConfig { base_channels: 2, ..Default::default() }.validate().is_err());
    }
}
