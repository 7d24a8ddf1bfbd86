//! Alternating adversarial training of the generator for one target age
//! cluster, with checkpointing and per-iteration metrics.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_network, save_network, Checkpoint, CheckpointError, RngState, FORMAT_VERSION, MAGIC};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critics::{gan_d_loss_ls, gan_g_loss_ls, identity_loss, pixel_loss, total_d_loss, total_g_loss, LossWeights};
use crate::faces::{AgeCluster, DatasetPartition};
use crate::nn::{
    build_generator, build_one_pathway_discriminator, build_pyramid_discriminator, Discriminator, DiscriminatorKind,
    Mode, Network, NnError, ScaleConfig,
};
use crate::pretrain::infer_all;
use crate::pretrain::PretrainError;
use crate::tensor::{lr_at, AdamConfig, AdamState, Graph, Tensor, TensorError};

pub const GENERATOR: &str = "generator";
pub const PHI_AGE: &str = "phi_age";
pub const PHI_ID: &str = "phi_id";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {loss} at iteration {iteration}: {value}")]
    NonFinite { iteration: u64, loss: &'static str, value: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub target_cluster: usize,
    pub weights: LossWeights,
    pub lr0: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub pixel_period: u64,
    pub seed: u64,
    pub scale: ScaleConfig,
    /// L2 penalty folded into the Adam gradients of G and D.
    pub weight_decay: f64,
    pub discriminator: DiscriminatorKind,
    /// When false the `wall_ms` metrics column is left blank, making metric
    /// files comparable byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_cluster: 1,
            weights: LossWeights::morph(),
            lr0: 1e-4,
            batch_size: 8,
            total_iterations: 2000,
            pixel_period: 5,
            seed: 1,
            scale: ScaleConfig::default(),
            weight_decay: 0.0,
            discriminator: DiscriminatorKind::Pyramid,
            record_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.target_cluster) {
            return Err(TrainError::Config(format!("target_cluster must be 1, 2 or 3, got {}", self.target_cluster)));
        }
        if self.batch_size < 1 || self.pixel_period < 1 {
            return Err(TrainError::Config("batch_size and pixel_period must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("lr0 must be > 0 and weight_decay >= 0".into()));
        }
        self.weights.validate()?;
        self.scale.validate()?;
        Ok(())
    }

    pub fn includes_pixel(&self, iteration: u64) -> bool {
        iteration % self.pixel_period == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    discriminator_kind: DiscriminatorKind,
    tap_index: Vec<usize>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Next iteration to run.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub generator: Network,
    pub discriminator: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: Vec<AdamState>,
}

impl TrainState {
    /// Fresh networks for `config`; the critic is shaped by `phi_age`'s taps.
    pub fn new(config: TrainConfig, phi_age: &Network) -> Result<Self> {
        config.validate()?;
        let taps = phi_age.spec.infer_shapes()?.taps;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = build_generator(&config.scale, &mut rng)?;
        let discriminator = match config.discriminator {
            DiscriminatorKind::Pyramid => build_pyramid_discriminator(&taps, &mut rng)?,
            DiscriminatorKind::OnePathway => build_one_pathway_discriminator(&taps, &mut rng)?,
        };
        let adam_cfg = AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::default() };
        let adam_g = AdamState::new(&generator.params, adam_cfg);
        let adam_d = discriminator.pathways.iter().map(|p| AdamState::new(&p.params, adam_cfg)).collect();
        Ok(TrainState { config, iteration: 0, rng, generator, discriminator, adam_g, adam_d })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            discriminator_kind: self.discriminator.kind,
            tap_index: self.discriminator.tap_index.clone(),
        };
        let mut networks = vec![self.generator.clone()];
        networks.extend(self.discriminator.pathways.iter().cloned());
        let mut optimizers = vec![(GENERATOR.to_string(), self.adam_g.clone())];
        for (p, st) in self.discriminator.pathways.iter().zip(&self.adam_d) {
            optimizers.push((p.name().to_string(), st.clone()));
        }
        Ok(Checkpoint {
            config_json: serde_json::to_string(&self.config).map_err(|e| TrainError::Config(e.to_string()))?,
            meta_json: serde_json::to_string(&meta).map_err(|e| TrainError::Config(e.to_string()))?,
            iteration: self.iteration,
            rng: Some(RngState::capture(&self.rng)),
            networks,
            optimizers,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |field: &str, detail: String| CheckpointError::Invalid { field: field.into(), detail };
        let config: TrainConfig = serde_json::from_str(&ck.config_json).map_err(|e| bad("config", e.to_string()))?;
        config.validate()?;
        let meta: Meta = serde_json::from_str(&ck.meta_json).map_err(|e| bad("meta", e.to_string()))?;
        let generator = ck.network(GENERATOR)?.clone();
        let pathways: Vec<Network> = ck.networks.iter().filter(|n| n.name() != GENERATOR).cloned().collect();
        let discriminator = Discriminator { kind: meta.discriminator_kind, pathways, tap_index: meta.tap_index };
        discriminator.validate()?;
        let opt = |name: &str| -> Result<AdamState> {
            let st = ck.optimizers.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
            Ok(st.ok_or_else(|| bad(name, "optimizer state missing".into()))?)
        };
        let adam_g = opt(GENERATOR)?;
        let adam_d = discriminator.pathways.iter().map(|p| opt(p.name())).collect::<Result<Vec<_>>>()?;
        let rng = ck.rng.as_ref().ok_or_else(|| bad("rng", "missing".into()))?.restore();
        Ok(TrainState { config, iteration: ck.iteration, rng, generator, discriminator, adam_g, adam_d })
    }
}

/// Frozen networks plus per-sample caches of their outputs on the training
/// pools (the networks never change, so the caches are exact).
pub struct TrainContext {
    pub phi_age: Network,
    pub phi_id: Network,
    /// Young training images, each `[1,3,H,W]`.
    young: Vec<Tensor>,
    young_taps: Vec<Vec<Tensor>>,
    young_emb: Vec<Tensor>,
    old_taps: Vec<Vec<Tensor>>,
}

impl TrainContext {
    pub fn new(config: &TrainConfig, train: &DatasetPartition, phi_age: Network, phi_id: Network) -> Result<Self> {
        config.validate()?;
        if !phi_age.is_frozen() || !phi_id.is_frozen() {
            return Err(TrainError::Config("phi_age and phi_id must be pretrained and frozen".into()));
        }
        if phi_age.spec.input_shape[..] != config.scale.image_shape()[..] {
            return Err(TrainError::Config(format!(
                "frozen networks expect {:?} images but the run uses {:?}",
                phi_age.spec.input_shape,
                config.scale.image_shape()
            )));
        }
        let young_pool = train.cluster(AgeCluster::new(0).expect("cluster 0"));
        let old_pool = train.cluster(AgeCluster::new(config.target_cluster).map_err(|e| TrainError::Config(e.to_string()))?);
        if young_pool.is_empty() || old_pool.is_empty() {
            return Err(TrainError::Config("training partition lacks young or target-cluster samples".into()));
        }
        let young_refs: Vec<&Tensor> = young_pool.iter().map(|s| &s.image).collect();
        let young = young_refs.iter().map(|t| Tensor::stack(&[*t])).collect::<Result<Vec<_>, _>>()?;
        let old_refs: Vec<&Tensor> = old_pool.iter().map(|s| &s.image).collect();
        let young_taps = infer_all(&phi_age, &young_refs)?.into_iter().map(|(_, t)| t).collect();
        let old_taps = infer_all(&phi_age, &old_refs)?.into_iter().map(|(_, t)| t).collect();
        let young_emb = infer_all(&phi_id, &young_refs)?.into_iter().map(|(e, _)| e).collect();
        Ok(TrainContext { phi_age, phi_id, young, young_taps, young_emb, old_taps })
    }
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::cat_batch(&idx.iter().map(|&i| &items[i]).collect::<Vec<_>>())?)
}

fn gather_taps(items: &[Vec<Tensor>], idx: &[usize]) -> Result<Vec<Tensor>> {
    let levels = items[0].len();
    (0..levels)
        .map(|l| Ok(Tensor::cat_batch(&idx.iter().map(|&i| &items[i][l]).collect::<Vec<_>>())?))
        .collect()
}

fn finite(iteration: u64, loss: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite { iteration, loss, value })
    }
}

/// Runs one iteration: a critic step on old (positive) versus young and
/// generated (negative) taps, then a generator step against the updated
/// critic.
pub fn train_step(state: &mut TrainState, ctx: &TrainContext) -> Result<MetricsRow> {
    let start = Instant::now();
    let cfg = state.config;
    let it = state.iteration;
    let lr = lr_at(it, cfg.lr0);
    let n = cfg.batch_size;
    let young_idx: Vec<usize> = (0..n).map(|_| state.rng.gen_range(0..ctx.young.len())).collect();
    let old_idx: Vec<usize> = (0..n).map(|_| state.rng.gen_range(0..ctx.old_taps.len())).collect();
    let young = gather(&ctx.young, &young_idx)?;
    let young_taps = gather_taps(&ctx.young_taps, &young_idx)?;
    let old_taps = gather_taps(&ctx.old_taps, &old_idx)?;

    // generator graph: G(x) and its age taps, reused by both steps
    let mut g = Graph::new();
    let g_vars = state.generator.bind(&mut g, true);
    let x = g.constant(young.clone());
    let gen = state.generator.forward(&mut g, &g_vars, x, Mode::Train)?.output;
    let age_vars = ctx.phi_age.bind(&mut g, false);
    let gen_taps = ctx.phi_age.forward(&mut g, &age_vars, gen, Mode::Eval)?.taps;

    // critic step
    let d_loss_value = {
        let mut gd = Graph::new();
        let mut taps = Vec::with_capacity(gen_taps.len());
        for (l, &gt) in gen_taps.iter().enumerate() {
            let o = gd.constant(old_taps[l].clone());
            let y = gd.constant(young_taps[l].clone());
            let q = gd.constant(g.value(gt).clone());
            taps.push(gd.concat(&[o, y, q], 0)?);
        }
        let d_vars = state.discriminator.bind(&mut gd, true);
        let (score, stats) = state.discriminator.forward(&mut gd, &d_vars, &taps, Mode::Train)?;
        let s_old = gd.narrow(score, 0, 0, n)?;
        let s_young = gd.narrow(score, 0, n, n)?;
        let s_gen = gd.narrow(score, 0, 2 * n, n)?;
        let d_loss = total_d_loss(gan_d_loss_ls(&mut gd, s_old, s_young, s_gen)?);
        let value = finite(it, "L_GAN_D", gd.value(d_loss).item()? as f64)?;
        let grads = gd.backward(d_loss)?;
        for ((net, vars), adam) in state.discriminator.pathways.iter_mut().zip(&d_vars).zip(&mut state.adam_d) {
            net.collect_grads(&grads, vars)?;
            adam.step(&mut net.params, lr)?;
        }
        state.discriminator.update_running_stats(&stats);
        value
    };

    // generator step against the updated critic
    let mut taps = Vec::with_capacity(gen_taps.len());
    for (l, &gt) in gen_taps.iter().enumerate() {
        let o = g.constant(old_taps[l].clone());
        let y = g.constant(young_taps[l].clone());
        taps.push(g.concat(&[o, y, gt], 0)?);
    }
    let d_const = state.discriminator.bind(&mut g, false);
    let (score, _) = state.discriminator.forward(&mut g, &d_const, &taps, Mode::Train)?;
    let s_gen = g.narrow(score, 0, 2 * n, n)?;
    let gan = gan_g_loss_ls(&mut g, s_gen)?;
    let id_vars = ctx.phi_id.bind(&mut g, false);
    let emb_gen = ctx.phi_id.forward(&mut g, &id_vars, gen, Mode::Eval)?.output;
    let emb_young = g.constant(gather(&ctx.young_emb, &young_idx)?);
    let ident = identity_loss(&mut g, emb_young, emb_gen)?;
    let pixel = if cfg.includes_pixel(it) { Some(pixel_loss(&mut g, x, gen)?) } else { None };
    let total = total_g_loss(&mut g, gan, pixel, ident, &cfg.weights)?;
    let row = MetricsRow {
        iteration: it,
        lr,
        gan_d: d_loss_value,
        gan_g: finite(it, "L_GAN_G", g.value(gan).item()? as f64)?,
        pixel: pixel.map(|p| g.value(p).item().map(|v| v as f64)).transpose()?,
        identity: finite(it, "L_identity", g.value(ident).item()? as f64)?,
        total: finite(it, "L_G", g.value(total).item()? as f64)?,
        wall_ms: None,
    };
    let grads = g.backward(total)?;
    state.generator.collect_grads(&grads, &g_vars)?;
    state.adam_g.step(&mut state.generator.params, lr)?;
    state.iteration += 1;
    let wall_ms = cfg.record_wall_clock.then(|| start.elapsed().as_secs_f64() * 1e3);
    Ok(MetricsRow { wall_ms, ..row })
}

/// Options for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop before this iteration (defaults to the configured total).
    pub stop_at: Option<u64>,
    /// Where to write the state if a loss turns non-finite.
    pub diagnostic_checkpoint: Option<PathBuf>,
}

/// Trains from `state.iteration` until the configured total (or `stop_at`),
/// handing every metrics row to `sink`.
pub fn train(
    state: &mut TrainState,
    ctx: &TrainContext,
    opts: &TrainOptions,
    sink: &mut dyn FnMut(&MetricsRow) -> std::io::Result<()>,
) -> Result<()> {
    let end = opts.stop_at.unwrap_or(state.config.total_iterations).min(state.config.total_iterations);
    while state.iteration < end {
        let row = match train_step(state, ctx) {
            Ok(row) => row,
            Err(e @ TrainError::NonFinite { .. }) => {
                if let Some(path) = &opts.diagnostic_checkpoint {
                    state.to_checkpoint()?.save(path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        sink(&row)?;
        if row.iteration % 100 == 0 {
            log::info!(
                "iter {:>6}  lr {:.2e}  L_D {:.4}  L_G_gan {:.4}  L_id {:.4}  L_G {:.4}",
                row.iteration,
                row.lr,
                row.gan_d,
                row.gan_g,
                row.identity,
                row.total
            );
        }
    }
    Ok(())
}

/// Eval-mode generator pass, clamped to `[-1,1]`.
pub fn generate(generator: &Network, images: &Tensor) -> Result<Tensor> {
    let want = &generator.spec.input_shape;
    let got = images.shape();
    if got.len() != 4 || got[1..] != want[..] {
        return Err(TrainError::Config(format!("generator expects [N, {want:?}] inputs, got {got:?}")));
    }
    let (y, _) = generator.infer(images)?;
    Ok(y.map(|v| v.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { target_cluster: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { pixel_period: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pixel_schedule() {
        let cfg = TrainConfig::default();
        let hits: Vec<u64> = (0..16).filter(|&i| cfg.includes_pixel(i)).collect();
        assert_eq!(hits, vec![0, 5, 10, 15]);
        assert_eq!((0..2000).filter(|&i| cfg.includes_pixel(i)).count(), 400);
    }
}
