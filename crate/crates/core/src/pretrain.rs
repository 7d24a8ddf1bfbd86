//! Pretraining of the frozen auxiliary networks: the age extractor as a
//! one-vs-all cluster classifier and the identity descriptor with a triplet
//! objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faces::{AgeCluster, DatasetPartition, SyntheticSample};
use crate::nn::{build_age_extractor, build_identity_descriptor, Mode, Network, NnError, ScaleConfig};
use crate::tensor::{lr_at, AdamConfig, AdamState, Graph, Result as TResult, Tensor, TensorError, Var};

pub const DEFAULT_MARGIN: f64 = 0.2;
const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("{network} diverged at iteration {iteration}: loss {loss}")]
    Diverged { network: String, iteration: u64, loss: f64 },
    #[error("insufficient data: {0}")]
    Data(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
    /// Seeded held-out pairs used to score the identity descriptor.
    pub eval_pairs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { iterations: 2000, batch_size: 8, lr: 1e-3, margin: DEFAULT_MARGIN, seed: 17, eval_pairs: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub network: String,
    pub iterations: u64,
    pub seed: u64,
    /// Mean loss over the last 100 iterations.
    pub final_loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Mean of `max(0, |a−p|² − |a−n|² + margin)` over the batch.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> TResult<Var> {
    if margin <= 0.0 {
        return Err(TensorError::Contract { op: "triplet_loss", detail: format!("margin {margin} must be > 0") });
    }
    let dp = g.sub(anchor, positive)?;
    let dp = g.square(dp);
    let dp = g.sum_axis(dp, 1)?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.square(dn);
    let dn = g.sum_axis(dn, 1)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

fn batch(samples: &[&SyntheticSample]) -> TResult<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

fn check_finite(network: &str, iteration: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(PretrainError::Diverged { network: network.into(), iteration, loss })
    }
}

/// Eval-mode outputs for every image, in order, computed in chunks.
pub fn infer_all(net: &Network, images: &[&Tensor]) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = Tensor::stack(chunk)?;
        let (y, taps) = net.infer(&x)?;
        for i in 0..chunk.len() {
            let row = y.narrow_batch(i, 1)?;
            let t = taps.iter().map(|t| t.narrow_batch(i, 1)).collect::<TResult<Vec<_>>>()?;
            out.push((row, t));
        }
    }
    Ok(out)
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Trains the age extractor, evaluates it on `test`, then drops its head and
/// freezes it.
pub fn pretrain_age_extractor(
    train: &DatasetPartition,
    test: &DatasetPartition,
    scale: &ScaleConfig,
    cfg: &PretrainConfig,
) -> Result<(Network, PretrainReport)> {
    let pool: Vec<&SyntheticSample> = train.samples().collect();
    let populated = train.clusters.iter().filter(|c| !c.is_empty()).count();
    if populated < 2 {
        return Err(PretrainError::Data("age pretraining needs at least two populated clusters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_age_extractor(scale, &mut rng)?;
    let mut adam = AdamState::new(&net.params, AdamConfig::default());
    let labels = scale.n_age_labels;
    let mut recent = Vec::new();
    for it in 0..cfg.iterations {
        let picks: Vec<&SyntheticSample> = (0..cfg.batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let mut target = vec![0f32; picks.len() * labels];
        for (i, s) in picks.iter().enumerate() {
            target[i * labels + s.cluster.index()] = 1.0;
        }
        let target = Tensor::new(&[picks.len(), labels], target)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let x = g.constant(batch(&picks)?);
        let f = net.forward(&mut g, &vars, x, Mode::Train)?;
        let loss = g.bce_with_logits(f.output, &target)?;
        let lv = g.value(loss).item()? as f64;
        check_finite("phi_age", it, lv)?;
        recent.push(lv);
        let grads = g.backward(loss)?;
        net.collect_grads(&grads, &vars)?;
        adam.step(&mut net.params, lr_at(it, cfg.lr))?;
    }

    let samples: Vec<&SyntheticSample> = test.samples().collect();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let outputs = infer_all(&net, &images)?;
    let mut correct = 0usize;
    let mut label_hits = vec![0usize; labels];
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for (s, (logits, taps)) in samples.iter().zip(&outputs) {
        let l = logits.data();
        correct += usize::from(argmax(l) == s.cluster.index());
        for (k, hits) in label_hits.iter_mut().enumerate() {
            let on = l[k] > 0.0;
            *hits += usize::from(on == (s.cluster.index() == k));
        }
        pooled.push(pool_channels(taps.last().expect("extractor has taps")));
    }
    let n = samples.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("heldout_cluster_accuracy".to_string(), correct as f64 / n);
    for (k, hits) in label_hits.iter().enumerate() {
        metrics.insert(format!("label_{k}_accuracy"), *hits as f64 / n);
    }
    metrics.insert(
        "tap4_nearest_centroid_accuracy".to_string(),
        nearest_centroid_accuracy(&pooled, &samples.iter().map(|s| s.cluster).collect::<Vec<_>>()),
    );
    net.truncate_after_last_tap()?;
    net.set_trainable(false);
    let report = PretrainReport {
        network: "phi_age".into(),
        iterations: cfg.iterations,
        seed: cfg.seed,
        final_loss: tail_mean(&recent),
        metrics,
    };
    Ok((net, report))
}

fn tail_mean(v: &[f64]) -> f64 {
    let tail = &v[v.len().saturating_sub(100)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn pool_channels(tap: &Tensor) -> Vec<f64> {
    let s = tap.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    tap.data().chunks(hw).take(c).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64).collect()
}

/// Leave-one-out nearest-centroid accuracy of `features` against cluster labels.
fn nearest_centroid_accuracy(features: &[Vec<f64>], labels: &[AgeCluster]) -> f64 {
    let dim = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; AgeCluster::ALL.len()];
    let mut counts = vec![0usize; AgeCluster::ALL.len()];
    for (f, c) in features.iter().zip(labels) {
        counts[c.index()] += 1;
        for (s, v) in sums[c.index()].iter_mut().zip(f) {
            *s += v;
        }
    }
    let mut correct = 0;
    for (f, c) in features.iter().zip(labels) {
        let mut best = (f64::INFINITY, usize::MAX);
        for k in 0..sums.len() {
            let n = counts[k] - usize::from(k == c.index());
            if n == 0 {
                continue;
            }
            let d: f64 = (0..dim)
                .map(|j| {
                    let own = if k == c.index() { f[j] } else { 0.0 };
                    ((sums[k][j] - own) / n as f64 - f[j]).powi(2)
                })
                .sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        correct += usize::from(best.1 == c.index());
    }
    correct as f64 / features.len().max(1) as f64
}

fn by_identity(part: &DatasetPartition) -> Vec<Vec<&SyntheticSample>> {
    let mut groups = vec![Vec::new(); part.identities.len()];
    for s in part.samples() {
        groups[s.identity_index].push(s);
    }
    groups
}

/// Draws (anchor, positive, negative) with the positive from the anchor's
/// identity at a different age and the negative from another identity.
fn draw_triplet<'a>(
    groups: &[Vec<&'a SyntheticSample>],
    eligible: &[usize],
    rng: &mut impl Rng,
) -> (&'a SyntheticSample, &'a SyntheticSample, &'a SyntheticSample) {
    let id = eligible[rng.gen_range(0..eligible.len())];
    let g = &groups[id];
    let a = rng.gen_range(0..g.len());
    let mut p = rng.gen_range(0..g.len() - 1);
    if p >= a {
        p += 1;
    }
    let mut other = rng.gen_range(0..groups.len() - 1);
    if other >= id {
        other += 1;
    }
    // identities without samples fall back to the next populated one
    while groups[other].is_empty() || other == id {
        other = (other + 1) % groups.len();
    }
    let neg = &groups[other];
    (g[a], g[p], neg[rng.gen_range(0..neg.len())])
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Seeded same/different pairs from `part`: for each, the anchor-positive and
/// anchor-negative embedding distances.
fn pair_distances(net: &Network, part: &DatasetPartition, pairs: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let groups = by_identity(part);
    let eligible: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].len() >= 2).collect();
    if eligible.is_empty() || groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(PretrainError::Data("pair evaluation needs two identities with repeat samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets: Vec<_> = (0..pairs).map(|_| draw_triplet(&groups, &eligible, &mut rng)).collect();
    let images: Vec<&Tensor> = triplets.iter().flat_map(|(a, p, n)| [&a.image, &p.image, &n.image]).collect();
    let emb = infer_all(net, &images)?;
    Ok(emb
        .chunks(3)
        .map(|t| (sq_dist(t[0].0.data(), t[1].0.data()), sq_dist(t[0].0.data(), t[2].0.data())))
        .collect())
}

/// Threshold on squared distance maximizing same/different accuracy.
fn best_threshold(pairs: &[(f64, f64)]) -> f64 {
    let mut cands: Vec<f64> = pairs.iter().flat_map(|&(p, n)| [p, n]).collect();
    cands.sort_by(f64::total_cmp);
    let acc = |t: f64| pairs.iter().map(|&(p, n)| usize::from(p <= t) + usize::from(n > t)).sum::<usize>();
    cands.into_iter().max_by_key(|&t| acc(t)).unwrap_or(DEFAULT_MARGIN)
}

/// Trains the identity descriptor with uniformly mined triplets, reports
/// held-out pair metrics, and freezes it.
pub fn pretrain_identity_descriptor(
    train: &DatasetPartition,
    test: &DatasetPartition,
    scale: &ScaleConfig,
    cfg: &PretrainConfig,
) -> Result<(Network, PretrainReport)> {
    let groups = by_identity(train);
    let eligible: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].len() >= 2).collect();
    if eligible.is_empty() || groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(PretrainError::Data("identity pretraining needs at least two identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1D);
    let mut net = build_identity_descriptor(scale, &mut rng)?;
    let mut adam = AdamState::new(&net.params, AdamConfig::default());
    let mut recent = Vec::new();
    for it in 0..cfg.iterations {
        let trip: Vec<_> = (0..cfg.batch_size).map(|_| draw_triplet(&groups, &eligible, &mut rng)).collect();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        // anchors, positives and negatives share one forward pass
        let mut imgs: Vec<&SyntheticSample> = trip.iter().map(|t| t.0).collect();
        imgs.extend(trip.iter().map(|t| t.1));
        imgs.extend(trip.iter().map(|t| t.2));
        let x = g.constant(batch(&imgs)?);
        let f = net.forward(&mut g, &vars, x, Mode::Train)?;
        let n = cfg.batch_size;
        let a = g.narrow(f.output, 0, 0, n)?;
        let p = g.narrow(f.output, 0, n, n)?;
        let q = g.narrow(f.output, 0, 2 * n, n)?;
        let loss = triplet_loss(&mut g, a, p, q, cfg.margin)?;
        let lv = g.value(loss).item()? as f64;
        check_finite("phi_id", it, lv)?;
        recent.push(lv);
        let grads = g.backward(loss)?;
        net.collect_grads(&grads, &vars)?;
        adam.step(&mut net.params, lr_at(it, cfg.lr))?;
    }

    let calib = pair_distances(&net, train, cfg.eval_pairs, cfg.seed ^ 0xCA1)?;
    let threshold = best_threshold(&calib);
    let held = pair_distances(&net, test, cfg.eval_pairs, cfg.seed ^ 0x7E57)?;
    let n = held.len() as f64;
    let ordering = held.iter().filter(|(p, q)| p < q).count() as f64 / n;
    let verify = held.iter().map(|&(p, q)| usize::from(p <= threshold) + usize::from(q > threshold)).sum::<usize>()
        as f64
        / (2.0 * n);
    let mut metrics = BTreeMap::new();
    metrics.insert("heldout_pair_ordering".to_string(), ordering);
    metrics.insert("heldout_verification_accuracy".to_string(), verify);
    metrics.insert("threshold_sq_distance".to_string(), threshold);
    net.set_trainable(false);
    let report = PretrainReport {
        network: "phi_id".into(),
        iterations: cfg.iterations,
        seed: cfg.seed,
        final_loss: tail_mean(&recent),
        metrics,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faces::{sample_dataset, DatasetConfig};

    fn emb(g: &mut Graph, v: &[f32]) -> Var {
        g.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn triplet_hand_cases() {
        let mut g = Graph::new();
        let (a, p, n) = (emb(&mut g, &[1.0, 0.0]), emb(&mut g, &[0.0, 1.0]), emb(&mut g, &[-1.0, 0.0]));
        let l = triplet_loss(&mut g, a, p, n, 0.2).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let l = triplet_loss(&mut g, a, a, a, 0.2).unwrap();
        assert!((g.value(l).item().unwrap() - 0.2).abs() < 1e-7);
        let l = triplet_loss(&mut g, a, a, n, 0.2).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        assert!(triplet_loss(&mut g, a, a, n, 0.0).is_err());
    }

    #[test]
    fn untrained_head_starts_near_ln2() {
        let scale = ScaleConfig { base_channels: 4, ..Default::default() };
        let d = sample_dataset(&DatasetConfig {
            master_seed: 1,
            identities_per_split: 4,
            samples_per_cluster: 4,
            image_size: 48,
        })
        .unwrap();
        let cfg = PretrainConfig { iterations: 1, batch_size: 4, ..Default::default() };
        let (net, report) = pretrain_age_extractor(&d.train, &d.test, &scale, &cfg).unwrap();
        assert!(net.is_frozen());
        assert_eq!(net.spec.layers.len(), 20);
        assert!((report.final_loss - 2f64.ln()).abs() < 0.3, "{}", report.final_loss);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let scale = ScaleConfig { base_channels: 4, ..Default::default() };
        let d = sample_dataset(&DatasetConfig {
            master_seed: 2,
            identities_per_split: 4,
            samples_per_cluster: 4,
            image_size: 48,
        })
        .unwrap();
        let cfg = PretrainConfig { iterations: 3, batch_size: 2, eval_pairs: 10, ..Default::default() };
        let a = pretrain_identity_descriptor(&d.train, &d.test, &scale, &cfg).unwrap();
        let b = pretrain_identity_descriptor(&d.train, &d.test, &scale, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
