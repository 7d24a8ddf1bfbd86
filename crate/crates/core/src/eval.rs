//! Evaluation of trained generators with the analytic oracles: per-cluster
//! estimated ages against natural-face benchmarks, pairwise identity
//! verification, and the pyramid versus one-pathway comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faces::{confidence, oracle_age, oracle_identity_distance, AgeCluster, DatasetPartition};
use crate::nn::Network;
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{generate, TrainConfig, TrainError};

/// Confidence assigned to a distance exactly at the match threshold.
pub const THRESHOLD_CONFIDENCE: f64 = 76.5;
pub const DEFAULT_FAR: f64 = 1e-2;
pub const DEFAULT_CALIBRATION_PAIRS: usize = 2000;
const GEN_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing generator for target cluster {0}")]
    MissingGenerator(usize),
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
    #[error("evaluation input: {0}")]
    Input(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    (mean, var.sqrt())
}

/// Match threshold on oracle distance and the confidence scale derived
/// from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub delta0: f64,
    pub false_accept_rate: f64,
    pub impostor_pairs: usize,
    pub seed: u64,
}

impl Calibration {
    pub fn from_tau(tau: f64, false_accept_rate: f64, impostor_pairs: usize, seed: u64) -> Self {
        let delta0 = tau / (100.0 / THRESHOLD_CONFIDENCE).ln();
        Calibration { tau, delta0, false_accept_rate, impostor_pairs, seed }
    }

    pub fn confidence(&self, delta: f64) -> f64 {
        confidence(delta, self.delta0)
    }

    pub fn accepts(&self, delta: f64) -> bool {
        delta <= self.tau
    }
}

/// Picks `tau` on seeded different-identity pairs of natural faces so that
/// at most `far` of them fall at or below it.
pub fn calibrate_threshold(partition: &DatasetPartition, pairs: usize, far: f64, seed: u64) -> Result<Calibration> {
    if !(far > 0.0 && far < 1.0) || pairs == 0 {
        return Err(EvalError::Input(format!("need pairs > 0 and 0 < far < 1, got {pairs}, {far}")));
    }
    let samples: Vec<_> = partition.samples().collect();
    if partition.identities.len() < 2 {
        return Err(EvalError::Input("calibration needs at least two identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(pairs);
    while picks.len() < pairs {
        let (a, b) = (rng.gen_range(0..samples.len()), rng.gen_range(0..samples.len()));
        if samples[a].identity_index != samples[b].identity_index {
            picks.push((a, b));
        }
    }
    let mut dist: Vec<f64> = picks
        .par_iter()
        .filter_map(|&(a, b)| oracle_identity_distance(&samples[a].image, &samples[b].image))
        .collect();
    if dist.is_empty() {
        return Err(EvalError::Input("no calibration pair had both faces detected".into()));
    }
    dist.sort_by(|a, b| a.total_cmp(b));
    // largest tau with #{d <= tau} / n <= far: just below the k-th smallest
    let k = (far * dist.len() as f64).floor() as usize;
    let tau = if k == 0 {
        dist[0] * 0.5
    } else if k >= dist.len() {
        dist[dist.len() - 1]
    } else {
        let (lo, hi) = (dist[k - 1], dist[k]);
        if hi > lo { 0.5 * (lo + hi) } else { lo }
    };
    Ok(Calibration::from_tau(tau, far, dist.len(), seed))
}

/// Young test faces and their synthesized older versions.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub inputs: Vec<Tensor>,
    /// `aged[k]` holds the faces for target cluster `k + 1`.
    pub aged: [Vec<Tensor>; 3],
}

/// Runs every generator over images, in fixed-size chunks.
pub fn synthesize(generator: &Network, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(GEN_BATCH) {
        let y = generate(generator, &Tensor::stack(&chunk.iter().collect::<Vec<_>>())?)?;
        let inner = y.shape()[1..].to_vec();
        for i in 0..chunk.len() {
            out.push(y.narrow_batch(i, 1)?.reshape(&inner)?);
        }
    }
    Ok(out)
}

impl Synthesis {
    /// Ages every cluster-0 face of `test` with the generators for clusters
    /// 1, 2 and 3 (in that order).
    pub fn run(generators: &[Option<&Network>], test: &DatasetPartition) -> Result<Self> {
        let inputs: Vec<Tensor> = test.cluster(AgeCluster::new(0).expect("cluster 0")).iter().map(|s| s.image.clone()).collect();
        let mut aged: [Vec<Tensor>; 3] = Default::default();
        for (k, slot) in aged.iter_mut().enumerate() {
            let g = generators.get(k).copied().flatten().ok_or(EvalError::MissingGenerator(k + 1))?;
            *slot = synthesize(g, &inputs)?;
        }
        Ok(Synthesis { inputs, aged })
    }

    /// Control whose "aged" faces are the inputs themselves.
    pub fn passthrough(inputs: Vec<Tensor>) -> Self {
        let aged = [inputs.clone(), inputs.clone(), inputs.clone()];
        Synthesis { inputs, aged }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub cluster: usize,
    pub mean: f64,
    pub std: f64,
    pub detected: usize,
    pub undetected: usize,
    /// Estimated age of every detected face, in input order.
    pub ages: Vec<f64>,
}

fn age_stats(cluster: usize, images: &[&Tensor]) -> AgeStats {
    let readings: Vec<Option<f64>> = images.par_iter().map(|im| oracle_age(im).map(|r| r.age_years)).collect();
    let ages: Vec<f64> = readings.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&ages);
    AgeStats { cluster, mean, std, detected: ages.len(), undetected: images.len() - ages.len(), ages }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingAccuracyReport {
    /// Synthesized faces for clusters 1, 2, 3.
    pub synthesized: Vec<AgeStats>,
    /// Natural faces of clusters 0..3.
    pub benchmark: Vec<AgeStats>,
}

impl AgingAccuracyReport {
    /// `|synthesized mean - benchmark mean|` per target cluster.
    pub fn abs_errors(&self) -> Vec<f64> {
        self.synthesized.iter().map(|s| (s.mean - self.benchmark[s.cluster].mean).abs()).collect()
    }

    pub fn mean_abs_error(&self) -> f64 {
        mean_std(&self.abs_errors()).0
    }
}

pub fn evaluate_aging_accuracy(synth: &Synthesis, test: &DatasetPartition) -> AgingAccuracyReport {
    let synthesized =
        synth.aged.iter().enumerate().map(|(k, imgs)| age_stats(k + 1, &imgs.iter().collect::<Vec<_>>())).collect();
    let benchmark = AgeCluster::ALL
        .iter()
        .map(|&c| age_stats(c.index(), &test.cluster(c).iter().map(|s| &s.image).collect::<Vec<_>>()))
        .collect();
    AgingAccuracyReport { synthesized, benchmark }
}

/// Which image sets a verification category compares: 0 is the test face,
/// k the face aged to cluster k.
pub const CATEGORIES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

pub fn category_name(a: usize, b: usize) -> String {
    let side = |k: usize| if k == 0 { "test".to_string() } else { format!("aged{k}") };
    format!("{}-{}", side(a), side(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub name: String,
    pub pair: (usize, usize),
    pub mean_confidence: f64,
    pub std_confidence: f64,
    pub mean_distance: f64,
    /// Fraction of detected pairs accepted at the calibrated threshold.
    pub verification_rate: f64,
    pub detected: usize,
    pub undetected: usize,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub calibration: Calibration,
    pub categories: Vec<CategoryStats>,
}

impl VerificationReport {
    pub fn category(&self, a: usize, b: usize) -> Option<&CategoryStats> {
        self.categories.iter().find(|c| c.pair == (a, b))
    }

    /// Symmetric 4x4 matrix of mean confidences over {test, aged1..3}
    /// (diagonal 100).
    pub fn confidence_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[100.0; 4]; 4];
        for c in &self.categories {
            m[c.pair.0][c.pair.1] = c.mean_confidence;
            m[c.pair.1][c.pair.0] = c.mean_confidence;
        }
        m
    }
}

pub fn evaluate_identity(synth: &Synthesis, cal: &Calibration) -> VerificationReport {
    let set = |k: usize| if k == 0 { &synth.inputs } else { &synth.aged[k - 1] };
    let categories = CATEGORIES
        .iter()
        .map(|&(a, b)| {
            let (xa, xb) = (set(a), set(b));
            let dist: Vec<f64> =
                (0..xa.len()).into_par_iter().filter_map(|i| oracle_identity_distance(&xa[i], &xb[i])).collect();
            let confidences: Vec<f64> = dist.iter().map(|&d| cal.confidence(d)).collect();
            let (mean_confidence, std_confidence) = mean_std(&confidences);
            let accepted = dist.iter().filter(|&&d| cal.accepts(d)).count();
            CategoryStats {
                name: category_name(a, b),
                pair: (a, b),
                mean_confidence,
                std_confidence,
                mean_distance: mean_std(&dist).0,
                verification_rate: if dist.is_empty() { 0.0 } else { accepted as f64 / dist.len() as f64 },
                detected: dist.len(),
                undetected: xa.len() - dist.len(),
                confidences,
            }
        })
        .collect();
    VerificationReport { calibration: *cal, categories }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mean_age: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub mean_abs_error: f64,
    /// Mean confidence of (test, aged k) pairs.
    pub confidence: Vec<f64>,
}

impl ModelSummary {
    fn new(acc: &AgingAccuracyReport, ver: &VerificationReport) -> Self {
        ModelSummary {
            mean_age: acc.synthesized.iter().map(|s| s.mean).collect(),
            abs_error: acc.abs_errors(),
            mean_abs_error: acc.mean_abs_error(),
            confidence: (1..=3).map(|k| ver.category(0, k).map_or(f64::NAN, |c| c.mean_confidence)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub benchmark_mean: Vec<f64>,
    pub pyramid: ModelSummary,
    pub one_pathway: ModelSummary,
    /// The expected trend; a violation is reported as a warning.
    pub pyramid_not_worse: bool,
}

/// Both families must share every training setting except the critic kind.
pub fn check_matched(pyramid: &[TrainConfig], one_pathway: &[TrainConfig]) -> Result<()> {
    if pyramid.len() != one_pathway.len() {
        return Err(EvalError::Mismatch(format!("{} vs {} sessions", pyramid.len(), one_pathway.len())));
    }
    for (p, o) in pyramid.iter().zip(one_pathway) {
        if *p != (TrainConfig { discriminator: p.discriminator, ..*o }) {
            return Err(EvalError::Mismatch(format!(
                "cluster {} sessions differ beyond the critic kind",
                p.target_cluster
            )));
        }
    }
    Ok(())
}

pub fn compare_ablation(
    pyramid: (&AgingAccuracyReport, &VerificationReport),
    one_pathway: (&AgingAccuracyReport, &VerificationReport),
) -> Result<AblationReport> {
    if pyramid.0.benchmark != one_pathway.0.benchmark {
        return Err(EvalError::Mismatch("the two models were evaluated on different test sets".into()));
    }
    let p = ModelSummary::new(pyramid.0, pyramid.1);
    let o = ModelSummary::new(one_pathway.0, one_pathway.1);
    let pyramid_not_worse = p.mean_abs_error <= o.mean_abs_error;
    if !pyramid_not_worse {
        log::warn!(
            "pyramid age error {:.3} exceeds one-pathway {:.3}",
            p.mean_abs_error,
            o.mean_abs_error
        );
    }
    Ok(AblationReport {
        benchmark_mean: pyramid.0.benchmark.iter().map(|b| b.mean).collect(),
        pyramid: p,
        one_pathway: o,
        pyramid_not_worse,
    })
}

/// Everything `eval` computes, serialized as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub aging: Option<AgingAccuracyReport>,
    pub identity: Option<VerificationReport>,
    pub ablation: Option<AblationReport>,
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn aging_csv(r: &AgingAccuracyReport) -> String {
    let mut s = String::from("source,cluster,mean_age,std_age,detected,undetected\n");
    for (src, rows) in [("synthesized", &r.synthesized), ("natural", &r.benchmark)] {
        for a in rows.iter() {
            let _ = writeln!(s, "{src},{},{},{},{},{}", a.cluster, f(a.mean), f(a.std), a.detected, a.undetected);
        }
    }
    s
}

pub fn verification_csv(r: &VerificationReport) -> String {
    let mut s = String::from(
        "category,mean_confidence,std_confidence,mean_distance,verification_rate,detected,undetected,tau,delta0\n",
    );
    for c in &r.categories {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.name,
            f(c.mean_confidence),
            f(c.std_confidence),
            f(c.mean_distance),
            f(c.verification_rate),
            c.detected,
            c.undetected,
            f(r.calibration.tau),
            f(r.calibration.delta0)
        );
    }
    s
}

pub fn ablation_csv(r: &AblationReport) -> String {
    let mut s = String::from("model,cluster,benchmark_mean,mean_age,abs_error,confidence\n");
    for (name, m) in [("pyramid", &r.pyramid), ("one_pathway", &r.one_pathway)] {
        for k in 0..m.mean_age.len() {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{}",
                k + 1,
                f(r.benchmark_mean[k + 1]),
                f(m.mean_age[k]),
                f(m.abs_error[k]),
                f(m.confidence[k])
            );
        }
    }
    let _ = writeln!(s, "# pyramid_mae={} one_pathway_mae={} pyramid_not_worse={}", f(r.pyramid.mean_abs_error), f(r.one_pathway.mean_abs_error), r.pyramid_not_worse);
    s
}

/// Histogram of estimated ages in 4-year bins, per source and cluster.
pub fn age_histogram_csv(r: &AgingAccuracyReport) -> String {
    let mut s = String::from("source,cluster,bin_start,count\n");
    for (src, rows) in [("synthesized", &r.synthesized), ("natural", &r.benchmark)] {
        for a in rows.iter() {
            let mut bins = [0usize; 13];
            for &age in &a.ages {
                bins[(((age - 16.0) / 4.0).round().max(0.0) as usize).min(12)] += 1;
            }
            for (i, n) in bins.iter().enumerate() {
                let _ = writeln!(s, "{src},{},{},{n}", a.cluster, 16 + 4 * i);
            }
        }
    }
    s
}

pub fn confidence_distribution_csv(r: &VerificationReport) -> String {
    let mut s = String::from("category,index,confidence\n");
    for c in &r.categories {
        for (i, v) in c.confidences.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{}", c.name, f(*v));
        }
    }
    s
}

/// Writes the CSV tables, plot data and `report.json` into `dir`.
pub fn write_reports(dir: &Path, bundle: &EvalBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(a) = &bundle.aging {
        fs::write(dir.join("aging_accuracy.csv"), aging_csv(a))?;
        fs::write(dir.join("age_histogram.csv"), age_histogram_csv(a))?;
    }
    if let Some(v) = &bundle.identity {
        fs::write(dir.join("verification.csv"), verification_csv(v))?;
        fs::write(dir.join("confidence_distribution.csv"), confidence_distribution_csv(v))?;
    }
    if let Some(b) = &bundle.ablation {
        fs::write(dir.join("ablation.csv"), ablation_csv(b))?;
    }
    let json = serde_json::to_string_pretty(bundle).map_err(|e| EvalError::Input(e.to_string()))?;
    fs::write(dir.join("report.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_mean_and_std() {
        let (m, s) = mean_std(&[1e16, 1.0, -1e16, 1.0]);
        assert_eq!(m, 0.5);
        assert!(s > 0.0);
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!((m, s), (3.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn threshold_maps_to_reference_confidence() {
        let cal = Calibration::from_tau(0.07, 0.01, 100, 0);
        assert!((cal.confidence(cal.tau) - THRESHOLD_CONFIDENCE).abs() < 1e-9);
        assert_eq!(cal.confidence(0.0), 100.0);
        assert!(cal.confidence(0.01) > cal.confidence(0.02));
    }

    #[test]
    fn category_names_follow_layout() {
        let names: Vec<String> = CATEGORIES.iter().map(|&(a, b)| category_name(a, b)).collect();
        assert_eq!(names, ["test-aged1", "test-aged2", "test-aged3", "aged1-aged2", "aged1-aged3", "aged2-aged3"]);
    }
}
