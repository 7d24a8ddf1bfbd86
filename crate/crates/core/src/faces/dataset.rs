use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{chroma_distance, lum, render_face, skin_like, FaceError, IdentitySpec, Result, CHROMA_TOL, MIN_AGE};
use crate::tensor::Tensor;

pub const N_CLUSTERS: usize = 4;

/// One of the four age brackets: [14–30], [31–40], [41–50], [51–60].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct AgeCluster(usize);

impl TryFrom<usize> for AgeCluster {
    type Error = FaceError;
    fn try_from(v: usize) -> Result<Self> {
        AgeCluster::new(v)
    }
}

impl From<AgeCluster> for usize {
    fn from(c: AgeCluster) -> usize {
        c.0
    }
}

impl AgeCluster {
    pub const ALL: [AgeCluster; 4] = [AgeCluster(0), AgeCluster(1), AgeCluster(2), AgeCluster(3)];

    pub fn new(index: usize) -> Result<Self> {
        if index >= N_CLUSTERS {
            return Err(FaceError::Config(format!("age cluster {index} outside 0..=3")));
        }
        Ok(AgeCluster(index))
    }

    pub fn index(self) -> usize {
        self.0
    }

    /// Nominal bracket in years.
    pub fn range(self) -> (f64, f64) {
        [(14.0, 30.0), (31.0, 40.0), (41.0, 50.0), (51.0, 60.0)][self.0]
    }

    /// Interval ages are drawn from; the youngest bracket starts at the
    /// renderer's minimum age.
    pub fn sampling_range(self) -> (f64, f64) {
        let (lo, hi) = self.range();
        (lo.max(MIN_AGE), hi)
    }

    pub fn of_age(age: f64) -> AgeCluster {
        AgeCluster(match age {
            a if a <= 30.0 => 0,
            a if a <= 40.0 => 1,
            a if a <= 50.0 => 2,
            _ => 3,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub identities_per_split: usize,
    pub samples_per_cluster: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { master_seed: 7, identities_per_split: 64, samples_per_cluster: 128, image_size: 48 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    pub split: Split,
    pub cluster: AgeCluster,
    /// Index into the owning partition's identity list.
    pub identity_index: usize,
    pub identity: IdentitySpec,
    pub age_years: f64,
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    pub split: Split,
    pub master_seed: u64,
    pub image_size: usize,
    pub identities: Vec<IdentitySpec>,
    pub clusters: Vec<Vec<SyntheticSample>>,
}

impl DatasetPartition {
    pub fn cluster(&self, c: AgeCluster) -> &[SyntheticSample] {
        &self.clusters[c.index()]
    }

    pub fn samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.clusters.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: DatasetPartition,
    pub test: DatasetPartition,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator that places sample `sample_id`.
pub fn sample_seed(master_seed: u64, sample_id: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ sample_id.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn pick(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Draws identity factors. Skin and hair tones are resampled until the skin
/// stays distinguishable from the hair at every lightening level.
pub fn sample_identity(rng: &mut impl Rng) -> IdentitySpec {
    let (skin, hair) = loop {
        let r = pick(rng, 0.55, 0.9);
        let g = r * pick(rng, 0.62, 0.85);
        let b = g * pick(rng, 0.55, 0.85);
        let skin = [r, g, b];
        let hair = [pick(rng, 0.05, 0.35), pick(rng, 0.05, 0.35), pick(rng, 0.05, 0.35)];
        if b < 0.2 || lum(skin) < 0.4 {
            continue;
        }
        let clash = (0..=12).any(|k| {
            let s = 0.05 * k as f64;
            let h = [hair[0] + s * (1.0 - hair[0]), hair[1] + s * (1.0 - hair[1]), hair[2] + s * (1.0 - hair[2])];
            skin_like(h, skin, 2.0 * CHROMA_TOL) || chroma_distance(h, skin) < 2.0 * CHROMA_TOL
        });
        if !clash {
            break (skin, hair);
        }
    };
    IdentitySpec {
        face_cx: pick(rng, 0.46, 0.54),
        face_cy: pick(rng, 0.49, 0.53),
        face_ax: pick(rng, 0.30, 0.38),
        face_ay: pick(rng, 0.41, 0.45),
        skin_tone: skin,
        eye_spacing: pick(rng, 0.32, 0.5),
        eye_height: pick(rng, 0.33, 0.42),
        mouth_width: pick(rng, 0.15, 0.24),
        hair_height: pick(rng, 0.12, 0.25),
        hair_tone: hair,
    }
}

fn partition(cfg: &DatasetConfig, split: Split) -> Result<DatasetPartition> {
    let mut id_rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    id_rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let identities: Vec<IdentitySpec> = (0..cfg.identities_per_split).map(|_| sample_identity(&mut id_rng)).collect();
    let spc = cfg.samples_per_cluster as u64;
    let base = match split {
        Split::Train => 0,
        Split::Test => N_CLUSTERS as u64 * spc,
    };
    let plan: Vec<(u64, AgeCluster, usize, f64)> = AgeCluster::ALL
        .iter()
        .flat_map(|&c| (0..spc).map(move |i| (c, base + c.index() as u64 * spc + i)))
        .map(|(c, sample_id)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.master_seed, sample_id));
            let (lo, hi) = c.sampling_range();
            (sample_id, c, rng.gen_range(0..identities.len()), pick(&mut rng, lo, hi))
        })
        .collect();
    let samples: Vec<SyntheticSample> = plan
        .par_iter()
        .map(|&(sample_id, cluster, identity_index, age_years)| {
            let identity = identities[identity_index].clone();
            let image = render_face(&identity, age_years, cfg.image_size)?;
            Ok(SyntheticSample { sample_id, split, cluster, identity_index, identity, age_years, image })
        })
        .collect::<Result<_>>()?;
    let mut clusters = vec![Vec::new(); N_CLUSTERS];
    for s in samples {
        clusters[s.cluster.index()].push(s);
    }
    Ok(DatasetPartition { split, master_seed: cfg.master_seed, image_size: cfg.image_size, identities, clusters })
}

/// Builds identity-disjoint train and test partitions.
pub fn sample_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.identities_per_split < 1 || cfg.samples_per_cluster < 1 {
        return Err(FaceError::Config("identities_per_split and samples_per_cluster must be >= 1".into()));
    }
    Ok(Dataset { config: *cfg, train: partition(cfg, Split::Train)?, test: partition(cfg, Split::Test)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig { master_seed: seed, identities_per_split: 6, samples_per_cluster: 8, image_size: 32 }
    }

    #[test]
    fn counts_and_ranges() {
        let d = sample_dataset(&small(1)).unwrap();
        for p in [&d.train, &d.test] {
            for c in AgeCluster::ALL {
                let s = p.cluster(c);
                assert_eq!(s.len(), 8);
                let (lo, hi) = c.sampling_range();
                assert!(s.iter().all(|x| x.age_years >= lo && x.age_years <= hi && x.cluster == c));
                assert!(s.iter().all(|x| AgeCluster::of_age(x.age_years) == c));
            }
        }
    }

    #[test]
    fn seeding_contract() {
        let a = sample_dataset(&small(3)).unwrap();
        assert_eq!(a, sample_dataset(&small(3)).unwrap());
        let b = sample_dataset(&small(4)).unwrap();
        assert_ne!(a.train.identities, b.train.identities);
    }

    #[test]
    fn splits_share_no_identity() {
        let d = sample_dataset(&small(5)).unwrap();
        for id in &d.train.identities {
            assert!(!d.test.identities.contains(id));
        }
        let ids: Vec<u64> = d.train.samples().chain(d.test.samples()).map(|s| s.sample_id).collect();
        let mut dedup = ids.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), ids.len());
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(sample_dataset(&DatasetConfig { samples_per_cluster: 0, ..small(1) }).is_err());
        assert!(AgeCluster::new(4).is_err());
    }
}
