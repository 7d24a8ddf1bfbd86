//! Little-endian binary checkpoints.
//!
//! Layout: magic `PAGN0001`, u32 version, length-prefixed config JSON and
//! metadata JSON, u64 iteration, optional RNG state (u8 flag, 32-byte seed,
//! u64 stream, u128 word position), networks, then optimizer states. Every
//! string is a u32 byte length followed by UTF-8; every array is a u32 rank,
//! u32 dims and f32 values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{BnRunning, Network, NetworkSpec};
use crate::tensor::{AdamConfig, AdamState, Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"PAGN0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {field}")]
    Truncated { field: String },
    #[error("invalid checkpoint field {field}: {detail}")]
    Invalid { field: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Captured generator state; restoring it continues the exact stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub meta_json: String,
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub networks: Vec<Network>,
    pub optimizers: Vec<(String, AdamState)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        self.floats(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated { field: field.to_string() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self, field: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, field)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)?;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| CheckpointError::Invalid { field: field.to_string(), detail: "not UTF-8".into() })
    }
    fn floats(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| invalid(field, "size overflow"))?, field)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
    fn tensor(&mut self, field: &str) -> Result<Tensor> {
        let rank = self.u32(field)?;
        if rank > 8 {
            return Err(invalid(field, format!("rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32(field)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid(field, "size overflow"))?;
        let data = self.floats(n, field)?;
        Tensor::new(&dims, data).map_err(|e| invalid(field, e.to_string()))
    }
}

fn invalid(field: &str, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Invalid { field: field.to_string(), detail: detail.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.str(&self.config_json);
        w.str(&self.meta_json);
        w.u64(self.iteration);
        match &self.rng {
            Some(r) => {
                w.u8(1);
                w.0.extend(r.seed);
                w.u64(r.stream);
                w.0.extend(r.word_pos.to_le_bytes());
            }
            None => w.u8(0),
        }
        w.u32(self.networks.len());
        for net in &self.networks {
            w.str(net.name());
            w.str(&serde_json::to_string(&net.spec).map_err(|e| invalid("network.spec", e.to_string()))?);
            w.u32(net.params.len());
            for p in &net.params {
                w.str(&p.name);
                w.u8(u8::from(p.trainable));
                w.tensor(&p.value);
            }
            w.u32(net.bn.len());
            for b in &net.bn {
                w.u32(b.mean.len());
                w.floats(&b.mean);
                w.floats(&b.var);
            }
        }
        w.u32(self.optimizers.len());
        for (name, st) in &self.optimizers {
            w.str(name);
            let c = st.config;
            for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.f64(v);
            }
            w.u64(st.t);
            w.u32(st.names.len());
            for i in 0..st.names.len() {
                w.str(&st.names[i]);
                w.tensor(&st.m[i]);
                w.tensor(&st.v[i]);
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_json = r.str("config")?;
        let meta_json = r.str("meta")?;
        let iteration = r.u64("iteration")?;
        let rng = match r.u8("rng.flag")? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32, "rng.seed")?.try_into().expect("32 bytes");
                Some(RngState { seed, stream: r.u64("rng.stream")?, word_pos: r.u128("rng.word_pos")? })
            }
            f => return Err(invalid("rng.flag", format!("value {f}"))),
        };
        let n_nets = r.u32("networks.count")?;
        let mut networks = Vec::with_capacity(n_nets.min(64));
        for _ in 0..n_nets {
            let name = r.str("network.name")?;
            let spec_json = r.str(&format!("{name}.spec"))?;
            let spec: NetworkSpec =
                serde_json::from_str(&spec_json).map_err(|e| invalid(&format!("{name}.spec"), e.to_string()))?;
            let n_params = r.u32(&format!("{name}.params.count"))?;
            let mut params = Vec::with_capacity(n_params.min(1024));
            for _ in 0..n_params {
                let pname = r.str(&format!("{name}.param.name"))?;
                let trainable = r.u8(&format!("{pname}.trainable"))? != 0;
                let value = r.tensor(&pname)?;
                let mut p = Parameter::new(pname, value);
                p.trainable = trainable;
                params.push(p);
            }
            let n_bn = r.u32(&format!("{name}.bn.count"))?;
            let mut bn = Vec::with_capacity(n_bn.min(1024));
            for k in 0..n_bn {
                let field = format!("{name}.bn[{k}]");
                let c = r.u32(&field)?;
                bn.push(BnRunning { mean: r.floats(c, &field)?, var: r.floats(c, &field)? });
            }
            let net = Network { spec, params, bn };
            net.validate().map_err(|e| invalid(&name, e.to_string()))?;
            if net.name() != name {
                return Err(invalid(&name, "name does not match its spec"));
            }
            networks.push(net);
        }
        let n_opt = r.u32("optimizers.count")?;
        let mut optimizers = Vec::with_capacity(n_opt.min(64));
        for _ in 0..n_opt {
            let name = r.str("optimizer.name")?;
            let f = format!("{name}.config");
            let config =
                AdamConfig { beta1: r.f64(&f)?, beta2: r.f64(&f)?, eps: r.f64(&f)?, weight_decay: r.f64(&f)? };
            let t = r.u64(&format!("{name}.t"))?;
            let n = r.u32(&format!("{name}.count"))?;
            let (mut names, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..n {
                let pn = r.str(&format!("{name}.entry"))?;
                m.push(r.tensor(&format!("{name}.{pn}.m"))?);
                v.push(r.tensor(&format!("{name}.{pn}.v"))?);
                names.push(pn);
            }
            optimizers.push((name, AdamState { config, t, names, m, v }));
        }
        if r.pos != buf.len() {
            return Err(invalid("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config_json, meta_json, iteration, rng, networks, optimizers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn network(&self, name: &str) -> Result<&Network> {
        self.networks.iter().find(|n| n.name() == name).ok_or_else(|| invalid(name, "network missing"))
    }
}

/// Stores one frozen network (no optimizer or RNG state).
pub fn save_network(net: &Network, config_json: &str, path: &Path) -> Result<()> {
    Checkpoint {
        config_json: config_json.to_string(),
        meta_json: "{}".into(),
        iteration: 0,
        rng: None,
        networks: vec![net.clone()],
        optimizers: vec![],
    }
    .save(path)
}

pub fn load_network(path: &Path, name: &str) -> Result<Network> {
    let ck = Checkpoint::load(path)?;
    ck.network(name).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_generator, ScaleConfig};
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scale = ScaleConfig { base_channels: 4, image_size: 32, ..Default::default() };
        let net = build_generator(&scale, &mut rng).unwrap();
        let opt = AdamState::new(&net.params, AdamConfig::default());
        rng.next_u64();
        Checkpoint {
            config_json: "{\"a\":1}".into(),
            meta_json: "{}".into(),
            iteration: 42,
            rng: Some(RngState::capture(&rng)),
            networks: vec![net],
            optimizers: vec![("g".into(), opt)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.unwrap().restore();
        let mut b = back.rng.unwrap().restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_files_name_the_field() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(_))));
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(CheckpointError::Truncated { field }) => assert!(field.starts_with("g."), "{field}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(CheckpointError::Truncated { .. })));
    }
}
