//! Flat run configuration: JSON file, then command-line overrides, then
//! validation. Every field doubles as a `--kebab-case` flag.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use clap::parser::ValueSource;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use pagn_core::critics::LossWeights;
use pagn_core::eval::{DEFAULT_CALIBRATION_PAIRS, DEFAULT_FAR};
use pagn_core::faces::DatasetConfig;
use pagn_core::nn::{DiscriminatorKind, ScaleConfig};
use pagn_core::pretrain::PretrainConfig;
use pagn_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_dir: PathBuf,

    pub master_seed: u64,
    pub identities_per_split: usize,
    pub samples_per_cluster: usize,

    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub identity_embedding_dim: usize,

    pub pretrain_iterations: u64,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub triplet_margin: f64,
    pub pretrain_seed: u64,
    pub pretrain_eval_pairs: usize,

    pub target_cluster: usize,
    pub lambda_a: f64,
    pub lambda_p: f64,
    pub lambda_i: f64,
    pub lr0: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub pixel_period: u64,
    pub train_seed: u64,
    pub weight_decay: f64,
    pub discriminator: DiscriminatorKind,
    pub record_wall_clock: bool,
    pub checkpoint_every: u64,

    pub calibration_pairs: usize,
    pub false_accept_rate: f64,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let scale = ScaleConfig::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            run_dir: PathBuf::from("runs"),
            master_seed: data.master_seed,
            identities_per_split: data.identities_per_split,
            samples_per_cluster: data.samples_per_cluster,
            image_size: scale.image_size,
            base_channels: scale.base_channels,
            channel_multiplier: scale.channel_multiplier,
            identity_embedding_dim: scale.identity_embedding_dim,
            pretrain_iterations: pre.iterations,
            pretrain_batch_size: pre.batch_size,
            pretrain_lr: pre.lr,
            triplet_margin: pre.margin,
            pretrain_seed: pre.seed,
            pretrain_eval_pairs: pre.eval_pairs,
            target_cluster: train.target_cluster,
            lambda_a: train.weights.lambda_a,
            lambda_p: train.weights.lambda_p,
            lambda_i: train.weights.lambda_i,
            lr0: train.lr0,
            batch_size: train.batch_size,
            total_iterations: train.total_iterations,
            pixel_period: train.pixel_period,
            train_seed: train.seed,
            weight_decay: train.weight_decay,
            discriminator: train.discriminator,
            record_wall_clock: train.record_wall_clock,
            checkpoint_every: 500,
            calibration_pairs: DEFAULT_CALIBRATION_PAIRS,
            false_accept_rate: DEFAULT_FAR,
            eval_seed: 23,
        }
    }
}

/// Flag help text per field, in declaration order.
const FIELD_HELP: &[(&str, &str)] = &[
    ("run_dir", "root directory for all outputs"),
    ("master_seed", "dataset seed"),
    ("identities_per_split", "identities in each of the train and test splits"),
    ("samples_per_cluster", "rendered portraits per age cluster and split"),
    ("image_size", "image side in pixels (multiple of 8, >= 32)"),
    ("base_channels", "width of the first convolution stage"),
    ("channel_multiplier", "width growth per stage"),
    ("identity_embedding_dim", "identity descriptor output size"),
    ("pretrain_iterations", "pretraining iterations per auxiliary network"),
    ("pretrain_batch_size", "pretraining batch size"),
    ("pretrain_lr", "pretraining initial learning rate"),
    ("triplet_margin", "identity triplet margin"),
    ("pretrain_seed", "pretraining seed"),
    ("pretrain_eval_pairs", "held-out pairs scored after identity pretraining"),
    ("target_cluster", "target age cluster of a training session (1, 2 or 3)"),
    ("lambda_a", "adversarial loss weight"),
    ("lambda_p", "pixel loss weight"),
    ("lambda_i", "identity loss weight"),
    ("lr0", "initial learning rate of G and D"),
    ("batch_size", "training batch size"),
    ("total_iterations", "training iterations per session"),
    ("pixel_period", "pixel loss is applied every this many iterations"),
    ("train_seed", "training seed"),
    ("weight_decay", "L2 weight decay of G and D"),
    ("discriminator", "critic kind: pyramid or one_pathway"),
    ("record_wall_clock", "write per-iteration wall time to the metrics file"),
    ("checkpoint_every", "save a resumable checkpoint every this many iterations (0 = only at the end)"),
    ("calibration_pairs", "impostor pairs used to calibrate the match threshold"),
    ("false_accept_rate", "false-accept rate of the match threshold"),
    ("eval_seed", "evaluation seed"),
];

fn flag_name(field: &str) -> String {
    field.replace('_', "-")
}

fn default_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One global `--flag` per config field, with its default in the help text.
pub fn override_args() -> Vec<Arg> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    FIELD_HELP
        .iter()
        .map(|&(field, help)| {
            let default = default_text(&defaults[field]);
            Arg::new(field)
                .long(flag_name(field))
                .value_name("VALUE")
                .global(true)
                .help(format!("{help} [default: {default}]"))
        })
        .collect()
}

pub fn add_override_args(cmd: Command) -> Command {
    cmd.args(override_args())
}

fn parse_like(template: &Value, raw: &str, field: &str) -> Result<Value> {
    let bad = || format!("--{} expects a value like {template}, got {raw:?}", flag_name(field));
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().with_context(bad)?),
        Value::Number(n) if n.is_f64() => Value::from(raw.parse::<f64>().with_context(bad)?),
        Value::Number(_) => Value::from(raw.parse::<u64>().with_context(bad)?),
        Value::String(_) => Value::String(raw.to_string()),
        _ => bail!(bad()),
    })
}

/// Command-line values for config fields, looked up in every matched
/// subcommand level (innermost wins).
fn cli_overrides(levels: &[&ArgMatches]) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    for m in levels {
        for &(field, _) in FIELD_HELP {
            if m.value_source(field) == Some(ValueSource::CommandLine) {
                if let Some(v) = m.get_one::<String>(field) {
                    out.retain(|(f, _)| *f != field);
                    out.push((field, v.clone()));
                }
            }
        }
    }
    out
}

impl RunConfig {
    /// File (if any) then flags, then validation.
    pub fn resolve(file: Option<&Path>, levels: &[&ArgMatches]) -> Result<Self> {
        let base = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", path.display()))))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        let obj: &mut Map<String, Value> = value.as_object_mut().expect("config is an object");
        for (field, raw) in cli_overrides(levels) {
            let parsed = parse_like(&obj[field], &raw, field).map_err(|e| ConfigError(e.to_string()))?;
            obj.insert(field.to_string(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scale().validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train().validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.identities_per_split < 2 || self.samples_per_cluster < 1 {
            bail!(ConfigError("need at least 2 identities per split and 1 sample per cluster".into()));
        }
        if self.pretrain_iterations < 1 || self.pretrain_batch_size < 2 || !(self.pretrain_lr > 0.0) {
            bail!(ConfigError("pretraining needs iterations >= 1, batch_size >= 2 and lr > 0".into()));
        }
        if !(self.false_accept_rate > 0.0 && self.false_accept_rate < 1.0) || self.calibration_pairs == 0 {
            bail!(ConfigError("need 0 < false_accept_rate < 1 and calibration_pairs > 0".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> ScaleConfig {
        ScaleConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            channel_multiplier: self.channel_multiplier,
            identity_embedding_dim: self.identity_embedding_dim,
            ..ScaleConfig::default()
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            master_seed: self.master_seed,
            identities_per_split: self.identities_per_split,
            samples_per_cluster: self.samples_per_cluster,
            image_size: self.image_size,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            margin: self.triplet_margin,
            seed: self.pretrain_seed,
            eval_pairs: self.pretrain_eval_pairs,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            target_cluster: self.target_cluster,
            weights: LossWeights { lambda_a: self.lambda_a, lambda_p: self.lambda_p, lambda_i: self.lambda_i },
            lr0: self.lr0,
            batch_size: self.batch_size,
            total_iterations: self.total_iterations,
            pixel_period: self.pixel_period,
            seed: self.train_seed,
            scale: self.scale(),
            weight_decay: self.weight_decay,
            discriminator: self.discriminator,
            record_wall_clock: self.record_wall_clock,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A configuration or prerequisite problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_field_has_a_flag() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let fields: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(fields.len(), FIELD_HELP.len());
        for (f, _) in FIELD_HELP {
            assert!(v.get(*f).is_some(), "{f}");
        }
    }

    #[test]
    fn defaults_validate_and_map_onto_library_configs() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train(), TrainConfig::default());
        assert_eq!(c.pretrain(), PretrainConfig::default());
        assert_eq!(c.dataset(), DatasetConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"lr0": 0.001, "learning_rate": 1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"lr0": 0.001}"#).unwrap();
        assert_eq!(c.lr0, 0.001);
    }

    #[test]
    fn flag_values_parse_like_their_defaults() {
        assert_eq!(parse_like(&Value::from(1e-4), "3", "lr0").unwrap(), Value::from(3.0));
        assert_eq!(parse_like(&Value::from(7u64), "9", "master_seed").unwrap(), Value::from(9u64));
        assert!(parse_like(&Value::from(7u64), "x", "master_seed").is_err());
        assert_eq!(parse_like(&Value::Bool(true), "false", "record_wall_clock").unwrap(), Value::Bool(false));
    }
}
