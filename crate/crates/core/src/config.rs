//! Flat `key = value` run configuration and the run manifest.
//!
//! Every key can also be given on the command line as `--key value` (or
//! `--key=value`, with `-` and `_` interchangeable), which overrides the
//! file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ClusterParams;
use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::to_hex;
use crate::training::{MaskingPolicy, TrainingConfig, GRID_BATCH_SIZES, GRID_LEARNING_RATES};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(f64, usize, u64, bool);

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(ConfigValue::render)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() || s == "auto" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref()
            .map_or_else(|| "auto".to_string(), ConfigValue::render)
    }
}

/// Everything a command may need, with defaults sized for a laptop.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub masking: MaskingPolicy,
    pub split: SplitSpec,
    pub model_seed: u64,
    pub segment_length: usize,
    pub eval_batch_size: usize,
    pub grid_learning_rates: Vec<f64>,
    pub grid_batch_sizes: Vec<usize>,
    pub cluster: ClusterParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            training: TrainingConfig::default(),
            model: ModelConfig {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 32,
                ff_dim: 64,
                max_positions: 128,
                dropout_rate: 0.0,
                ..ModelConfig::default()
            },
            masking: MaskingPolicy::default(),
            split: SplitSpec::default(),
            model_seed: 1,
            segment_length: 64,
            eval_batch_size: 32,
            grid_learning_rates: GRID_LEARNING_RATES.to_vec(),
            grid_batch_sizes: GRID_BATCH_SIZES.to_vec(),
            cluster: ClusterParams::default(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ ;)*) => {
        impl RunConfig {
            /// Every recognised key, in snapshot order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set_value(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => { self.$($field).+ = ConfigValue::parse_value(value)?; Ok(()) })*
                    _ => Err("unknown key".into()),
                }
            }

            /// All keys with their current values.
            pub fn snapshot(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $( m.insert($key.to_string(), self.$($field).+.render()); )*
                m
            }
        }
    };
}

config_keys! {
    "learning_rate" => training.learning_rate;
    "batch_size" => training.batch_size;
    "total_steps" => training.total_steps;
    "epochs" => training.epochs;
    "warmup_fraction" => training.warmup_fraction;
    "weight_decay" => training.weight_decay;
    "seed" => training.seed;
    "eval_checkpoints" => training.eval_checkpoints;
    "adam_beta1" => training.adam_beta1;
    "adam_beta2" => training.adam_beta2;
    "adam_epsilon" => training.adam_epsilon;
    "log_interval" => training.log_interval;
    "max_seq_len" => training.max_seq_len;
    "frozen_layers" => training.frozen_layers;
    "num_layers" => model.num_layers;
    "num_heads" => model.num_heads;
    "hidden_dim" => model.hidden_dim;
    "ff_dim" => model.ff_dim;
    "max_positions" => model.max_positions;
    "dropout_rate" => model.dropout_rate;
    "tie_mlm_weights" => model.tie_mlm_weights;
    "classifier_pooler" => model.classifier_pooler;
    "layer_norm_eps" => model.layer_norm_eps;
    "model_seed" => model_seed;
    "mask_rate" => masking.mask_rate;
    "replace_with_mask" => masking.replace_with_mask;
    "replace_with_random" => masking.replace_with_random;
    "keep_original" => masking.keep_original;
    "dynamic_masking" => masking.dynamic;
    "pretrain_fraction" => split.pretrain_fraction;
    "finetune_fraction" => split.finetune_fraction;
    "test_fraction" => split.test_fraction;
    "validation_fraction" => split.validation_fraction_of_finetune;
    "split_seed" => split.seed;
    "segment_length" => segment_length;
    "eval_batch_size" => eval_batch_size;
    "grid_learning_rates" => grid_learning_rates;
    "grid_batch_sizes" => grid_batch_sizes;
    "min_cluster_size" => cluster.min_cluster_size;
    "cluster_radius" => cluster.radius;
    "cluster_dimensions" => cluster.reduce_to;
}

/// Normalises a command-line spelling (`learning-rate`) to a key.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped. Returns pairs in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedRecord {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        pairs.push((normalize_key(k), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Applies `pairs` in order. Every bad key or value is reported.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set_value(k, v) {
                problems.push(format!("{k}: {e} ({v:?})"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Defaults, then the file (if any), then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut pairs = Vec::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            pairs = parse_key_values(&text)?;
        }
        pairs.extend(overrides.iter().cloned());
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    /// Checks every section and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        };
        collect(self.training.validate());
        collect(self.model.validate());
        collect(self.masking.validate());
        collect(self.split.validate());
        if self.segment_length == 0 || self.segment_length > self.model.max_positions {
            problems.push(format!(
                "segment_length must be between 1 and max_positions ({}), got {}",
                self.model.max_positions, self.segment_length
            ));
        }
        if self.training.max_seq_len > self.model.max_positions {
            problems.push(format!(
                "max_seq_len {} exceeds max_positions {}",
                self.training.max_seq_len, self.model.max_positions
            ));
        }
        if self.eval_batch_size == 0 {
            problems.push("eval_batch_size must be at least 1".into());
        }
        if self.grid_learning_rates.is_empty() || self.grid_batch_sizes.is_empty() {
            problems.push("grid_learning_rates and grid_batch_sizes must be non-empty".into());
        }
        if self.cluster.min_cluster_size < 2 {
            problems.push("min_cluster_size must be at least 2".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_text(&self) -> String {
        let snap = self.snapshot();
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", snap[*k]))
            .collect()
    }
}

/// Splits `--key value` / `--key=value` pairs whose key is a config key out
/// of an argument list. Everything else is returned untouched.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (normalize_key(n), Some(v.to_string())),
            None => (normalize_key(flag), None),
        };
        if !RunConfig::KEYS.contains(&name.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match iter.next() {
                Some(v) => v,
                None => {
                    rest.push(arg);
                    continue;
                }
            },
        };
        overrides.push((name, value));
    }
    (rest, overrides)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(to_hex(&Sha256::digest(bytes)))
}

/// What a command read, wrote and how it was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.snapshot(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: config.training.seed,
            wall_clock_seconds: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            let mut h = Sha256::new();
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                h.update(
                    p.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
            to_hex(&h.finalize())
        } else {
            sha256_file(path)?
        };
        self.inputs.insert(role.to_string(), hash);
        Ok(())
    }

    /// Writes `manifest.json` into `dir` via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let tmp = dir.join("manifest.json.tmp");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
