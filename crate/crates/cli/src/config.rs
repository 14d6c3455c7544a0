//! Layered configuration: defaults, optional preset, optional TOML file,
//! `--section.key value` overrides, then the `STEALTH_SEED` environment
//! variable.

use std::path::Path;

use clicksense::annotator::AnnotatorConfig;
use clicksense::augment::SNR_GRID_DB;
use clicksense::features::FeatureSet;
use clicksense::model::ModelConfig;
use clicksense::stream::StreamConfig;
use clicksense::synthgen::Composition;
use clicksense::train::{TrainConfig, DEFAULT_HOLDOUT_FRAC, DEFAULT_VAL_FRACTION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::CliError;

pub const SEED_ENV: &str = "STEALTH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub participants: usize,
    pub seed: u64,
    /// Defaults to the reference class proportions for `participants`.
    pub composition: Option<Composition>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            participants: 20,
            seed: 0,
            composition: None,
        }
    }
}

impl SynthSection {
    pub fn composition(&self) -> Composition {
        self.composition
            .clone()
            .unwrap_or_else(|| Composition::reference_mix(self.participants))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesSection {
    pub set: FeatureSet,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self { set: FeatureSet::Full }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub holdout_frac: f64,
    pub n_folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            holdout_frac: DEFAULT_HOLDOUT_FRAC,
            n_folds: 1,
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub snr_levels_db: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_levels_db: SNR_GRID_DB.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub width_factors: Vec<f64>,
    pub feature_sets: Vec<FeatureSet>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            width_factors: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            feature_sets: FeatureSet::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub iterations: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { iterations: 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub synth: SynthSection,
    pub annotator: AnnotatorConfig,
    pub features: FeaturesSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub stream: StreamConfig,
    pub bench: BenchSection,
}

impl AppConfig {
    /// Model configuration with its input height taken from the feature set.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_f: self.features.set.n_rows(),
            ..self.model.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const TINY: &str = r#"
[synth]
participants = 4
composition = { pattern1 = 6, pattern2 = 6, speech = 4, silence = 2, pooled_chewing = 4, pooled_motion = 4, pooled_babble = 2, pooled_music = 2 }

[model]
block_channels = [4, 8]

[train]
batch_size = 32
max_epochs = 4
patience = 2

[split]
holdout_frac = 0.25

[eval]
snr_levels_db = [0.0, 20.0]

[sweep]
width_factors = [0.5, 1.0]
feature_sets = ["log_mel", "full"]

[bench]
iterations = 3
"#;

pub fn preset(name: &str) -> Result<Value, CliError> {
    match name {
        "default" => Ok(Value::Table(Default::default())),
        "tiny" => Ok(toml::from_str(TINY).expect("tiny preset parses")),
        other => Err(CliError::config(format!("unknown preset '{other}' (known: default, tiny)"))),
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("'{path}' descends into a non-table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| CliError::config(format!("'{path}' descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// Reference tree of every accepted key, with optional tables filled in.
fn schema() -> Value {
    let mut v = Value::try_from(AppConfig::default()).expect("defaults serialize");
    let comp = Value::try_from(Composition::default()).expect("composition serializes");
    set_path(&mut v, "synth.composition", comp).expect("synth is a table");
    v
}

fn check_keys(v: &Value, schema: &Value, prefix: &str) -> Result<(), CliError> {
    if let (Value::Table(t), Value::Table(s)) = (v, schema) {
        for (k, val) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            let sub = s
                .get(k)
                .ok_or_else(|| CliError::config(format!("unknown config key '{path}'")))?;
            check_keys(val, sub, &path)?;
        }
    }
    Ok(())
}

/// Builds the effective configuration.
pub fn load(
    preset_name: &str,
    file: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> Result<AppConfig, CliError> {
    let mut v = Value::try_from(AppConfig::default()).expect("defaults serialize");
    let mut layered = preset(preset_name)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Value =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut layered, parsed);
    }
    for (k, raw) in overrides {
        set_path(&mut layered, k, parse_value(raw))?;
    }
    check_keys(&layered, &schema(), "")?;
    merge(&mut v, layered);
    let mut cfg: AppConfig = v
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("malformed config: {}", e.message())))?;
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")))?;
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.split.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.model.validate().map_err(CliError::from)?;
    cfg.train.validate().map_err(CliError::from)?;
    cfg.stream.validate().map_err(CliError::from)?;
    Ok(cfg)
}
