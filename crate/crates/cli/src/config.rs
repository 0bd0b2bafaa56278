//! Experiment configuration: a sectioned TOML file resolved against the
//! built-in defaults.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `--set section.key=value` overrides in command-line order, then the
//! dedicated flags of each command (such as `--seed`).

use std::fs;
use std::path::Path;

use cxrlab::config::{fingerprint_of, CaptionerConfig, DecoderConfig, EncoderConfig};
use cxrlab::corpus::image::PreprocessConfig;
use cxrlab::corpus::synth::SynthConfig;
use cxrlab::stats::{LeveneCenter, Pooling};
use cxrlab::train::pretrain::PretrainConfig;
use cxrlab::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// File name of the resolved configuration inside every output directory.
pub const RESOLVED: &str = "config.toml";

/// Decoder layout without the vocabulary size, which comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_gen_len: usize,
    pub dropout: f64,
    pub projection_bias: bool,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let d = DecoderConfig::desk(0);
        Self {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            ffn: d.ffn,
            max_gen_len: d.max_gen_len,
            dropout: d.dropout,
            projection_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub resize_margin: usize,
    pub max_rotation_deg: f64,
}

impl Default for PreprocessSection {
    // the compact encoder reads 32 pixel crops from 96 pixel sources
    fn default() -> Self {
        Self {
            resize_margin: 8,
            max_rotation_deg: PreprocessConfig::DEFAULT_ROTATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Dataset split scored by `evaluate` and read by `attention`.
    pub split: String,
    pub bootstrap_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Per-example score compared across runs.
    pub metric: String,
    pub alpha: f64,
    pub levene_center: LeveneCenter,
    pub pooling: Pooling,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            metric: "cider".into(),
            alpha: 0.05,
            levene_center: LeveneCenter::Mean,
            pooling: Pooling::Examples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderSection,
    pub preprocess: PreprocessSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            encoder: EncoderConfig::desk(),
            decoder: DecoderSection::default(),
            preprocess: PreprocessSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
        }
    }
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(given: &Table, kept: &Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, kept.get(k)) {
            (_, None) => return Some(path),
            (Value::Table(g), Some(Value::Table(t))) => {
                if let Some(p) = unknown_key(g, t, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses `section.key=value`. The value is read as a TOML literal and
/// taken as a bare string when it is not one.
fn parse_override(spec: &str) -> CliResult<Table> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {spec:?} is not of the form section.key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("override {spec:?} has an empty key")));
    }
    let mut table = Table::new();
    table.insert(keys[keys.len() - 1].to_string(), value);
    for k in keys[..keys.len() - 1].iter().rev() {
        let mut outer = Table::new();
        outer.insert(k.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl ExperimentConfig {
    /// Resolves defaults, an optional file and `--set` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let base = Self::default();
        let mut table = Table::try_from(&base).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
            let layer: Table = toml::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut table, layer);
        }
        for o in overrides {
            merge(&mut table, parse_override(o)?);
        }
        let cfg: Self = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        // the core sections ignore unknown fields, so compare against what survived
        let kept = Table::try_from(&cfg).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(key) = unknown_key(&table, &kept, "") {
            return Err(CliError::config(format!("unknown key {key}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate().map_err(CliError::config)?;
        self.encoder.validate()?;
        self.decoder_config(1).validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if !(self.compare.alpha > 0.0 && self.compare.alpha < 1.0) {
            return Err(CliError::config(format!("alpha {} outside (0, 1)", self.compare.alpha)));
        }
        if !(self.preprocess.max_rotation_deg >= 0.0) {
            return Err(CliError::config("max_rotation_deg must be non-negative"));
        }
        Ok(())
    }

    pub fn decoder_config(&self, vocab: usize) -> DecoderConfig {
        let d = &self.decoder;
        DecoderConfig {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            ffn: d.ffn,
            vocab,
            max_gen_len: d.max_gen_len,
            dropout: d.dropout,
        }
    }

    pub fn captioner_config(&self, vocab: usize) -> CaptionerConfig {
        CaptionerConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder_config(vocab),
            projection_bias: self.decoder.projection_bias,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            resize_margin: self.preprocess.resize_margin,
            max_rotation_deg: self.preprocess.max_rotation_deg,
            ..PreprocessConfig::for_encoder(&self.encoder)
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of("experiment", self)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn store(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        let text = format!("# fingerprint {}\n{}", self.fingerprint(), self.to_toml()?);
        fs::write(dir.join(RESOLVED), text)?;
        Ok(())
    }

    /// Reads a configuration stored by [`ExperimentConfig::store`].
    pub fn load(dir: &Path) -> CliResult<Self> {
        Self::resolve(Some(&dir.join(RESOLVED)), &[])
    }
}
