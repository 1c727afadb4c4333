//! Run configuration: one TOML document merging every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{SyntheticEncoder, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::spm::NoiseSpec;
use crate::train::TrainConfig;

/// Prefix of environment overrides. `OVSEG_TRAIN__BASE_LR=1e-3` sets `train.base_lr`.
pub const ENV_PREFIX: &str = "OVSEG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_stride: usize,
    pub seed_namespace: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_stride: 8,
            seed_namespace: "ovseg-synthetic".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub prompt_template: String,
    pub encoder: EncoderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub resolution_groups: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub data: DataConfig,
    pub eval: EvalOptions,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Small configuration that trains in minutes on one CPU core.
    ///
    /// Both perturbation modules are off: with the hashed synthetic encoders
    /// their learnable shifts turn into a train-only feature adapter, and the
    /// eval-mode model no longer matches what was trained. Enable them with
    /// `model.text_spm = true` / `model.image_spm = true`.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.total_steps = 300;
        cfg.train.batch_size = 8;
        cfg.train.base_lr = 2e-3;
        cfg.train.warmup_steps = 20;
        cfg.train.diag_every = 50;
        cfg.model.embed_dim = 64;
        cfg.model.aggregator.num_blocks = 2;
        cfg.model.aggregator.feature_dim = 64;
        cfg.model.aggregator.window = 5;
        cfg.model.decoder_stages = 2;
        cfg.model.text_spm = false;
        cfg.model.image_spm = false;
        cfg.data.encoder.patch_stride = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.noise.validate()?;
        if self.data.encoder.patch_stride == 0 {
            return Err(Error::Config("encoder.patch_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> SyntheticEncoder {
        SyntheticEncoder {
            embed_dim: self.model.embed_dim,
            patch_stride: self.data.encoder.patch_stride,
            seed_namespace: self.data.encoder.seed_namespace.clone(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Set one dotted key, e.g. `train.base_lr` = `1e-3`. The value is parsed
    /// as a TOML literal and falls back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_value(value);
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad key {key:?}")));
        }
        let mut node = &mut doc;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: parent is not a table")))?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
        let updated: RunConfig = deny_unknown(&doc, key)?;
        *self = updated;
        Ok(())
    }

    /// Apply `OVSEG_SECTION__FIELD=value` variables from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .filter(|(k, _)| k.contains('.'))
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }
}

fn parse_value(value: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {value}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(value.to_string()),
    }
}

// Round-trip through the typed config and reject keys that did not land anywhere.
fn deny_unknown(doc: &toml::Value, key: &str) -> Result<RunConfig> {
    let cfg: RunConfig = doc
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
    let back = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    if key.split('.').try_fold(&back, |n, p| n.get(p)).is_none() {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spm::NoiseFamily;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nbase_lr = 0.01\n").unwrap();
        assert_eq!(cfg.train.base_lr, 0.01);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("train.base_lr", "1e-3").unwrap();
        cfg.set("noise.family", "student_t").unwrap();
        cfg.set("noise.df", "5").unwrap();
        cfg.set("model.window", "3").unwrap();
        cfg.set("data.train_manifest", "a/b.json").unwrap();
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.noise.family, NoiseFamily::StudentT);
        assert_eq!(cfg.noise.df, Some(5.0));
        assert_eq!(cfg.model.aggregator.window, 3);
        assert_eq!(cfg.data.train_manifest, Some(PathBuf::from("a/b.json")));
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("train.batch_size", "\"x\"").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([
            ("OVSEG_TRAIN__SEED".to_string(), "42".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.train.seed, 42);
    }
}
