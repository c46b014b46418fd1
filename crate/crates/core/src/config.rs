//! Single TOML config with `[paths]`, `[dataset]`, `[model]`, `[train]`,
//! `[eval]`, `[experiment]` and `[service]` sections. Every key has a
//! default; unknown keys are errors. Overrides come from `--set a.b=v` and
//! from `DRAGENTITY_A__B=v` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelConfig, TrainConfig};
use crate::entity_rep::ConditioningMode;
use crate::error::{Error, Result};
use crate::synth::{DatasetConfig, Split};

pub const ENV_PREFIX: &str = "DRAGENTITY_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root (also the service's scene store).
    pub data: PathBuf,
    /// Checkpoint directory written by `train` and read by the rest.
    pub checkpoint: PathBuf,
    /// Output directory for evaluation and experiment reports.
    pub reports: PathBuf,
    /// Job store of the service.
    pub jobs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data/synth".into(),
            checkpoint: "runs/main".into(),
            reports: "reports".into(),
            jobs: "jobs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampling_steps: usize,
    pub seed: u64,
    /// Number of clips from `split`; 0 means all of them.
    pub clips: usize,
    pub split: Split,
    pub modes: Vec<ConditioningMode>,
    /// Use EMA weights when the checkpoint has them.
    pub use_ema: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 50,
            seed: 0,
            clips: 50,
            split: Split::Test,
            modes: vec![ConditioningMode::Full, ConditioningMode::None],
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Train the relation-bypassed model separately.
    pub no_position: bool,
    /// Train a model with the loss mask disabled (`lambda_bg = 1`).
    pub no_mask: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            no_position: true,
            no_mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub queue_depth: usize,
    pub sampling_steps: usize,
    /// Split served as scenes.
    pub split: Split,
    pub use_ema: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            queue_depth: 8,
            sampling_steps: 50,
            split: Split::Test,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
    pub service: ServiceConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // accept bare TOML literals (numbers, bools, arrays); anything else is a string
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a setting")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a setting")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// File (or defaults), then environment, then explicit overrides.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_lowercase().replace("__", "."), v))
            })
            .collect();
        env.sort();
        for (k, v) in env.iter().chain(overrides) {
            set_path(&mut value, k, parse_value(v))?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.scene.validate()?;
        let s = &self.dataset.scene;
        if (s.frames, s.height, s.width) != (self.model.frames, self.model.height, self.model.width) {
            return Err(Error::Config(format!(
                "dataset clips are {}x{}x{} but the model expects {}x{}x{}",
                s.frames, s.height, s.width, self.model.frames, self.model.height, self.model.width
            )));
        }
        for steps in [self.eval.sampling_steps, self.service.sampling_steps] {
            if steps == 0 || steps > self.model.timesteps {
                return Err(Error::Config(format!(
                    "sampling steps must lie in 1..={}",
                    self.model.timesteps
                )));
            }
        }
        if self.service.queue_depth == 0 {
            return Err(Error::Config("service.queue_depth must be positive".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
