//! Run configuration: a TOML document (the `.cfg` presets) with
//! command-line overrides applied on top before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::surrogate::DEFAULT_SIGMA;

/// Environment variable that, when set, is prepended to relative data paths.
pub const DATA_ROOT_ENV: &str = "PROTOSEG_DATA_ROOT";

pub const TINY_PRESET: &str = include_str!("../../../presets/tiny.cfg");
pub const PAPER_PRESET: &str = include_str!("../../../presets/paper.cfg");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Episodic few-shot training.
    #[default]
    Episodic,
    /// Batch-wise supervised training without prototypes.
    Regular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// `[H, W]` every image and mask is resized to.
    pub image_size: [usize; 2],
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub copies: usize,
    #[serde(default)]
    pub pool_dir: Option<PathBuf>,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn one() -> usize {
    1
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            copies: 1,
            pool_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            seed: 0,
            k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write an intermediate checkpoint every this many steps (0: only the
    /// final one).
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: TrainMode,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub k: usize,
    /// Unlabeled images in the surrogate batch of each step.
    #[serde(default)]
    pub u: usize,
    /// Episodes whose few-shot losses are averaged in one step.
    #[serde(default = "one")]
    pub episodes_per_step: usize,
    /// Images per step in regular mode.
    #[serde(default = "default_regular_batch")]
    pub regular_batch: usize,
    /// Evaluate on held-out classes every this many steps (0: never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub pretrained_encoder: Option<PathBuf>,
    #[serde(default)]
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    pub output: OutputConfig,
}

fn default_regular_batch() -> usize {
    2
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::config(key, message)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides (dotted keys, TOML
    /// literal values; bare words are taken as strings) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid(&error_key(&e), e.message().to_string()))?;
        for (key, value) in overrides {
            set_key(&mut doc, key, value)?;
        }
        let config: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
                let path = e.path().to_string();
                let inner = e.into_inner();
                invalid(&field_key(&path, &inner), inner.message().to_string())
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn tiny() -> Self {
        Self::from_toml_str(TINY_PRESET).expect("tiny preset is valid")
    }

    pub fn paper() -> Self {
        Self::from_toml_str(PAPER_PRESET).expect("paper preset is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// True when the surrogate branch contributes to training.
    pub fn uses_surrogate(&self) -> bool {
        self.mode == TrainMode::Episodic && self.u > 0 && self.lambda > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(
                "lambda",
                format!("must be non-negative, got {}", self.lambda),
            ));
        }
        if self.k < 1 {
            return Err(invalid("k", "must be at least 1"));
        }
        if self.episodes_per_step < 1 {
            return Err(invalid("episodes_per_step", "must be at least 1"));
        }
        if self.regular_batch < 1 {
            return Err(invalid("regular_batch", "must be at least 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(invalid("adam.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(invalid("adam.beta2", "must be in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(invalid("adam.eps", "must be positive"));
        }
        self.model.validate()?;
        let [h, w] = self.data.image_size;
        if h == 0 || w == 0 || h % crate::network::STRIDE != 0 || w % crate::network::STRIDE != 0 {
            return Err(invalid(
                "data.image_size",
                format!("{h}x{w} must be divisible by 4"),
            ));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(invalid(
                "data.test_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.surrogate.sigma >= 0.0 && self.surrogate.sigma.is_finite()) {
            return Err(invalid("surrogate.sigma", "must be non-negative"));
        }
        if self.surrogate.copies < 1 {
            return Err(invalid("surrogate.copies", "must be at least 1"));
        }
        if self.uses_surrogate() && self.surrogate.pool_dir.is_none() {
            return Err(invalid(
                "surrogate.pool_dir",
                "required when u > 0 and lambda > 0",
            ));
        }
        if self.evaluation.n_episodes < 1 {
            return Err(invalid("evaluation.n_episodes", "must be at least 1"));
        }
        if self.evaluation.k < 1 {
            return Err(invalid("evaluation.k", "must be at least 1"));
        }
        Ok(())
    }

    /// Resolves relative data paths against `$PROTOSEG_DATA_ROOT` when set.
    pub fn resolve_data_paths(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            let root = PathBuf::from(root);
            if self.data.root.is_relative() {
                self.data.root = root.join(&self.data.root);
            }
            if let Some(pool) = self.surrogate.pool_dir.as_mut().filter(|p| p.is_relative()) {
                *pool = root.join(&*pool);
            }
        }
    }
}

fn error_key(e: &toml::de::Error) -> String {
    // toml reports "unknown field `x`" / "missing field `x`"; surface x.
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "config".to_string()
}

/// Dotted key of a deserialisation error. Missing fields are reported at
/// the enclosing table, so the field name is appended.
fn field_key(path: &str, e: &toml::de::Error) -> String {
    if e.message().starts_with("missing field") {
        let field = error_key(e);
        return if path == "." {
            field
        } else {
            format!("{path}.{field}")
        };
    }
    if path == "." {
        error_key(e)
    } else {
        path.to_string()
    }
}

fn parse_value(key: &str, raw: &str) -> Result<toml::Value> {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("probe key")),
        Err(_) if !raw.is_empty() && !raw.contains(['"', '[', '{', '=']) => {
            Ok(toml::Value::String(raw.to_string()))
        }
        Err(e) => Err(invalid(key, e.message().to_string())),
    }
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn set_key(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(key, raw)?;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts
        .split_last()
        .ok_or_else(|| invalid(key, "empty key"))?;
    let mut table = doc;
    for part in path {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{part}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
