use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use structlight::data::DegradeConfig;
use structlight::imaging::CannyConfig;
use structlight::model::ModelConfig;
use structlight::training::TrainConfig;

use crate::{usage_err, CliResult};

/// A named preset or a full network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Full(Box<ModelConfig>),
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::Preset("desk".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> CliResult<ModelConfig> {
        let cfg = match self {
            Self::Preset(p) if p == "desk" => ModelConfig::desk(),
            Self::Preset(p) if p == "tiny" => ModelConfig::tiny(),
            Self::Preset(p) => return Err(usage_err(format!("unknown model preset '{p}' (expected desk or tiny)"))),
            Self::Full(c) => (**c).clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSources {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MakeDataRun {
    pub src: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Generate source images instead of reading `src`.
    pub synthetic: Option<SyntheticSources>,
    pub degrade: DegradeConfig,
    pub canny: CannyConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceRun {
    pub checkpoint: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub dump_intermediates: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub pred_edges: Option<PathBuf>,
    pub gt_edges: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn read<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage_err(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage_err(format!("invalid config {}: {e}", path.display())))
}

/// Writes the effective configuration next to the command's outputs.
pub fn archive<T: Serialize>(cfg: &T, dir: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg).map_err(|e| anyhow::anyhow!("serializing config: {e}"))?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

pub fn required(p: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| usage_err(format!("{flag} is required (flag or config file)")))
}
