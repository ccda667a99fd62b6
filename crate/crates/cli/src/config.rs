use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stmoe_core::model::ModelConfig;
use stmoe_core::objective::LossWeights;
use stmoe_core::train::TrainConfig;

use crate::failure::{usage, Failure};

/// Dataset locations. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Reporting horizons in seconds after the last observed frame.
    pub horizons: Vec<f64>,
    /// Frame rate for the horizons; taken from the dataset when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 32,
            horizons: vec![0.2, 0.6, 1.0],
            fps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces both `model.seed` and `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("out"),
            data: DataPaths::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies command-line overrides and propagates the seed.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.model.seed = s;
            self.train.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d;
        }
        self
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(usage("eval.batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Parses a TOML file into `T`; unknown keys and type errors are usage errors.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {}", path.display(), e.message())))
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    path.map_or_else(|| Ok(RunConfig::default()), load_toml)
}

/// Writes `value` as TOML to `dir/name`, creating `dir` if needed.
pub fn echo<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, toml::to_string_pretty(value)?)?;
    Ok(path)
}

/// Annotated default configuration, appended to `--help`.
pub fn schema_help() -> String {
    let defaults = toml::to_string_pretty(&RunConfig::default()).unwrap_or_default();
    format!(
        "RUN CONFIG (TOML, passed with --config)\n\
         Unknown keys are rejected; missing keys take the defaults below.\n\
         Optional keys not shown: seed (top level; overrides model.seed and train.seed),\n\
         data.train, data.val (MMP1 dataset paths), train.clip_norm, eval.fps,\n\
         model.ssm.dt_rank (default ceil(width / 16)).\n\
         train.normalizer.anchor is \"last_pose\" or \"root\"; train.precision is \"f64\" or \"f32\";\n\
         model.scan_mode is \"bidirectional\", \"forward\" or \"backward\".\n\n{defaults}"
    )
}
