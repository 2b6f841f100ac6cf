//! The declarative run configuration: one TOML file covering every
//! subcommand. Flags override file values; the resolved result is written
//! next to each command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use atriaseg::infer::PostprocessConfig;
use atriaseg::synth::PhantomSpec;
use atriaseg::train::TrainConfig;
use atriaseg::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ATRIASEG_OUTPUT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest for train, infer and evaluate.
    pub manifest: Option<PathBuf>,
    /// Output directory of the command.
    pub out: Option<PathBuf>,
    /// Checkpoint files (or training directories) used by infer.
    pub checkpoints: Vec<PathBuf>,
    /// Prediction directories scored by evaluate.
    pub predictions: Vec<PathBuf>,
    /// Row labels for `predictions`; defaults to the directory names.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Closing and largest-component filtering after thresholding.
    pub apply_postprocess: bool,
    pub postprocess: PostprocessConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            apply_postprocess: true,
            postprocess: PostprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of bagged models; unset trains a single model.
    pub bagging: Option<usize>,
    pub paths: Paths,
    pub synth: PhantomSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `$ATRIASEG_OUTPUT_ROOT/<command>`, or `runs/<command>` when unset.
pub fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}
