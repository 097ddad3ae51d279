//! TOML run configuration. Section keys mirror the config structs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::ExperimentGrid;
use super::humaneval::HumanEvalConfig;
use crate::backbone::TrainConfig;
use crate::cleaner::CleanerTrainConfig;
use crate::error::{Error, Result};
use crate::imaging::AugmentationConfig;

pub const DATA_ROOT_ENV: &str = "SIGVERIFY_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub backbone: Option<TrainConfig>,
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default)]
    pub cleaner: Option<CleanerTrainConfig>,
    #[serde(default)]
    pub grid: Option<ExperimentGrid>,
    #[serde(default)]
    pub humaneval: Option<HumanEvalConfig>,
}

impl Config {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `data_root` from the file, else the environment.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(env_data_root)
    }
}

pub fn env_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Resolves a relative path against the data root when one is set.
pub fn resolve(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let text = r#"
data_root = "/data"

[backbone]
batch_size = 64
lr_init = 0.0005
momentum = 0.9
patience = 4
seed = 1
max_epochs = 30

[cleaner]
epochs = 5
batch_size = 2
learning_rate = 0.0002
lambda_cyc = 10.0
seed = 3
input_size = [64, 64]

[grid]
setups = ["S1", "S3", "tobacco"]
output_dir = "out"

[[grid.models]]
name = "vgg-raw"
arch = { name = "vgg_like" }
variant = "raw"
"#;
        let c = Config::parse(text, "t.toml").unwrap();
        assert_eq!(c.backbone.unwrap().batch_size, 64);
        assert_eq!(c.cleaner.unwrap().input_size, (64, 64));
        let g = c.grid.unwrap();
        assert_eq!(g.setups.len(), 3);
        assert_eq!(g.seeds, vec![0]);
        assert_eq!(c.data_root, Some(PathBuf::from("/data")));
    }

    #[test]
    fn reports_line_of_error() {
        let err = Config::parse("data_root = \"x\"\n\n[backbone]\nbatch_size = \"many\"\n", "bad.toml").unwrap_err();
        match err {
            Error::Parse { line, source_name, .. } => {
                assert_eq!(source_name, "bad.toml");
                assert_eq!(line, 4);
            }
            other => panic!("{other}"),
        }
        assert!(Config::parse("nonsense_key = 1", "x").is_err());
    }

    #[test]
    fn relative_paths_follow_root() {
        assert_eq!(resolve(Path::new("a/b"), Some(Path::new("/r"))), PathBuf::from("/r/a/b"));
        assert_eq!(resolve(Path::new("/a"), Some(Path::new("/r"))), PathBuf::from("/a"));
    }
}
