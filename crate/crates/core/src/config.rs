//! Run configuration files.
//!
//! A run config is TOML with strict parsing: unknown keys are errors and
//! every value survives a save and reload unchanged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_dataset, make_synthetic_shapes, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "GAUSSCLUST_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated shapes; labels are shape ids.
    Synthetic { cluster_count: usize, n_per_class: usize, image_size: usize, seed: u64 },
    Folder(DatasetSpec),
}

impl DataSource {
    pub fn cluster_count(&self) -> usize {
        match self {
            Self::Synthetic { cluster_count, .. } => *cluster_count,
            Self::Folder(spec) => spec.cluster_count,
        }
    }

    /// Network input size and channel count implied by the data.
    pub fn input_geometry(&self) -> (usize, usize, usize) {
        match self {
            Self::Synthetic { image_size, .. } => (*image_size, *image_size, 1),
            Self::Folder(spec) => (spec.image_size[0], spec.image_size[1], if spec.grayscale { 1 } else { 3 }),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Synthetic { cluster_count, n_per_class, image_size, seed } => {
                make_synthetic_shapes(*cluster_count, *n_per_class, *image_size, *seed)
            }
            Self::Folder(spec) => load_dataset(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ModelChoice {
    /// Three conv blocks sized from the data geometry.
    Small,
    Cifar,
    Stl10,
    Custom(ModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and overrides `train.seed`.
    pub seed: u64,
    /// Parent of the timestamped run directories.
    pub output_dir: PathBuf,
    pub dataset: DataSource,
    pub model: ModelChoice,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Folder(spec) = &self.dataset {
            spec.validate()?;
        }
        if self.dataset.cluster_count() < 2 {
            return Err(Error::InvalidConfig("cluster_count must be >= 2".into()));
        }
        self.train_config().validate()?;
        let model = self.model_config();
        model.validate()?;
        let (h, w, c) = self.dataset.input_geometry();
        if model.input_size != [h, w] || model.in_channels != c {
            return Err(Error::InvalidConfig(format!(
                "model expects {:?}x{} inputs but the data gives [{h}, {w}]x{c}",
                model.input_size, model.in_channels
            )));
        }
        if model.cluster_count != self.dataset.cluster_count() {
            return Err(Error::InvalidConfig("model and dataset cluster counts differ".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let k = self.dataset.cluster_count();
        match &self.model {
            ModelChoice::Small => {
                let (h, _, c) = self.dataset.input_geometry();
                ModelConfig::small(h, c, k)
            }
            ModelChoice::Cifar => ModelConfig::cifar(k),
            ModelChoice::Stl10 => ModelConfig::stl10(k),
            ModelChoice::Custom(m) => m.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// `output_dir`, resolved against the output-root variable when relative.
    pub fn output_root(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 3
output_dir = "runs"

[dataset]
kind = "synthetic"
cluster_count = 3
n_per_class = 10
image_size = 32
seed = 7

[model]
preset = "small"

[train]
epochs = 2
macro_batch = 30
sub_batch = 10
mini_batch = 10
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.mini_batch, 10);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.model_config().input_size, [32, 32]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = EXAMPLE.replace("epochs = 2", "epochs = 2\nepoch = 3");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Toml(_))));
        let bad = EXAMPLE.replace("seed = 7", "seed = 7\ncolour = true");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = format!("{EXAMPLE}\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml(&bad).is_err());
    }
}
