//! Experiment configuration files and the built-in presets.

use std::path::{Path, PathBuf};

use rpu_core::data::{data_root, DATA_ROOT_ENV};
use rpu_core::{AugmentConfig, Mode, NetworkSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Named configurations shipped with the binary.
pub const PRESETS: &[(&str, &str)] = &[
    ("baseline", include_str!("../../../presets/baseline.toml")),
    ("states-4x", include_str!("../../../presets/states-4x.toml")),
    ("alexnet-states", include_str!("../../../presets/alexnet-states.toml")),
    ("fig3-left", include_str!("../../../presets/fig3-left.toml")),
    ("fig3-left-4x", include_str!("../../../presets/fig3-left-4x.toml")),
    ("fig3-right", include_str!("../../../presets/fig3-right.toml")),
    ("fig4-left", include_str!("../../../presets/fig4-left.toml")),
    ("fig4-left-4x", include_str!("../../../presets/fig4-left-4x.toml")),
    ("fig4-right", include_str!("../../../presets/fig4-right.toml")),
    ("mnist-desk", include_str!("../../../presets/mnist-desk.toml")),
    ("synthetic", include_str!("../../../presets/synthetic.toml")),
];

/// SGD schedule; the seed lives at the top level of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Where the images come from. Relative paths resolve against the data
/// root (`--data-root` or `RPU_DATA_ROOT`), then the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory with the four MNIST IDX files.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    /// Directory with the CIFAR-10 binary batches.
    Cifar10 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    /// Gaussian blobs.
    Synthetic {
        classes: usize,
        dims: usize,
        train: usize,
        test: usize,
        separation: f64,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub network: NetworkSpec,
}

/// Command-line overrides applied on top of a file or preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub epochs: Option<usize>,
    pub data_root: Option<PathBuf>,
}

pub fn preset(name: &str) -> Result<&'static str, CliError> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("unknown preset '{name}' (available: {})", names.join(", ")))
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn from_preset(name: &str) -> Result<Self, CliError> {
        Self::parse(preset(name)?, &format!("preset '{name}'"))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.train.lr0,
            decay_factor: self.train.decay_factor,
            decay_every: self.train.decay_every,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    /// Applies overrides and makes the dataset path absolute, so the result
    /// reproduces the run on its own.
    pub fn resolve(mut self, ov: &Overrides) -> Result<Self, CliError> {
        if let Some(out) = &ov.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(mode) = ov.mode {
            self.mode = mode;
        }
        if let Some(epochs) = ov.epochs {
            self.train.epochs = epochs;
        }
        let root = data_root(ov.data_root.as_deref());
        match &mut self.dataset {
            DatasetSpec::Mnist { path, .. } | DatasetSpec::Cifar10 { path, .. } => {
                let p = resolve_dataset_path(path.as_deref(), root.as_deref())?;
                *path = Some(p);
            }
            DatasetSpec::Synthetic { .. } => {}
        }
        self.validate()?;
        Ok(self)
    }

    /// Checks every section without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: rpu_core::RpuError| CliError::Config(format!("{name}: {e}"));
        self.train_config().validate().map_err(|e| field("train", e))?;
        self.augment.validate().map_err(|e| field("augment", e))?;
        let shapes = self.network.validate().map_err(|e| field("network", e))?;
        let classes = shapes.last().and_then(|s| s.first()).copied().unwrap_or(0);
        if self.augment.random_crop || self.augment.scale_jitter > 1.0 || self.augment.mirror {
            if self.network.input_shape.len() != 3 {
                return Err(CliError::Config(
                    "augment: mirroring, scale jitter and cropping need image input ([C, H, W])".into(),
                ));
            }
        }
        match &self.dataset {
            DatasetSpec::Mnist { .. } => {
                expect_input(&self.network.input_shape, &[1, 28, 28], "mnist")?;
                expect_classes(classes, 10)?;
            }
            DatasetSpec::Cifar10 { .. } => {
                expect_input(&self.network.input_shape, &[3, 32, 32], "cifar10")?;
                expect_classes(classes, 10)?;
            }
            DatasetSpec::Synthetic {
                classes: c,
                dims,
                train,
                test,
                separation,
            } => {
                expect_input(&self.network.input_shape, &[*dims], "synthetic")?;
                expect_classes(classes, *c)?;
                if *train < *c || *test == 0 {
                    return Err(CliError::Config(format!(
                        "dataset.train must be >= dataset.classes and dataset.test >= 1 (got {train}, {test})"
                    )));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(CliError::Config(format!("dataset.separation must be >= 0, got {separation}")));
                }
            }
        }
        Ok(())
    }
}

fn expect_input(got: &[usize], want: &[usize], kind: &str) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::Config(format!(
            "network.input_shape: {kind} samples have shape {want:?}, got {got:?}"
        )));
    }
    Ok(())
}

fn expect_classes(got: usize, want: usize) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::Config(format!(
            "network.layers: last layer has {got} outputs but the dataset has {want} classes"
        )));
    }
    Ok(())
}

fn resolve_dataset_path(path: Option<&Path>, root: Option<&Path>) -> Result<PathBuf, CliError> {
    let candidate = match (path, root) {
        (Some(p), _) if p.is_absolute() => p.to_path_buf(),
        (Some(p), Some(r)) if r.join(p).exists() => r.join(p),
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.to_path_buf(),
        (None, None) => {
            return Err(CliError::Config(format!(
                "dataset.path is not set and neither --data-root nor {DATA_ROOT_ENV} is given"
            )))
        }
    };
    if !candidate.is_dir() {
        return Err(CliError::Config(format!(
            "dataset.path: directory {} does not exist",
            candidate.display()
        )));
    }
    candidate
        .canonicalize()
        .map_err(|e| CliError::Config(format!("dataset.path: {}: {e}", candidate.display())))
}
