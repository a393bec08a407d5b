//! Experiment files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sliceout::nn::ModelSpec;
use sliceout::slicing::SliceScheme;
use sliceout::trainer::{Dataset, OptimizerConfig, Precision, TrainConfig};

use crate::data;
use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SLICEOUT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        /// Points per class.
        n: usize,
        #[serde(default = "unit")]
        spread: f64,
        /// Defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("sliceout-run")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub scheme: SliceScheme,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_fraction: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
    pub dataset: DatasetSpec,
    /// Directory for metrics.csv and summary.json. Relative paths resolve
    /// against the config file's directory.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config { path: origin.to_string(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path`, applies the seed override and resolves relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| CliError::Config {
                path: SEED_ENV.into(),
                message: format!("'{v}' is not an unsigned integer"),
            })?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let DatasetSpec::Idx { images, labels, test_images, test_labels } = &mut self.dataset {
            fix(images);
            fix(labels);
            test_images.as_mut().map(fix);
            test_labels.as_mut().map(fix);
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            scheme: self.scheme,
            optimizer: self.optimizer.clone(),
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            cutoff_fraction: self.cutoff_fraction,
            precision: self.precision,
        }
    }

    pub fn load_dataset(&self) -> CliResult<Dataset> {
        Ok(match &self.dataset {
            DatasetSpec::Blobs { classes, dim, n, spread, seed } => {
                data::gen_blobs(*classes, *dim, *n, seed.unwrap_or(self.seed), *spread)?
            }
            DatasetSpec::Idx { images, labels, test_images, test_labels } => {
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some((i.as_path(), l.as_path())),
                    (None, None) => None,
                    _ => {
                        return Err(CliError::Config {
                            path: "dataset".into(),
                            message: "test_images and test_labels must be given together".into(),
                        })
                    }
                };
                data::idx_dataset((images, labels), test)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
epochs = 3
batch = 32
seed = 9
output = "out"

[model]
kind = "mlp"
hidden = [64, 64]

[scheme]
kind = "sliceout"
rate = 0.3
normalization = "probabilistic"
delayed = false
seed = 0

[optimizer]
kind = "sgd"
lr = 0.05
momentum = 0.9

[dataset]
kind = "blobs"
classes = 4
dim = 8
n = 20
"#;

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::parse(SAMPLE, "sample").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml(), "again").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            SAMPLE.replace("seed = 9", "seeed = 9"),
            SAMPLE.replace("hidden = [64, 64]", "hidden = [64, 64]\nwidth = 3"),
            SAMPLE.replace("n = 20", "n = 20\ncount = 1"),
            SAMPLE.replace("kind = \"sliceout\"", "kind = \"slice-out\""),
        ] {
            let e = ExperimentConfig::parse(&bad, "bad").unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }

    #[test]
    fn missing_epochs_names_field() {
        let e = ExperimentConfig::parse(&SAMPLE.replace("epochs = 3", ""), "cfg").unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }
}
