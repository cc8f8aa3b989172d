use std::path::{Path, PathBuf};

use deepdrl::data::{AugmentationSpec, GaussianShiftSpec};
use deepdrl::drl::TrainConfig;
use deepdrl::experiment::ModelSpec;
use deepdrl::selftrain::SelfTrainSchedule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One run's configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every random stream derives from this seed.
    pub seed: u64,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: SelfTrainSchedule,
    #[serde(default)]
    pub ssl: SslSection,
    #[serde(default)]
    pub plugin: PluginSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Synthetic shift; its `seed` field is replaced by the derived data seed.
    Gaussian(GaussianShiftSpec),
    Csv(CsvData),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Gaussian(GaussianShiftSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    /// Labeled source samples, label in the last column.
    pub source: PathBuf,
    pub target: PathBuf,
    /// Whether the target file carries an evaluation label column.
    #[serde(default)]
    pub target_labeled: bool,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslVariant {
    Robust,
    /// Plain softmax confidences with unit ratios and no class regularization.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSection {
    pub threshold: f64,
    /// Defaults to the training batch size.
    pub unlabeled_batch: Option<usize>,
    pub loss_weight: f64,
    pub augmentation: AugmentationSpec,
    /// Labeled source samples kept per class; all of them when absent.
    pub labeled_per_class: Option<usize>,
    pub variant: SslVariant,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            unlabeled_batch: None,
            loss_weight: 1.0,
            augmentation: AugmentationSpec::default(),
            labeled_per_class: None,
            variant: SslVariant::Robust,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginSection {
    pub bandwidths: Vec<f64>,
    pub train_fraction: f64,
    pub ridge: f64,
}

impl Default for PluginSection {
    fn default() -> Self {
        Self {
            bandwidths: vec![0.05, 0.2, 0.5, 1.0],
            train_fraction: 0.8,
            ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub bins: usize,
    /// Share of the labeled source held out to fit the temperature.
    pub held_out_fraction: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            bins: 5,
            held_out_fraction: 0.2,
        }
    }
}

/// Prefixes a section path: `lr_model: ...` inside `train` becomes `train.lr_model: ...`.
fn field(path: &str, e: deepdrl::DrlError) -> CliError {
    let msg = match e {
        deepdrl::DrlError::Config(m) => m,
        other => other.to_string(),
    };
    let names_field = msg
        .split_once(':')
        .is_some_and(|(head, _)| !head.is_empty() && head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
    if names_field {
        CliError::Config(format!("{path}.{msg}"))
    } else {
        CliError::Config(format!("{path}: {msg}"))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            let inner = e.into_inner();
            if at == "." {
                CliError::Config(format!("{}: {inner}", path.display()))
            } else {
                CliError::Config(format!("{at}: {inner}"))
            }
        })
    }

    /// Checks every section and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.schedule.validate().map_err(|e| field("schedule", e))?;
        match &self.data {
            DataSpec::Gaussian(g) => g.validate().map_err(|e| field("data", e))?,
            DataSpec::Csv(c) => {
                for (name, p) in [("data.source", &c.source), ("data.target", &c.target)] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("{name}: file {} not found", p.display())));
                    }
                }
            }
        }
        let ssl = &self.ssl;
        if !(ssl.threshold > 0.0 && ssl.threshold < 1.0) {
            return Err(CliError::Config("ssl.threshold: must lie in (0, 1)".into()));
        }
        if ssl.unlabeled_batch == Some(0) {
            return Err(CliError::Config("ssl.unlabeled_batch: must be >= 1".into()));
        }
        if !(ssl.loss_weight >= 0.0 && ssl.loss_weight.is_finite()) {
            return Err(CliError::Config("ssl.loss_weight: must be >= 0".into()));
        }
        if ssl.labeled_per_class == Some(0) {
            return Err(CliError::Config("ssl.labeled_per_class: must be >= 1".into()));
        }
        ssl.augmentation.validate().map_err(|e| field("ssl.augmentation", e))?;
        if self.plugin.bandwidths.is_empty() || self.plugin.bandwidths.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err(CliError::Config("plugin.bandwidths: need at least one positive bandwidth".into()));
        }
        if !(self.plugin.train_fraction > 0.0 && self.plugin.train_fraction < 1.0) {
            return Err(CliError::Config("plugin.train_fraction: must lie in (0, 1)".into()));
        }
        if !self.plugin.ridge.is_finite() || self.plugin.ridge < 0.0 {
            return Err(CliError::Config("plugin.ridge: must be >= 0".into()));
        }
        if self.calibration.bins == 0 {
            return Err(CliError::Config("calibration.bins: must be >= 1".into()));
        }
        let f = self.calibration.held_out_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Config("calibration.held_out_fraction: must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        ExperimentConfig::load(&p)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data, DataSpec::default());
        c.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let err = parse("{}").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn errors_name_the_field_path() {
        let err = parse(r#"{"seed": 1, "train": {"lr_model": "fast"}}"#).unwrap_err();
        assert!(err.to_string().starts_with("train.lr_model"), "{err}");
        let c = parse(r#"{"seed": 1, "train": {"lr_model": -0.1}}"#).unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().starts_with("train.lr_model"), "{err}");
        let err = parse(r#"{"seed": 1, "model": {"depth": 3}}"#).unwrap_err();
        assert!(err.to_string().starts_with("model"), "{err}");
        let c = parse(r#"{"seed": 1, "model": {"feature_dim": 0}}"#).unwrap();
        assert_eq!(c.validate().unwrap_err().to_string(), "model: layer widths must be >= 1");
    }

    #[test]
    fn csv_paths_must_exist() {
        let c = parse(r#"{"seed": 1, "data": {"kind": "csv", "source": "/no/such/a.csv", "target": "/no/such/b.csv"}}"#)
            .unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().starts_with("data.source"), "{err}");
    }

    #[test]
    fn gaussian_section_parses() {
        let c = parse(r#"{"seed": 1, "data": {"kind": "gaussian", "n_source": 50}}"#).unwrap();
        match c.data {
            DataSpec::Gaussian(g) => assert_eq!(g.n_source, 50),
            other => panic!("unexpected {other:?}"),
        }
    }
}
