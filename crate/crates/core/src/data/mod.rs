//! Datasets, CSV ingestion, synthetic covariate-shift generators and vector augmentations.

mod augment;
mod csv;
mod discrete;
mod gaussian;

pub use augment::{augment, AugmentationSpec, Strength};
pub use csv::{load_csv, parse_csv, write_csv, CsvSchema};
pub use discrete::{oracle_expectations, DiscreteDomainSpec, OracleExpectations, OracleRatios};
pub use gaussian::{generate_gaussian_shift, GaussianShiftSpec, ShiftData, TrueRatio};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: Option<usize>, domain: Domain) -> Self {
        Self {
            features,
            label,
            domain,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// An immutable collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    class_count: usize,
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates that every sample is finite, has dimension `dim`, and carries a label `< class_count`.
    pub fn new(
        name: impl Into<String>,
        class_count: usize,
        dim: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.dim() != dim {
                return config(format!(
                    "sample {i} has dimension {} but the dataset has {dim}",
                    s.dim()
                ));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return config(format!("sample {i} has a non-finite feature"));
            }
            if let Some(y) = s.label {
                if y >= class_count {
                    return config(format!(
                        "sample {i} has label {y} but the dataset has {class_count} classes"
                    ));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            class_count,
            dim,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// Labels in sample order, or `None` when any sample is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Same inputs with every label removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            class_count: self.class_count,
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .map(|s| Sample::new(s.features.clone(), None, s.domain))
                .collect(),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Subset by index, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            class_count: self.class_count,
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Seeded shuffle split; the first part holds `round(fraction · n)` samples.
    pub fn split<R: Rng>(&self, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let cut = ((fraction * self.len() as f64).round() as usize).min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Draws `per_class` samples of every class without replacement.
    pub fn sample_per_class<R: Rng>(&self, per_class: usize, rng: &mut R) -> Result<Dataset> {
        let mut picked = Vec::with_capacity(per_class * self.class_count);
        for c in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.samples[i].label == Some(c))
                .collect();
            if idx.len() < per_class {
                return config(format!(
                    "class {c} has {} samples, {per_class} requested",
                    idx.len()
                ));
            }
            idx.shuffle(rng);
            picked.extend_from_slice(&idx[..per_class]);
        }
        picked.sort_unstable();
        Ok(self.subset(&picked))
    }
}
