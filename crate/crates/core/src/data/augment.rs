use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{config, Result};

/// Parametric vector augmentations standing in for image flips, crops and RandAugment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub weak_noise_std: f64,
    pub strong_noise_std: f64,
    pub strong_mask_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            weak_noise_std: 0.05,
            strong_noise_std: 0.3,
            strong_mask_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_std >= 0.0 && self.strong_noise_std >= self.weak_noise_std) {
            return config("augmentation needs 0 <= weak_noise_std <= strong_noise_std");
        }
        if !(0.0..=1.0).contains(&self.strong_mask_fraction) {
            return config("strong_mask_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strength {
    Weak,
    Strong,
}

/// Weak: additive Gaussian noise. Strong: larger noise, then a random subset of
/// `round(fraction · d)` coordinates is zeroed.
pub fn augment<R: Rng>(sample: &Sample, spec: &AugmentationSpec, strength: Strength, rng: &mut R) -> Sample {
    let std = match strength {
        Strength::Weak => spec.weak_noise_std,
        Strength::Strong => spec.strong_noise_std,
    };
    let mut features = sample.features.clone();
    if std > 0.0 {
        let noise = Normal::new(0.0, std).expect("std validated non-negative");
        for v in features.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    if strength == Strength::Strong {
        let d = features.len();
        let k = ((spec.strong_mask_fraction * d as f64).round() as usize).min(d);
        for j in sample_indices(rng, d, k) {
            features[j] = 0.0;
        }
    }
    Sample::new(features, sample.label, sample.domain)
}
