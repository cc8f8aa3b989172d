use serde::{Deserialize, Serialize};

use crate::domain::RatioBounds;
use crate::error::{config, contract, Result};
use crate::features::FeatureMap;
use crate::matrix::{dot, Matrix};
use crate::numeric::{argmax, softmax_with_log_partition};

/// Which one-hot vector enters the class-regularized prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// Training: the indicator is the one-hot encoding of the known label.
    Train(usize),
    /// Testing: the indicator is the all-ones vector.
    Test,
}

/// A probability vector on the class simplex with the log-partition of its logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub log_partition: f64,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

impl AsRef<[f64]> for Prediction {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// Class-regularized robust prediction from raw scores `z_y = θ_y · φ(x)`:
/// `logit_y = (R z_y + r I_y) / (r I_y + 1)`.
///
/// In test mode every `I_y = 1`, so the constant `r/(1+r)` cancels and the result is
/// exactly `softmax(R z / (1 + r))`; the constant is kept in `log_partition`.
pub fn predict_scores(scores: &[f64], ratio: f64, r: f64, mode: LabelMode) -> Result<Prediction> {
    match mode {
        LabelMode::Test => {
            let logits: Vec<f64> = scores.iter().map(|z| ratio * z / (1.0 + r)).collect();
            let (probs, lz) = softmax_with_log_partition(&logits);
            Ok(Prediction {
                probs,
                log_partition: lz + r / (1.0 + r),
            })
        }
        LabelMode::Train(label) => {
            if label >= scores.len() {
                return contract(format!(
                    "label {label} out of range for {} classes",
                    scores.len()
                ));
            }
            let logits: Vec<f64> = scores
                .iter()
                .enumerate()
                .map(|(y, z)| {
                    if y == label {
                        (ratio * z + r) / (r + 1.0)
                    } else {
                        ratio * z
                    }
                })
                .collect();
            let (probs, log_partition) = softmax_with_log_partition(&logits);
            Ok(Prediction {
                probs,
                log_partition,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustClassifier {
    pub theta: Matrix,
    pub features: FeatureMap,
    pub r: f64,
    pub bounds: RatioBounds,
}

impl RobustClassifier {
    pub fn new(theta: Matrix, features: FeatureMap, r: f64, bounds: RatioBounds) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return config(format!("class regularization r = {r} must lie in [0, 1]"));
        }
        if theta.cols != features.out_dim() {
            return config(format!(
                "theta has {} columns but the feature map outputs {}",
                theta.cols,
                features.out_dim()
            ));
        }
        if theta.rows < 2 {
            return config("at least two classes are required");
        }
        if !theta.is_finite() {
            return config("theta must be finite");
        }
        Ok(Self {
            theta,
            features,
            r,
            bounds,
        })
    }

    /// Zero class weights on top of `features`.
    pub fn zeros(class_count: usize, features: FeatureMap, r: f64, bounds: RatioBounds) -> Result<Self> {
        let theta = Matrix::zeros(class_count, features.out_dim());
        Self::new(theta, features, r, bounds)
    }

    pub fn class_count(&self) -> usize {
        self.theta.rows
    }

    pub fn scores_from_features(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.theta.rows)
            .map(|y| dot(self.theta.row(y), phi))
            .collect()
    }

    /// `(φ(x), θ·φ(x))`
    pub fn scores(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let phi = self.features.forward(x)?;
        let z = self.scores_from_features(&phi);
        Ok((phi, z))
    }

    pub fn predict(&self, x: &[f64], ratio: f64, mode: LabelMode) -> Result<Prediction> {
        let (_, z) = self.scores(x)?;
        self.predict_from_scores(&z, ratio, mode)
    }

    pub fn predict_from_scores(&self, z: &[f64], ratio: f64, mode: LabelMode) -> Result<Prediction> {
        if !self.bounds.contains(ratio) {
            return contract(format!(
                "ratio {ratio} outside [{}, {}]",
                self.bounds.min, self.bounds.max
            ));
        }
        predict_scores(z, ratio, self.r, mode)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.features.is_finite()
    }
}
