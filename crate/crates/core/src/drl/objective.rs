use crate::data::Sample;
use crate::error::{config, contract, Result};
use crate::features::{FeatureGradient, FeatureMap};
use crate::matrix::{axpy, dot, Matrix};

use super::robust::{LabelMode, RobustClassifier};

/// Per-class feature moments of the labeled source data, `c̃_y = E_s[1[y_i = y] φ(x_i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConstraint {
    pub c_tilde: Matrix,
}

impl FeatureConstraint {
    pub fn from_samples(features: &FeatureMap, class_count: usize, samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return contract("feature constraint over an empty source set");
        }
        let w = vec![1.0 / samples.len() as f64; samples.len()];
        Self::from_weighted(features, class_count, samples, &w)
    }

    /// `c̃_y = Σ_i w_i 1[y_i = y] φ(x_i)` for arbitrary sample weights.
    pub fn from_weighted(
        features: &FeatureMap,
        class_count: usize,
        samples: &[&Sample],
        weights: &[f64],
    ) -> Result<Self> {
        if samples.len() != weights.len() {
            return config("one weight per sample is required");
        }
        let mut c_tilde = Matrix::zeros(class_count, features.out_dim());
        for (s, &w) in samples.iter().zip(weights) {
            let Some(y) = s.label else {
                return contract("feature constraint needs labeled samples");
            };
            if y >= class_count {
                return contract(format!("label {y} out of range"));
            }
            let phi = features.forward(&s.features)?;
            axpy(w, &phi, c_tilde.row_mut(y));
        }
        Ok(Self { c_tilde })
    }
}

/// `mean_t log Z_θ(x) − Σ_y θ_y · c̃_y` over target inputs with per-sample ratios.
pub fn dual_objective(
    clf: &RobustClassifier,
    targets: &[&[f64]],
    ratios: &[f64],
    constraint: &FeatureConstraint,
) -> Result<f64> {
    if targets.is_empty() {
        return contract("dual objective over an empty target set");
    }
    let w = vec![1.0 / targets.len() as f64; targets.len()];
    dual_objective_weighted(clf, targets, &w, ratios, constraint)
}

/// `Σ_i w_i log Z_θ(x_i) − Σ_y θ_y · c̃_y`; `w` plays the role of the target density.
pub fn dual_objective_weighted(
    clf: &RobustClassifier,
    targets: &[&[f64]],
    weights: &[f64],
    ratios: &[f64],
    constraint: &FeatureConstraint,
) -> Result<f64> {
    if targets.is_empty() {
        return contract("dual objective over an empty target set");
    }
    if targets.len() != weights.len() || targets.len() != ratios.len() {
        return config("targets, weights and ratios must have equal lengths");
    }
    if (constraint.c_tilde.rows, constraint.c_tilde.cols) != (clf.theta.rows, clf.theta.cols) {
        return config("constraint shape does not match theta");
    }
    let mut value = 0.0;
    for ((x, &w), &ratio) in targets.iter().zip(weights).zip(ratios) {
        value += w * clf.predict(x, ratio, LabelMode::Test)?.log_partition;
    }
    let moment: f64 = (0..clf.theta.rows)
        .map(|y| dot(clf.theta.row(y), constraint.c_tilde.row(y)))
        .sum();
    Ok(value - moment)
}

/// Gradients of the dual objective written as source expectations.
#[derive(Debug, Clone)]
pub struct SourceGradient {
    pub theta: Matrix,
    /// `u_i = Σ_y (f_y(x_i) − 1[y_i = y]) θ_y`, the gradient with respect to `φ(x_i)`.
    pub upstream: Vec<Vec<f64>>,
    pub features: FeatureGradient,
    /// Weighted mean of `−log f_{y_i}(x_i)` under the training-mode prediction.
    pub loss: f64,
    pub correct: usize,
}

/// Uniformly weighted [`grad_source_weighted`].
pub fn grad_source(clf: &RobustClassifier, batch: &[&Sample], ratios: &[f64]) -> Result<SourceGradient> {
    if batch.is_empty() {
        return contract("source gradient over an empty batch");
    }
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    grad_source_weighted(clf, batch, &w, ratios)
}

/// `∇θ_y = Σ_i w_i (f_y(x_i) − 1[y_i = y]) φ(x_i)` with `f` the training-mode prediction
/// at ratio `R_i`, and the matching feature-parameter gradient.
///
/// Ratios are constants here. When the weights are the source distribution and the ratios
/// are exact, this is the gradient of the dual objective under the target distribution.
pub fn grad_source_weighted(
    clf: &RobustClassifier,
    batch: &[&Sample],
    weights: &[f64],
    ratios: &[f64],
) -> Result<SourceGradient> {
    if batch.len() != weights.len() || batch.len() != ratios.len() {
        return config("batch, weights and ratios must have equal lengths");
    }
    let c = clf.class_count();
    let mut theta = Matrix::zeros(c, clf.theta.cols);
    let mut features = FeatureGradient::zeros_like(&clf.features);
    let mut upstream = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let mut correct = 0;
    for ((s, &w), &ratio) in batch.iter().zip(weights).zip(ratios) {
        let Some(label) = s.label else {
            return contract("source gradient needs labeled samples");
        };
        let (phi, z) = clf.scores(&s.features)?;
        let f = clf.predict_from_scores(&z, ratio, LabelMode::Train(label))?;
        loss += w * (f.log_partition - (ratio * z[label] + clf.r) / (clf.r + 1.0));
        if f.argmax() == label {
            correct += 1;
        }
        let mut u = vec![0.0; phi.len()];
        for y in 0..c {
            let e = f.probs[y] - if y == label { 1.0 } else { 0.0 };
            axpy(w * e, &phi, theta.row_mut(y));
            axpy(e, clf.theta.row(y), &mut u);
        }
        if !features.is_empty() {
            features.add_scaled(w, &clf.features.backward(&s.features, &u)?);
        }
        upstream.push(u);
    }
    Ok(SourceGradient {
        theta,
        upstream,
        features,
        loss,
        correct,
    })
}
