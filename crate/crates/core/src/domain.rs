//! Binary domain classifier `τ(x; w_d)` and the density ratios it induces.
//!
//! The classifier emits one logit `z`; `τ_s = σ(z)` is the probability that `x` came from
//! the source domain. With equal source and target counts per batch the prior ratio is one,
//! so `P_s(x)/P_t(x) = τ_s/τ_t = e^z`, clamped to configured bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, Sample};
use crate::error::{config, contract, DrlError, Result};
use crate::features::{Activation, FeatureGradient, FeatureMap, FeatureKind};
use crate::matrix::{dot, Matrix};
use crate::numeric::{sigmoid, softplus_neg};
use crate::drl::Prediction;

pub const DEFAULT_RATIO_BOUNDS: RatioBounds = RatioBounds {
    min: 1e-3,
    max: 1e3,
};

/// Smallest `τ_t` accepted by [`drl_density_gradient`].
pub const MIN_TAU_T: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for RatioBounds {
    fn default() -> Self {
        DEFAULT_RATIO_BOUNDS
    }
}

impl RatioBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min <= 1.0 && max >= 1.0 && max.is_finite()) {
            return config(format!(
                "ratio bounds must satisfy 0 < min <= 1 <= max < inf, got [{min}, {max}]"
            ));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, r: f64) -> bool {
        (self.min..=self.max).contains(&r)
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub logit: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub ratio: f64,
    /// The raw ratio `τ_s/τ_t` fell outside the bounds.
    pub clamped: bool,
}

impl RatioEstimate {
    pub fn from_logit(logit: f64, bounds: RatioBounds) -> Self {
        // The smaller probability is computed directly and the larger as its complement,
        // which keeps both accurate and makes τ_s + τ_t == 1 exact.
        let (tau_s, tau_t) = if logit >= 0.0 {
            let t = sigmoid(-logit);
            (1.0 - t, t)
        } else {
            let s = sigmoid(logit);
            (s, 1.0 - s)
        };
        let raw = logit.exp();
        let ratio = bounds.clamp(raw);
        Self {
            logit,
            tau_s,
            tau_t,
            ratio,
            clamped: ratio != raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    net: FeatureMap,
    bounds: RatioBounds,
}

impl DomainClassifier {
    /// Wraps a scalar-output MLP.
    pub fn new(net: FeatureMap, bounds: RatioBounds) -> Result<Self> {
        if net.kind() != FeatureKind::Mlp || net.out_dim() != 1 {
            return config("the domain classifier needs an MLP with a single output");
        }
        Ok(Self { net, bounds })
    }

    /// Randomly initialised network with the given hidden widths (empty for logistic regression).
    pub fn mlp<R: Rng>(
        in_dim: usize,
        hidden: &[usize],
        activation: Activation,
        bounds: RatioBounds,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(FeatureMap::mlp(in_dim, hidden, 1, activation, rng)?, bounds)
    }

    /// Logistic regression with every parameter at zero (ratio 1 everywhere).
    pub fn zeros(in_dim: usize, bounds: RatioBounds) -> Self {
        let net = FeatureMap::from_layers(
            Activation::Tanh,
            vec![crate::features::Layer {
                weight: Matrix::zeros(1, in_dim),
                bias: vec![0.0],
            }],
        )
        .expect("a single layer always chains");
        Self { net, bounds }
    }

    pub fn net(&self) -> &FeatureMap {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeatureMap {
        &mut self.net
    }

    pub fn bounds(&self) -> RatioBounds {
        self.bounds
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.forward(x)?[0])
    }

    pub fn forward(&self, x: &[f64]) -> Result<RatioEstimate> {
        Ok(RatioEstimate::from_logit(self.logit(x)?, self.bounds))
    }

    /// Gradient of `dz · z(x)` with respect to the network parameters.
    pub fn logit_backward(&self, x: &[f64], dz: f64) -> Result<FeatureGradient> {
        self.net.backward(x, &[dz])
    }
}

/// Mean binary cross-entropy (source = positive class) and its parameter gradient.
#[derive(Debug, Clone)]
pub struct BceGradient {
    pub loss: f64,
    pub grad: FeatureGradient,
}

pub fn bce_loss(clf: &DomainClassifier, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return contract("BCE over an empty batch");
    }
    let mut total = 0.0;
    for s in batch {
        let z = clf.logit(&s.features)?;
        total += match s.domain {
            Domain::Source => softplus_neg(z),
            Domain::Target => softplus_neg(-z),
        };
    }
    Ok(total / batch.len() as f64)
}

pub fn bce_gradient(clf: &DomainClassifier, batch: &[&Sample]) -> Result<BceGradient> {
    if batch.is_empty() {
        return contract("BCE gradient over an empty batch");
    }
    let n = batch.len() as f64;
    let mut grad = FeatureGradient::zeros_like(&clf.net);
    let mut loss = 0.0;
    for s in batch {
        let z = clf.logit(&s.features)?;
        let is_source = s.domain == Domain::Source;
        loss += if is_source {
            softplus_neg(z)
        } else {
            softplus_neg(-z)
        };
        let dz = sigmoid(z) - if is_source { 1.0 } else { 0.0 };
        grad.add_scaled(1.0 / n, &clf.logit_backward(&s.features, dz)?);
    }
    Ok(BceGradient {
        loss: loss / n,
        grad,
    })
}

/// Derivatives of the target log-partition with respect to `(τ_s, τ_t)` at one point.
///
/// With `s = Σ_y f_y (θ_y · φ)`: `∂/∂τ_s = s/τ_t` and `∂/∂τ_t = -τ_s s/τ_t²`.
/// An active clamp blocks the gradient and yields `(0, 0)`.
pub fn drl_density_gradient(
    theta: &Matrix,
    phi_x: &[f64],
    f_x: &Prediction,
    est: &RatioEstimate,
) -> Result<(f64, f64)> {
    if theta.rows != f_x.probs.len() || theta.cols != phi_x.len() {
        return config("theta, phi and prediction dimensions disagree");
    }
    if est.clamped {
        return Ok((0.0, 0.0));
    }
    if est.tau_t < MIN_TAU_T {
        return Err(DrlError::Numeric(format!(
            "tau_t = {:e} is below the guard {MIN_TAU_T:e}",
            est.tau_t
        )));
    }
    let s: f64 = f_x
        .probs
        .iter()
        .enumerate()
        .map(|(y, fy)| fy * dot(theta.row(y), phi_x))
        .sum();
    Ok((s / est.tau_t, -est.tau_s * s / (est.tau_t * est.tau_t)))
}

/// Chains `(∂L/∂τ_s, ∂L/∂τ_t)` into the logit: `τ_s = σ(z)`, `τ_t = 1 - σ(z)`.
pub fn density_gradient_to_logit(est: &RatioEstimate, d_tau: (f64, f64)) -> f64 {
    (d_tau.0 - d_tau.1) * est.tau_s * est.tau_t
}
