//! Finite input spaces with exact source/target densities, used to check the
//! change-of-measure gradients by full enumeration.

use serde::{Deserialize, Serialize};

use super::{Domain, Sample};
use crate::domain::DomainClassifier;
use crate::drl::RobustClassifier;
use crate::error::{config, Result};
use crate::matrix::Matrix;

pub const MAX_DISCRETE_POINTS: usize = 64;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDomainSpec {
    points: Vec<Vec<f64>>,
    p_source: Vec<f64>,
    p_target: Vec<f64>,
    /// |X|×C row-stochastic `P(y | x)`.
    cond_label: Matrix,
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return config(format!("{what} has a negative or non-finite entry"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return config(format!("{what} sums to {sum}, not 1"));
    }
    Ok(())
}

impl DiscreteDomainSpec {
    pub fn new(
        points: Vec<Vec<f64>>,
        p_source: Vec<f64>,
        p_target: Vec<f64>,
        cond_label: Matrix,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 || n > MAX_DISCRETE_POINTS {
            return config(format!("a discrete domain needs 1..={MAX_DISCRETE_POINTS} points"));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return config("points must be finite and share one dimension");
        }
        if p_source.len() != n || p_target.len() != n || cond_label.rows != n {
            return config("probability vectors and P(y|x) need one entry per point");
        }
        check_simplex(&p_source, "p_source")?;
        check_simplex(&p_target, "p_target")?;
        for i in 0..n {
            check_simplex(cond_label.row(i), &format!("P(y|x) row {i}"))?;
        }
        Ok(Self {
            points,
            p_source,
            p_target,
            cond_label,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn p_source(&self) -> &[f64] {
        &self.p_source
    }

    pub fn p_target(&self) -> &[f64] {
        &self.p_target
    }

    pub fn cond_label(&self) -> &Matrix {
        &self.cond_label
    }

    pub fn class_count(&self) -> usize {
        self.cond_label.cols
    }

    /// `p_s(x)/p_t(x)` for every point.
    pub fn exact_ratios(&self) -> Result<Vec<f64>> {
        self.p_source
            .iter()
            .zip(&self.p_target)
            .enumerate()
            .map(|(i, (&ps, &pt))| {
                if pt > 0.0 {
                    Ok(ps / pt)
                } else {
                    config(format!("p_target is zero at point {i}"))
                }
            })
            .collect()
    }

    /// Every `(x, y)` with positive source mass, weighted by `p_s(x) P(y|x)`.
    pub fn source_distribution(&self) -> (Vec<Sample>, Vec<f64>) {
        let mut samples = Vec::new();
        let mut weights = Vec::new();
        for (i, x) in self.points.iter().enumerate() {
            for y in 0..self.class_count() {
                let w = self.p_source[i] * self.cond_label.get(i, y);
                if w > 0.0 {
                    samples.push(Sample::new(x.clone(), Some(y), Domain::Source));
                    weights.push(w);
                }
            }
        }
        (samples, weights)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum OracleRatios<'a> {
    /// `p_s/p_t` from the spec itself.
    Exact,
    /// Ratios from a domain classifier evaluated at each point.
    Domain(&'a DomainClassifier),
}

/// Exact expectations of the dual objective, enumerated over every point and class.
#[derive(Debug, Clone)]
pub struct OracleExpectations {
    pub dual_value: f64,
    pub grad_theta: Matrix,
    /// `(∂/∂τ_s, ∂/∂τ_t)` of the dual at each point; zero where a ratio is clamped.
    pub grad_ratio: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
}

/// `Σ_x p_t(x) log Z_θ(x) − Σ_y θ_y · c̃_y` with `c̃_y = Σ_x p_s(x) P(y|x) φ(x)`,
/// plus its gradients in θ and in the per-point densities.
///
/// Written with explicit index loops, independently of the batch code it checks.
#[allow(clippy::needless_range_loop)]
pub fn oracle_expectations(
    spec: &DiscreteDomainSpec,
    model: &RobustClassifier,
    ratios: OracleRatios<'_>,
) -> Result<OracleExpectations> {
    let c = spec.class_count();
    let m = model.features.out_dim();
    if model.theta.rows != c || model.theta.cols != m {
        return config("model theta does not match the domain's class count");
    }
    if spec.points[0].len() != model.features.in_dim() {
        return config("model input dimension does not match the domain's points");
    }

    // (R, τ_s, τ_t, clamped) per point.
    let taus: Vec<(f64, f64, f64, bool)> = match ratios {
        OracleRatios::Exact => spec
            .exact_ratios()?
            .into_iter()
            .map(|r| (r, r / (1.0 + r), 1.0 / (1.0 + r), false))
            .collect(),
        OracleRatios::Domain(dom) => spec
            .points
            .iter()
            .map(|x| {
                dom.forward(x)
                    .map(|e| (e.ratio, e.tau_s, e.tau_t, e.clamped))
            })
            .collect::<Result<_>>()?,
    };

    let temp = 1.0 + model.r;
    let mut dual_value = 0.0;
    let mut grad_theta = Matrix::zeros(c, m);
    let mut grad_ratio = Vec::with_capacity(spec.points.len());
    for (i, x) in spec.points.iter().enumerate() {
        let phi = model.features.forward(x)?;
        let (ratio, tau_s, tau_t, clamped) = taus[i];
        let mut z = vec![0.0; c];
        for (y, zy) in z.iter_mut().enumerate() {
            for j in 0..m {
                *zy += model.theta.get(y, j) * phi[j];
            }
        }
        let logits: Vec<f64> = z.iter().map(|zy| ratio * zy / temp).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mass: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let log_z = top + mass.ln() + model.r / temp;
        let f: Vec<f64> = logits.iter().map(|l| (l - top).exp() / mass).collect();

        let pt = spec.p_target[i];
        let ps = spec.p_source[i];
        dual_value += pt * log_z;
        let mut d_ratio = 0.0;
        for y in 0..c {
            let q = spec.cond_label.get(i, y);
            for j in 0..m {
                let v = grad_theta.get(y, j) + pt * f[y] * ratio * phi[j] / temp - ps * q * phi[j];
                grad_theta.set(y, j, v);
            }
            dual_value -= ps * q * (0..m).map(|j| model.theta.get(y, j) * phi[j]).sum::<f64>();
            d_ratio += pt * f[y] * z[y] / temp;
        }
        grad_ratio.push(if clamped {
            (0.0, 0.0)
        } else {
            (d_ratio / tau_t, -d_ratio * tau_s / (tau_t * tau_t))
        });
    }
    Ok(OracleExpectations {
        dual_value,
        grad_theta,
        grad_ratio,
        ratios: taus.iter().map(|t| t.0).collect(),
    })
}
