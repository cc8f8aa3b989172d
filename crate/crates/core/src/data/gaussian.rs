use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Sample};
use crate::error::{config, Result};
use crate::matrix::dot;
use crate::numeric::sigmoid;

/// Two Gaussian input distributions sharing one logistic labeling rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianShiftSpec {
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub source_cov: Vec<Vec<f64>>,
    pub target_cov: Vec<Vec<f64>>,
    pub boundary_weights: Vec<f64>,
    pub boundary_bias: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl Default for GaussianShiftSpec {
    fn default() -> Self {
        Self {
            source_mean: vec![-1.0, -1.0],
            target_mean: vec![1.5, 1.5],
            source_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            target_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            boundary_weights: vec![1.0, -1.0],
            boundary_bias: 0.0,
            n_source: 500,
            n_target: 500,
            seed: 0,
        }
    }
}

impl GaussianShiftSpec {
    pub fn dim(&self) -> usize {
        self.source_mean.len()
    }

    /// Same spec with source and target roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            source_mean: self.target_mean.clone(),
            target_mean: self.source_mean.clone(),
            source_cov: self.target_cov.clone(),
            target_cov: self.source_cov.clone(),
            n_source: self.n_target,
            n_target: self.n_source,
            ..self.clone()
        }
    }

    /// `P(y = 1 | x)` under the shared boundary.
    pub fn label_probability(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.boundary_weights, x) + self.boundary_bias)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return config("source_mean must be non-empty");
        }
        if self.target_mean.len() != d || self.boundary_weights.len() != d {
            return config("target_mean and boundary_weights must match source_mean's dimension");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.source_mean)
            || !finite(&self.target_mean)
            || !finite(&self.boundary_weights)
            || !self.boundary_bias.is_finite()
        {
            return config("Gaussian parameters must be finite");
        }
        Gaussian::new(&self.source_mean, &self.source_cov, "source_cov")?;
        Gaussian::new(&self.target_mean, &self.target_cov, "target_cov")?;
        Ok(())
    }
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: &[f64], cov: &[Vec<f64>], what: &str) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return config(format!("{what} must be {d}x{d}"));
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
            return config(format!("{what} is not symmetric"));
        }
        let Some(chol) = m.cholesky() else {
            return config(format!("{what} is not positive definite"));
        };
        let l = chol.unpack();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            chol: l,
            log_norm,
        })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        (&self.mean + &self.chol * z).iter().copied().collect()
    }
}

/// Closed-form `N(x; source) / N(x; target)`.
#[derive(Debug, Clone)]
pub struct TrueRatio {
    source: Gaussian,
    target: Gaussian,
}

impl TrueRatio {
    pub fn log_ratio(&self, x: &[f64]) -> f64 {
        self.source.log_density(x) - self.target.log_density(x)
    }

    pub fn ratio(&self, x: &[f64]) -> f64 {
        self.log_ratio(x).exp()
    }
}

/// Generated source/target data. `target` keeps its labels for evaluation only;
/// hand trainers `target.without_labels()`.
#[derive(Debug, Clone)]
pub struct ShiftData {
    pub source: Dataset,
    pub target: Dataset,
    pub true_ratio: TrueRatio,
}

pub fn generate_gaussian_shift(spec: &GaussianShiftSpec) -> Result<ShiftData> {
    spec.validate()?;
    let source_g = Gaussian::new(&spec.source_mean, &spec.source_cov, "source_cov")?;
    let target_g = Gaussian::new(&spec.target_mean, &spec.target_cov, "target_cov")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let draw = |g: &Gaussian, n: usize, domain: Domain, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| {
                let x = g.sample(rng);
                let p = spec.label_probability(&x);
                let y = Bernoulli::new(p).expect("sigmoid is in [0, 1]").sample(rng);
                Sample::new(x, Some(usize::from(y)), domain)
            })
            .collect::<Vec<_>>()
    };
    let source = draw(&source_g, spec.n_source, Domain::Source, &mut rng);
    let target = draw(&target_g, spec.n_target, Domain::Target, &mut rng);
    let d = spec.dim();
    Ok(ShiftData {
        source: Dataset::new("source", 2, d, source)?,
        target: Dataset::new("target", 2, d, target)?,
        true_ratio: TrueRatio {
            source: source_g,
            target: target_g,
        },
    })
}
