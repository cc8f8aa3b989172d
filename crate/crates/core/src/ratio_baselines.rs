//! Plug-in density ratios from Gaussian kernel density estimates, and the bandwidth
//! simulation contrasting density-fit quality with downstream robust-prediction quality.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_gaussian_shift, Dataset, GaussianShiftSpec, Sample};
use crate::domain::RatioBounds;
use crate::drl::{grad_source, LabelMode, Prediction, RobustClassifier};
use crate::error::{config, contract, Result};
use crate::features::FeatureMap;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Isotropic Gaussian KDE with bandwidth `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    points: Vec<Vec<f64>>,
    bandwidth: f64,
    dim: usize,
}

impl KdeModel {
    pub fn new(points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return config(format!("bandwidth must be positive, got {bandwidth}"));
        }
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return config("KDE points must be finite and share one dimension");
        }
        Ok(Self {
            points,
            bandwidth,
            dim,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `log (1/n) Σ_i N(x; x_i, h² I)`.
    ///
    /// Kernel exponents are sorted before the log-sum-exp, so the result does not depend
    /// on the order of the training points.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if self.points.is_empty() {
            return contract("KDE has no points");
        }
        if x.len() != self.dim {
            return config(format!("query has dimension {}, KDE has {}", x.len(), self.dim));
        }
        let h2 = self.bandwidth * self.bandwidth;
        let mut exps: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * d2 / h2
            })
            .collect();
        exps.sort_by(f64::total_cmp);
        let max = *exps.last().expect("non-empty");
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        let log_norm = -0.5 * self.dim as f64 * (LN_2PI + h2.ln());
        Ok(max + sum.ln() - (self.points.len() as f64).ln() + log_norm)
    }
}

/// `clamp(p̂_s(x) / p̂_t(x))`
pub fn plugin_ratio(source: &KdeModel, target: &KdeModel, x: &[f64], bounds: RatioBounds) -> Result<f64> {
    let log_r = source.log_density(x)? - target.log_density(x)?;
    Ok(bounds.clamp(log_r.exp()))
}

/// Objective whose gradient is the uniformly weighted source gradient (plus ridge):
/// `(1/N) Σ_i [log Z(R_i z_i)/R_i − z_{i,y_i}] + ridge/2 ‖θ‖²`.
fn frozen_objective(clf: &RobustClassifier, batch: &[&Sample], ratios: &[f64], ridge: f64) -> Result<f64> {
    let mut total = 0.0;
    for (s, &r) in batch.iter().zip(ratios) {
        let y = s.label.expect("checked by caller");
        let (_, z) = clf.scores(&s.features)?;
        let p = clf.predict_from_scores(&z, r, LabelMode::Train(y))?;
        total += p.log_partition / r - z[y];
    }
    let norm2: f64 = clf.theta.data.iter().map(|v| v * v).sum();
    Ok(total / batch.len() as f64 + 0.5 * ridge * norm2)
}

/// Fits θ for fixed features and fixed per-sample ratios with damped Newton steps.
/// `r` must be zero; the objective is then convex.
pub fn fit_frozen_robust(
    mut clf: RobustClassifier,
    batch: &[&Sample],
    ratios: &[f64],
    ridge: f64,
) -> Result<RobustClassifier> {
    if clf.r != 0.0 {
        return config("frozen-feature fitting supports r = 0 only");
    }
    if batch.is_empty() || batch.len() != ratios.len() {
        return contract("one ratio per labeled sample is required");
    }
    if batch.iter().any(|s| s.label.is_none()) {
        return contract("frozen-feature fitting needs labeled samples");
    }
    let (c, m) = (clf.theta.rows, clf.theta.cols);
    let p = c * m;
    let n = batch.len() as f64;
    let phis: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| clf.features.forward(&s.features))
        .collect::<Result<_>>()?;
    let mut value = frozen_objective(&clf, batch, ratios, ridge)?;
    for _ in 0..200 {
        let g = grad_source(&clf, batch, ratios)?;
        let grad = DVector::from_fn(p, |k, _| g.theta.data[k] + ridge * clf.theta.data[k]);
        if grad.amax() < 1e-10 {
            break;
        }
        let mut hess = DMatrix::<f64>::identity(p, p) * ridge;
        for ((s, &r), phi) in batch.iter().zip(ratios).zip(&phis) {
            let z = clf.scores_from_features(phi);
            let f = clf.predict_from_scores(&z, r, LabelMode::Train(s.label.unwrap()))?;
            for y in 0..c {
                for y2 in 0..c {
                    let cov = f.probs[y] * (if y == y2 { 1.0 } else { 0.0 } - f.probs[y2]);
                    let w = r * cov / n;
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        for k in 0..m {
                            hess[(y * m + j, y2 * m + k)] += w * phi[j] * phi[k];
                        }
                    }
                }
            }
        }
        let Some(chol) = hess.cholesky() else {
            return Err(crate::DrlError::Numeric("Newton Hessian is not positive definite".into()));
        };
        let dir = chol.solve(&grad);
        let mut t = 1.0;
        let base = clf.theta.clone();
        let mut improved = false;
        for _ in 0..60 {
            for k in 0..p {
                clf.theta.data[k] = base.data[k] - t * dir[k];
            }
            let v = frozen_objective(&clf, batch, ratios, ridge)?;
            if v <= value - 1e-4 * t * grad.dot(&dir) {
                value = v;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            clf.theta = base;
            break;
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginRow {
    pub h: f64,
    /// Mean held-out log-likelihood of source data under the source KDE.
    pub ll_source: f64,
    pub ll_target: f64,
    /// Mean negative log-likelihood of the true target labels under the plug-in robust predictor.
    pub target_logloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginOptions {
    /// Fraction of each domain used to fit the KDE; the rest scores log-likelihood.
    pub train_fraction: f64,
    pub ridge: f64,
    pub bounds: RatioBounds,
}

impl Default for PluginOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            ridge: 1e-3,
            bounds: RatioBounds::default(),
        }
    }
}

/// Table rows plus the plug-in predictor's target predictions for every bandwidth.
#[derive(Debug, Clone)]
pub struct PluginRun {
    pub rows: Vec<PluginRow>,
    pub predictions: Vec<Vec<Prediction>>,
    pub ratios: Vec<Vec<f64>>,
    pub target: Dataset,
}

/// One table row per bandwidth. The classifier uses bias-augmented raw inputs.
pub fn run_plugin_simulation(
    spec: &GaussianShiftSpec,
    bandwidths: &[f64],
    opts: &PluginOptions,
) -> Result<Vec<PluginRow>> {
    Ok(run_plugin_detailed(spec, bandwidths, opts)?.rows)
}

/// [`run_plugin_simulation`] keeping the per-bandwidth target predictions.
pub fn run_plugin_detailed(
    spec: &GaussianShiftSpec,
    bandwidths: &[f64],
    opts: &PluginOptions,
) -> Result<PluginRun> {
    if bandwidths.is_empty() {
        return contract("at least one bandwidth is required");
    }
    let data = generate_gaussian_shift(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    let (src_fit, src_held) = data.source.split(opts.train_fraction, &mut rng);
    let (tgt_fit, tgt_held) = data.target.split(opts.train_fraction, &mut rng);
    let points = |d: &crate::data::Dataset| d.samples().iter().map(|s| s.features.clone()).collect::<Vec<_>>();
    let target_labels = data.target.labels().expect("generator labels every sample");

    let mut rows = Vec::with_capacity(bandwidths.len());
    let mut predictions = Vec::with_capacity(bandwidths.len());
    let mut all_ratios = Vec::with_capacity(bandwidths.len());
    for &h in bandwidths {
        let kde_s = KdeModel::new(points(&src_fit), h)?;
        let kde_t = KdeModel::new(points(&tgt_fit), h)?;
        let mean_ll = |kde: &KdeModel, held: &crate::data::Dataset| -> Result<f64> {
            let mut total = 0.0;
            for s in held.samples() {
                total += kde.log_density(&s.features)?;
            }
            Ok(total / held.len() as f64)
        };
        let ll_source = mean_ll(&kde_s, &src_held)?;
        let ll_target = mean_ll(&kde_t, &tgt_held)?;

        let batch: Vec<&Sample> = src_fit.samples().iter().collect();
        let ratios = batch
            .iter()
            .map(|s| plugin_ratio(&kde_s, &kde_t, &s.features, opts.bounds))
            .collect::<Result<Vec<_>>>()?;
        let clf = RobustClassifier::zeros(2, FeatureMap::bias_augmented(spec.dim()), 0.0, opts.bounds)?;
        let clf = fit_frozen_robust(clf, &batch, &ratios, opts.ridge)?;

        let mut logloss = 0.0;
        let mut preds = Vec::with_capacity(data.target.len());
        let mut ratios = Vec::with_capacity(data.target.len());
        for (s, &y) in data.target.samples().iter().zip(&target_labels) {
            let r = plugin_ratio(&kde_s, &kde_t, &s.features, opts.bounds)?;
            let p = clf.predict(&s.features, r, LabelMode::Test)?;
            logloss -= p.probs[y].max(f64::MIN_POSITIVE).ln();
            preds.push(p);
            ratios.push(r);
        }
        rows.push(PluginRow {
            h,
            ll_source,
            ll_target,
            target_logloss: logloss / target_labels.len() as f64,
        });
        predictions.push(preds);
        all_ratios.push(ratios);
    }
    Ok(PluginRun {
        rows,
        predictions,
        ratios: all_ratios,
        target: data.target,
    })
}

/// Rows as CSV with header `h,ll_source,ll_target,target_logloss`.
pub fn plugin_csv(rows: &[PluginRow]) -> String {
    let mut out = String::from("h,ll_source,ll_target,target_logloss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.h, r.ll_source, r.ll_target, r.target_logloss
        ));
    }
    out
}
