use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::domain::{
    bce_gradient, bce_loss, density_gradient_to_logit, drl_density_gradient, DomainClassifier,
};
use crate::error::{config, contract, DrlError, Result};
use crate::features::FeatureGradient;
use crate::matrix::Matrix;

use super::objective::{dual_objective, grad_source, FeatureConstraint, SourceGradient};
use super::robust::{LabelMode, Prediction, RobustClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Plain SGD step for the domain classifier.
    pub lr_domain: f64,
    /// Momentum-SGD step for θ and the feature network.
    pub lr_model: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The domain classifier is updated on every k-th batch.
    pub domain_update_period: usize,
    /// L2 penalty on θ and feature weights.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_domain: 0.01,
            lr_model: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            domain_update_period: 5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Returns the first offending field name with the reason.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| config(format!("{field}: {why}"));
        if !(self.lr_domain > 0.0 && self.lr_domain.is_finite()) {
            return bad("lr_domain", "must be > 0");
        }
        if !(self.lr_model > 0.0 && self.lr_model.is_finite()) {
            return bad("lr_model", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.domain_update_period == 0 {
            return bad("domain_update_period", "must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dual_objective: f64,
    pub bce_loss: f64,
    pub source_loss: f64,
    pub source_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub clf: RobustClassifier,
    pub dom: DomainClassifier,
    pub history: Vec<EpochRecord>,
}

/// Test-mode predictions with the ratio each one used.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub ratios: Vec<f64>,
}

/// Predicts every sample of `data` in test mode, with ratios from `dom` (or 1 without one).
pub fn evaluate(clf: &RobustClassifier, dom: Option<&DomainClassifier>, data: &Dataset) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut ratios = Vec::with_capacity(data.len());
    for s in data.samples() {
        let ratio = match dom {
            Some(d) => clf.bounds.clamp(d.forward(&s.features)?.ratio),
            None => 1.0,
        };
        predictions.push(clf.predict(&s.features, ratio, LabelMode::Test)?);
        ratios.push(ratio);
    }
    Ok(Evaluation {
        predictions,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioMode {
    /// Ratios come from the domain classifier, which is trained alongside.
    Learned,
    /// Every ratio is this constant and the domain classifier is left untouched.
    Fixed(f64),
}

impl RatioMode {
    pub fn ratio(self, clf: &RobustClassifier, dom: &DomainClassifier, x: &[f64]) -> Result<f64> {
        match self {
            RatioMode::Learned => Ok(clf.bounds.clamp(dom.forward(x)?.ratio)),
            RatioMode::Fixed(r) => Ok(r),
        }
    }
}

/// Momentum-SGD state for θ and the feature network.
pub(crate) struct Momentum {
    theta: Matrix,
    features: FeatureGradient,
}

impl Momentum {
    pub(crate) fn new(clf: &RobustClassifier) -> Self {
        Self {
            theta: Matrix::zeros(clf.theta.rows, clf.theta.cols),
            features: FeatureGradient::zeros_like(&clf.features),
        }
    }

    /// Adds weight decay, updates the velocity and steps the parameters.
    pub(crate) fn step(
        &mut self,
        clf: &mut RobustClassifier,
        grad_theta: &Matrix,
        grad_features: &FeatureGradient,
        cfg: &TrainConfig,
    ) {
        self.theta.scale(cfg.momentum);
        self.theta.add_scaled(1.0, grad_theta);
        self.theta.add_scaled(cfg.weight_decay, &clf.theta);
        clf.theta.add_scaled(-cfg.lr_model, &self.theta);

        if !self.features.is_empty() {
            self.features.scale(cfg.momentum);
            self.features.add_scaled(1.0, grad_features);
            self.features
                .add_scaled(1.0, &clf.features.weight_decay_gradient(cfg.weight_decay));
            clf.features.apply_step(cfg.lr_model, &self.features);
        }
    }
}

/// One SGD step on the domain classifier using the BCE gradient plus the density gradient
/// of the target log-partition. Returns the batch BCE loss.
pub(crate) fn domain_step(
    dom: &mut DomainClassifier,
    clf: &RobustClassifier,
    source: &[&Sample],
    target: &[&Sample],
    lr: f64,
) -> Result<f64> {
    let batch: Vec<&Sample> = source.iter().chain(target).copied().collect();
    let bce = bce_gradient(dom, &batch)?;
    let mut grad = bce.grad;
    let n_t = target.len() as f64;
    for s in target {
        let est = dom.forward(&s.features)?;
        if est.clamped {
            continue;
        }
        let (phi, z) = clf.scores(&s.features)?;
        let f = clf.predict_from_scores(&z, clf.bounds.clamp(est.ratio), LabelMode::Test)?;
        let d_tau = drl_density_gradient(&clf.theta, &phi, &f, &est)?;
        // Test-mode logits carry R/(1+r); the density formula is stated for r = 0.
        let dz = density_gradient_to_logit(&est, d_tau) / (1.0 + clf.r);
        grad.add_scaled(1.0 / n_t, &dom.logit_backward(&s.features, dz)?);
    }
    if !grad.is_finite() {
        return Err(DrlError::Numeric("domain classifier gradient is not finite".into()));
    }
    dom.net_mut().apply_step(lr, &grad);
    Ok(bce.loss)
}

/// Cycles through a shuffled index order, reshuffling after each full pass.
pub(crate) struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub(crate) fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub(crate) fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Extra work plugged into the minibatch loop.
pub(crate) trait StepHook {
    /// Called with the supervised gradient of each batch before the parameter step.
    fn after_gradient(
        &mut self,
        _clf: &RobustClassifier,
        _dom: &DomainClassifier,
        _grad: &mut SourceGradient,
    ) -> Result<()> {
        Ok(())
    }

    fn end_epoch(&mut self, _epoch: usize, _clf: &RobustClassifier, _dom: &DomainClassifier) -> Result<()> {
        Ok(())
    }
}

impl StepHook for () {}

/// The shared minibatch loop. `labeled` feeds the classifier; `dom_source` and
/// `dom_target` feed the domain classifier.
pub(crate) struct Engine<'a> {
    pub labeled: Vec<&'a Sample>,
    pub dom_source: Vec<&'a Sample>,
    pub dom_target: Vec<&'a Sample>,
    pub ratios: RatioMode,
}

impl Engine<'_> {
    pub(crate) fn run(&self, clf: RobustClassifier, dom: DomainClassifier, cfg: &TrainConfig) -> Result<Trained> {
        self.run_with(clf, dom, cfg, &mut ())
    }

    pub(crate) fn run_with(
        &self,
        mut clf: RobustClassifier,
        mut dom: DomainClassifier,
        cfg: &TrainConfig,
        hook: &mut dyn StepHook,
    ) -> Result<Trained> {
        cfg.validate()?;
        if self.labeled.is_empty() {
            return contract("training needs labeled samples");
        }
        let learned = self.ratios == RatioMode::Learned;
        if learned && (self.dom_source.is_empty() || self.dom_target.is_empty()) {
            return contract("ratio learning needs both source and target samples");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut src_cycle = Cycler::new(self.dom_source.len(), &mut rng);
        let mut tgt_cycle = Cycler::new(self.dom_target.len(), &mut rng);
        let mut momentum = Momentum::new(&clf);
        let mut order: Vec<usize> = (0..self.labeled.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if learned && step.is_multiple_of(cfg.domain_update_period) {
                    let n = chunk.len();
                    let src: Vec<&Sample> = src_cycle
                        .take(n, &mut rng)
                        .into_iter()
                        .map(|i| self.dom_source[i])
                        .collect();
                    let tgt: Vec<&Sample> = tgt_cycle
                        .take(n, &mut rng)
                        .into_iter()
                        .map(|i| self.dom_target[i])
                        .collect();
                    let loss = domain_step(&mut dom, &clf, &src, &tgt, cfg.lr_domain)?;
                    if !loss.is_finite() || !dom.net().is_finite() {
                        return Err(diverged(epoch, step, "domain classifier", loss));
                    }
                }

                let batch: Vec<&Sample> = chunk.iter().map(|&i| self.labeled[i]).collect();
                let ratios = batch
                    .iter()
                    .map(|s| self.ratios.ratio(&clf, &dom, &s.features))
                    .collect::<Result<Vec<_>>>()?;
                let mut g = grad_source(&clf, &batch, &ratios)?;
                hook.after_gradient(&clf, &dom, &mut g)?;
                if !g.loss.is_finite() || !g.theta.is_finite() || !g.features.is_finite() {
                    return Err(diverged(epoch, step, "classifier", g.loss));
                }
                momentum.step(&mut clf, &g.theta, &g.features, cfg);
                if !clf.is_finite() {
                    return Err(diverged(epoch, step, "classifier parameters", g.loss));
                }
                step += 1;
            }
            history.push(self.epoch_record(epoch, &clf, &dom)?);
            hook.end_epoch(epoch, &clf, &dom)?;
        }
        Ok(Trained { clf, dom, history })
    }

    fn epoch_record(
        &self,
        epoch: usize,
        clf: &RobustClassifier,
        dom: &DomainClassifier,
    ) -> Result<EpochRecord> {
        let ratios = self
            .labeled
            .iter()
            .map(|s| self.ratios.ratio(clf, dom, &s.features))
            .collect::<Result<Vec<_>>>()?;
        let g = grad_source(clf, &self.labeled, &ratios)?;
        let constraint = FeatureConstraint::from_samples(&clf.features, clf.class_count(), &self.labeled)?;
        let target_pool = if self.dom_target.is_empty() {
            &self.labeled
        } else {
            &self.dom_target
        };
        let xs: Vec<&[f64]> = target_pool.iter().map(|s| s.features.as_slice()).collect();
        let t_ratios = target_pool
            .iter()
            .map(|s| self.ratios.ratio(clf, dom, &s.features))
            .collect::<Result<Vec<_>>>()?;
        let dual = dual_objective(clf, &xs, &t_ratios, &constraint)?;
        let bce = if self.dom_source.is_empty() || self.dom_target.is_empty() {
            std::f64::consts::LN_2
        } else {
            let all: Vec<&Sample> = self.dom_source.iter().chain(&self.dom_target).copied().collect();
            bce_loss(dom, &all)?
        };
        if !dual.is_finite() || !bce.is_finite() {
            return Err(diverged(epoch, usize::MAX, "epoch summary", dual));
        }
        Ok(EpochRecord {
            epoch,
            dual_objective: dual,
            bce_loss: bce,
            source_loss: g.loss,
            source_accuracy: g.correct as f64 / self.labeled.len() as f64,
        })
    }
}

fn diverged(epoch: usize, step: usize, what: &str, loss: f64) -> DrlError {
    DrlError::Numeric(format!(
        "training diverged in the {what} at epoch {epoch}, step {step} (loss {loss})"
    ))
}

fn check_pair(source: &Dataset, target: &Dataset, clf: &RobustClassifier, dom: &DomainClassifier) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return contract("source and target must be non-empty");
    }
    if !source.is_labeled() {
        return contract("the source dataset must be labeled");
    }
    if source.dim() != target.dim()
        || source.dim() != clf.features.in_dim()
        || source.dim() != dom.in_dim()
    {
        return config("source, target, feature map and domain classifier dimensions disagree");
    }
    if source.class_count() > clf.class_count() {
        return config("the source has more classes than the classifier");
    }
    Ok(())
}

/// Jointly trains the robust classifier and the domain classifier.
pub fn train_end_to_end(
    source: &Dataset,
    target: &Dataset,
    clf: RobustClassifier,
    dom: DomainClassifier,
    cfg: &TrainConfig,
) -> Result<Trained> {
    check_pair(source, target, &clf, &dom)?;
    let engine = Engine {
        labeled: source.samples().iter().collect(),
        dom_source: source.samples().iter().collect(),
        dom_target: target.samples().iter().collect(),
        ratios: RatioMode::Learned,
    };
    engine.run(clf, dom, cfg)
}

/// Source-only softmax baseline: ratio fixed at 1 and `r` forced to 0.
/// The returned domain classifier is all-zero, so it reports ratio 1 everywhere.
pub fn train_erm(source: &Dataset, mut clf: RobustClassifier, cfg: &TrainConfig) -> Result<Trained> {
    if source.is_empty() || !source.is_labeled() {
        return contract("ERM needs a non-empty labeled source");
    }
    if source.dim() != clf.features.in_dim() {
        return config("source and feature map dimensions disagree");
    }
    clf.r = 0.0;
    let dom = DomainClassifier::zeros(source.dim(), clf.bounds);
    let engine = Engine {
        labeled: source.samples().iter().collect(),
        dom_source: Vec::new(),
        dom_target: Vec::new(),
        ratios: RatioMode::Fixed(1.0),
    };
    engine.run(clf, dom, cfg)
}
