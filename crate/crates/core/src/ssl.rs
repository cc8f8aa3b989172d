//! Consistency training: test-mode predictions on weakly augmented targets become
//! pseudo-labels for the training-mode predictions on strongly augmented copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationSpec, Dataset, Sample, Strength};
use crate::domain::DomainClassifier;
use crate::drl::{
    evaluate, Cycler, Engine, LabelMode, RatioMode, RobustClassifier, SourceGradient,
    StepHook, TrainConfig, Trained,
};
use crate::error::{config, contract, DrlError, Result};
use crate::features::FeatureGradient;
use crate::matrix::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Confidence a weak prediction must exceed to become a pseudo-label.
    pub threshold: f64,
    /// Unlabeled samples per step.
    pub unlabeled_batch: usize,
    pub loss_weight: f64,
    pub augmentation: AugmentationSpec,
    pub base: TrainConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            threshold: 0.95,
            unlabeled_batch: base.batch_size,
            loss_weight: 1.0,
            augmentation: AugmentationSpec::default(),
            base,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return config("threshold: must lie in (0, 1)");
        }
        if self.unlabeled_batch == 0 {
            return config("unlabeled_batch: must be >= 1");
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return config("loss_weight: must be >= 0");
        }
        self.augmentation.validate()?;
        self.base.validate()
    }
}

/// The argmax of each weak prediction whose confidence exceeds `threshold`.
pub fn pseudo_targets<P: AsRef<[f64]>>(weak: &[P], threshold: f64) -> Vec<Option<usize>> {
    weak.iter()
        .map(|p| {
            let p = p.as_ref();
            let c = crate::numeric::argmax(p);
            (p[c] > threshold).then_some(c)
        })
        .collect()
}

/// `(1/M) Σ_m 1[max p_w > τ] · (−log p_s[argmax p_w])`.
pub fn consistency_loss<P: AsRef<[f64]>, Q: AsRef<[f64]>>(weak: &[P], strong: &[Q], threshold: f64) -> Result<f64> {
    if weak.len() != strong.len() {
        return contract("weak and strong prediction lists differ in length");
    }
    if weak.is_empty() {
        return contract("consistency loss over an empty batch");
    }
    let total: f64 = pseudo_targets(weak, threshold)
        .into_iter()
        .zip(strong)
        .filter_map(|(c, s)| c.map(|c| -s.as_ref()[c].ln()))
        .sum();
    Ok(total / weak.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ConsistencyGradient {
    pub theta: Matrix,
    pub features: FeatureGradient,
    pub loss: f64,
    /// Number of terms that passed the threshold.
    pub active: usize,
}

/// Gradient of the consistency loss with respect to θ and the feature parameters, given
/// fixed pseudo-labels. Strong inputs are predicted in training mode with the pseudo-label,
/// so `∂(−log f_c)/∂z_y = (f_y − 1[y = c]) · R / (1 + r·1[y = c])`.
pub fn consistency_gradient(
    clf: &RobustClassifier,
    strong: &[&[f64]],
    pseudo: &[Option<usize>],
    ratios: &[f64],
) -> Result<ConsistencyGradient> {
    if strong.len() != pseudo.len() || strong.len() != ratios.len() {
        return contract("strong inputs, pseudo-labels and ratios differ in length");
    }
    if strong.is_empty() {
        return contract("consistency gradient over an empty batch");
    }
    let m = strong.len() as f64;
    let c = clf.class_count();
    let mut theta = Matrix::zeros(c, clf.theta.cols);
    let mut features = FeatureGradient::zeros_like(&clf.features);
    let mut loss = 0.0;
    let mut active = 0;
    for ((x, label), &ratio) in strong.iter().zip(pseudo).zip(ratios) {
        let Some(label) = *label else { continue };
        active += 1;
        let (phi, z) = clf.scores(x)?;
        let f = clf.predict_from_scores(&z, ratio, LabelMode::Train(label))?;
        loss += (f.log_partition - (ratio * z[label] + clf.r) / (clf.r + 1.0)) / m;
        let mut u = vec![0.0; phi.len()];
        for y in 0..c {
            let scale = if y == label { ratio / (1.0 + clf.r) } else { ratio };
            let e = (f.probs[y] - if y == label { 1.0 } else { 0.0 }) * scale;
            axpy(e / m, &phi, theta.row_mut(y));
            axpy(e, clf.theta.row(y), &mut u);
        }
        if !features.is_empty() {
            features.add_scaled(1.0 / m, &clf.features.backward(x, &u)?);
        }
    }
    Ok(ConsistencyGradient {
        theta,
        features,
        loss,
        active,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslRecord {
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub mask_rate: f64,
    pub target_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SslOutcome {
    pub trained: Trained,
    pub history: Vec<SslRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslOptions {
    pub r: f64,
    pub ratios: RatioMode,
}

impl SslOptions {
    pub fn robust(r: f64) -> Self {
        Self {
            r,
            ratios: RatioMode::Learned,
        }
    }

    /// Plain softmax confidences: ratio fixed at 1 and no class regularization.
    pub fn softmax() -> Self {
        Self {
            r: 0.0,
            ratios: RatioMode::Fixed(1.0),
        }
    }
}

struct Consistency<'a> {
    cfg: &'a SslConfig,
    ratios: RatioMode,
    unlabeled: &'a Dataset,
    eval_labels: Option<&'a [usize]>,
    cycle: Cycler,
    rng: ChaCha8Rng,
    sup: (f64, usize),
    unsup: (f64, usize),
    mask: (usize, usize),
    history: Vec<SslRecord>,
}

impl StepHook for Consistency<'_> {
    fn after_gradient(
        &mut self,
        clf: &RobustClassifier,
        dom: &DomainClassifier,
        grad: &mut SourceGradient,
    ) -> Result<()> {
        self.sup.0 += grad.loss;
        self.sup.1 += 1;
        if self.cfg.loss_weight == 0.0 {
            self.unsup.1 += 1;
            return Ok(());
        }
        let picks = self.cycle.take(self.cfg.unlabeled_batch, &mut self.rng);
        let spec = &self.cfg.augmentation;
        let mut weak = Vec::with_capacity(picks.len());
        let mut strong: Vec<Sample> = Vec::with_capacity(picks.len());
        for &i in &picks {
            let s = &self.unlabeled.samples()[i];
            let w = augment(s, spec, Strength::Weak, &mut self.rng);
            let ratio = self.ratios.ratio(clf, dom, &w.features)?;
            weak.push(clf.predict(&w.features, ratio, LabelMode::Test)?);
            strong.push(augment(s, spec, Strength::Strong, &mut self.rng));
        }
        let pseudo = pseudo_targets(&weak, self.cfg.threshold);
        let xs: Vec<&[f64]> = strong.iter().map(|s| s.features.as_slice()).collect();
        let ratios = xs
            .iter()
            .map(|x| self.ratios.ratio(clf, dom, x))
            .collect::<Result<Vec<_>>>()?;
        let g = consistency_gradient(clf, &xs, &pseudo, &ratios)?;
        if !g.loss.is_finite() {
            return Err(DrlError::Numeric("consistency loss diverged".into()));
        }
        grad.theta.add_scaled(self.cfg.loss_weight, &g.theta);
        if !grad.features.is_empty() {
            grad.features.add_scaled(self.cfg.loss_weight, &g.features);
        }
        self.unsup.0 += g.loss;
        self.unsup.1 += 1;
        self.mask.0 += g.active;
        self.mask.1 += picks.len();
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, clf: &RobustClassifier, dom: &DomainClassifier) -> Result<()> {
        let mean = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
        let target_acc = match self.eval_labels {
            Some(labels) => {
                let dom = (self.ratios == RatioMode::Learned).then_some(dom);
                let preds = evaluate(clf, dom, self.unlabeled)?.predictions;
                Some(crate::calibration::accuracy(&preds, labels)?)
            }
            None => None,
        };
        self.history.push(SslRecord {
            epoch,
            sup_loss: mean(self.sup),
            unsup_loss: mean(self.unsup),
            mask_rate: if self.mask.1 == 0 {
                0.0
            } else {
                self.mask.0 as f64 / self.mask.1 as f64
            },
            target_acc,
        });
        self.sup = (0.0, 0);
        self.unsup = (0.0, 0);
        self.mask = (0, 0);
        Ok(())
    }
}

/// Trains on the labeled set as [`crate::drl::train_end_to_end`] does, adding the weighted
/// consistency gradient of `cfg.unlabeled_batch` targets to every step. Augmentations and
/// unlabeled draws use their own random stream, so `loss_weight = 0` reproduces the
/// end-to-end run exactly.
pub fn run_drssl(
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &SslConfig,
    opts: SslOptions,
    mut clf: RobustClassifier,
    dom: DomainClassifier,
    eval_labels: Option<&[usize]>,
) -> Result<SslOutcome> {
    cfg.validate()?;
    if labeled.is_empty() || !labeled.is_labeled() {
        return contract("consistency training needs a non-empty labeled set");
    }
    if unlabeled.is_empty() {
        return contract("consistency training needs unlabeled samples");
    }
    let labels = labeled.labels().unwrap_or_default();
    for c in 0..labeled.class_count() {
        if !labels.contains(&c) {
            return contract(format!("class {c} has no labeled sample"));
        }
    }
    if let Some(l) = eval_labels {
        if l.len() != unlabeled.len() {
            return config("one evaluation label per unlabeled sample is required");
        }
    }
    if labeled.dim() != unlabeled.dim() || labeled.dim() != clf.features.in_dim() {
        return config("labeled, unlabeled and feature map dimensions disagree");
    }
    if !(0.0..=1.0).contains(&opts.r) {
        return config("r must lie in [0, 1]");
    }
    clf.r = opts.r;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.augmentation.seed);
    let cycle = Cycler::new(unlabeled.len(), &mut rng);
    let mut hook = Consistency {
        cfg,
        ratios: opts.ratios,
        unlabeled,
        eval_labels,
        cycle,
        rng,
        sup: (0.0, 0),
        unsup: (0.0, 0),
        mask: (0, 0),
        history: Vec::with_capacity(cfg.base.epochs),
    };
    let engine = Engine {
        labeled: labeled.samples().iter().collect(),
        dom_source: labeled.samples().iter().collect(),
        dom_target: unlabeled.samples().iter().collect(),
        ratios: opts.ratios,
    };
    let trained = engine.run_with(clf, dom, &cfg.base, &mut hook)?;
    Ok(SslOutcome {
        trained,
        history: hook.history,
    })
}
