//! Model construction, seed derivation and the seeded benchmark pipelines shared by the
//! command-line runner and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_temperature, CalibrationReport, DEFAULT_BINS};
use crate::data::{generate_gaussian_shift, Dataset, GaussianShiftSpec, ShiftData};
use crate::domain::{DomainClassifier, RatioBounds};
use crate::drl::{
    evaluate, train_end_to_end, train_erm, LabelMode, Prediction, RatioMode, RobustClassifier,
    TrainConfig,
};
use crate::error::{config, Result};
use crate::features::{Activation, FeatureKind, FeatureMap};
use crate::numeric::softmax;
use crate::selftrain::{run_drst, DrstOptions, SelfTrainSchedule};
use crate::ssl::{run_drssl, SslConfig, SslOptions};

/// Architecture of the robust classifier and its domain classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub features: FeatureKind,
    pub hidden: Vec<usize>,
    /// Output width of an MLP feature map.
    pub feature_dim: usize,
    pub activation: Activation,
    pub domain_hidden: Vec<usize>,
    pub r: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let bounds = RatioBounds::default();
        Self {
            features: FeatureKind::Mlp,
            hidden: vec![16],
            feature_dim: 16,
            activation: Activation::Tanh,
            domain_hidden: vec![16],
            r: 0.1,
            ratio_min: bounds.min,
            ratio_max: bounds.max,
        }
    }
}

impl ModelSpec {
    pub fn bounds(&self) -> Result<RatioBounds> {
        RatioBounds::new(self.ratio_min, self.ratio_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return config("r: must lie in [0, 1]");
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) || self.domain_hidden.contains(&0) {
            return config("layer widths must be >= 1");
        }
        self.bounds().map(|_| ())
    }

    /// Fresh classifier and domain classifier with weights drawn from `seed`.
    pub fn build(&self, in_dim: usize, class_count: usize, seed: u64) -> Result<(RobustClassifier, DomainClassifier)> {
        self.validate()?;
        let bounds = self.bounds()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = match self.features {
            FeatureKind::Identity => FeatureMap::identity(in_dim),
            FeatureKind::BiasAugmented => FeatureMap::bias_augmented(in_dim),
            FeatureKind::Mlp => {
                FeatureMap::mlp(in_dim, &self.hidden, self.feature_dim, self.activation, &mut rng)?
            }
        };
        let clf = RobustClassifier::zeros(class_count, features, self.r, bounds)?;
        let dom = DomainClassifier::mlp(in_dim, &self.domain_hidden, self.activation, bounds, &mut rng)?;
        Ok((clf, dom))
    }
}

/// Seeds derived from one top-level seed by fixed offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub split: u64,
    pub augment: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed.wrapping_add(1_000),
            shuffle: seed.wrapping_add(2_000),
            split: seed.wrapping_add(3_000),
            augment: seed.wrapping_add(4_000),
        }
    }
}

/// Test-mode predictions of a model on `data` under a ratio mode.
pub fn predict_dataset(
    clf: &RobustClassifier,
    dom: &DomainClassifier,
    mode: RatioMode,
    data: &Dataset,
) -> Result<(Vec<Prediction>, Vec<f64>)> {
    match mode {
        RatioMode::Learned => {
            let e = evaluate(clf, Some(dom), data)?;
            Ok((e.predictions, e.ratios))
        }
        RatioMode::Fixed(ratio) => {
            let preds = data
                .samples()
                .iter()
                .map(|s| clf.predict(&s.features, ratio, LabelMode::Test))
                .collect::<Result<Vec<_>>>()?;
            Ok((preds, vec![ratio; data.len()]))
        }
    }
}

/// Softmax predictions of raw scores divided by a temperature.
pub fn temperature_predictions(clf: &RobustClassifier, data: &Dataset, t: f64) -> Result<Vec<Prediction>> {
    data.samples()
        .iter()
        .map(|s| {
            let (_, z) = clf.scores(&s.features)?;
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            let probs = softmax(&scaled);
            Ok(Prediction {
                probs,
                log_partition: 0.0,
            })
        })
        .collect()
}

pub fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.labels()
        .ok_or_else(|| crate::DrlError::Contract(format!("dataset {} has no labels", data.name())))
}

fn generate(shift: &GaussianShiftSpec, seeds: SeedPlan) -> Result<ShiftData> {
    generate_gaussian_shift(&GaussianShiftSpec {
        seed: seeds.data,
        ..shift.clone()
    })
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// Target predictions of source-only ERM, temperature-scaled ERM and end-to-end DRL.
#[derive(Debug, Clone)]
pub struct CalibrationComparison {
    pub erm: Vec<Prediction>,
    pub ts: Vec<Prediction>,
    pub drl: Vec<Prediction>,
    pub drl_ratios: Vec<f64>,
    pub temperature: f64,
    pub drl_model: crate::drl::Trained,
}

/// All three models train on `fit`; the temperature is fit on the labeled `held` split.
/// `target` may be unlabeled: it is only predicted and, for DRL, used for ratio learning.
pub fn compare_calibration(
    fit: &Dataset,
    held: &Dataset,
    target: &Dataset,
    model: &ModelSpec,
    train: &TrainConfig,
    init_seed: u64,
) -> Result<CalibrationComparison> {
    let unlabeled = target.without_labels();
    let (clf, dom) = model.build(fit.dim(), fit.class_count(), init_seed)?;
    let erm = train_erm(fit, clf.clone(), train)?;
    let drl = train_end_to_end(fit, &unlabeled, clf, dom, train)?;

    let held_logits = held
        .samples()
        .iter()
        .map(|s| clf_scores(&erm.clf, &s.features))
        .collect::<Result<Vec<_>>>()?;
    let temperature = fit_temperature(&held_logits, &labels_of(held)?)?;

    let (erm_preds, _) = predict_dataset(&erm.clf, &erm.dom, RatioMode::Fixed(1.0), target)?;
    let ts = temperature_predictions(&erm.clf, target, temperature)?;
    let (drl_preds, drl_ratios) = predict_dataset(&drl.clf, &drl.dom, RatioMode::Learned, target)?;
    Ok(CalibrationComparison {
        erm: erm_preds,
        ts,
        drl: drl_preds,
        drl_ratios,
        temperature,
        drl_model: drl,
    })
}

/// Calibration reports of ERM, temperature-scaled ERM and DRL on the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBenchmark {
    pub erm: CalibrationReport,
    pub ts: CalibrationReport,
    pub drl: CalibrationReport,
    pub temperature: f64,
}

/// [`compare_calibration`] on a generated shift with an 80/20 source split.
pub fn calibration_benchmark(
    shift: &GaussianShiftSpec,
    model: &ModelSpec,
    train: &TrainConfig,
    seed: u64,
) -> Result<CalibrationBenchmark> {
    let seeds = SeedPlan::new(seed);
    let data = generate(shift, seeds)?;
    let (fit, held) = data.source.split(0.8, &mut ChaCha8Rng::seed_from_u64(seeds.split));
    let labels = labels_of(&data.target)?;
    let cfg = with_seed(train, seeds.shuffle);
    let c = compare_calibration(&fit, &held, &data.target, model, &cfg, seeds.init)?;
    Ok(CalibrationBenchmark {
        erm: CalibrationReport::evaluate(&c.erm, &labels, DEFAULT_BINS)?,
        ts: CalibrationReport::evaluate(&c.ts, &labels, DEFAULT_BINS)?,
        drl: CalibrationReport::evaluate(&c.drl, &labels, DEFAULT_BINS)?,
        temperature: c.temperature,
    })
}

fn clf_scores(clf: &RobustClassifier, x: &[f64]) -> Result<Vec<f64>> {
    Ok(clf.scores(x)?.1)
}

/// Final target accuracy and Brier score of one self-training variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub accuracy: f64,
    pub brier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrstBenchmark {
    pub erm: TargetScore,
    pub drst: TargetScore,
    /// Ratio fixed at 1.
    pub unit_ratio: TargetScore,
    /// No class regularization.
    pub no_reg: TargetScore,
}

fn score(preds: &[Prediction], labels: &[usize]) -> Result<TargetScore> {
    Ok(TargetScore {
        accuracy: crate::calibration::accuracy(preds, labels)?,
        brier: crate::calibration::brier(preds, labels)?,
    })
}

/// ERM on the source against full self-training and its two ablations.
pub fn drst_benchmark(
    shift: &GaussianShiftSpec,
    model: &ModelSpec,
    train: &TrainConfig,
    schedule: &SelfTrainSchedule,
    seed: u64,
) -> Result<DrstBenchmark> {
    let seeds = SeedPlan::new(seed);
    let data = generate(shift, seeds)?;
    let target = data.target.without_labels();
    let labels = labels_of(&data.target)?;
    let cfg = with_seed(train, seeds.shuffle);
    let (clf, dom) = model.build(data.source.dim(), data.source.class_count(), seeds.init)?;

    let erm = train_erm(&data.source, clf.clone(), &cfg)?;
    let (erm_preds, _) = predict_dataset(&erm.clf, &erm.dom, RatioMode::Fixed(1.0), &data.target)?;

    let variant = |opts: DrstOptions| -> Result<TargetScore> {
        let out = run_drst(&data.source, &target, schedule, &cfg, opts, clf.clone(), dom.clone(), None)?;
        let (preds, _) = predict_dataset(&out.trained.clf, &out.trained.dom, opts.ratios, &data.target)?;
        score(&preds, &labels)
    };
    let drst = variant(DrstOptions::new(model.r))?;
    let unit_ratio = variant(DrstOptions {
        ratios: RatioMode::Fixed(1.0),
        ..DrstOptions::new(model.r)
    })?;
    let no_reg = variant(DrstOptions::new(0.0))?;
    Ok(DrstBenchmark {
        erm: score(&erm_preds, &labels)?,
        drst,
        unit_ratio,
        no_reg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslBenchmark {
    pub drssl: TargetScore,
    pub softmax: TargetScore,
}

/// Consistency training from `per_class` labeled source samples per class, robust versus
/// plain softmax confidences.
pub fn ssl_benchmark(
    shift: &GaussianShiftSpec,
    model: &ModelSpec,
    ssl: &SslConfig,
    per_class: usize,
    seed: u64,
) -> Result<SslBenchmark> {
    let seeds = SeedPlan::new(seed);
    let data = generate(shift, seeds)?;
    let labeled = data
        .source
        .sample_per_class(per_class, &mut ChaCha8Rng::seed_from_u64(seeds.split))?;
    let target = data.target.without_labels();
    let labels = labels_of(&data.target)?;
    let cfg = SslConfig {
        base: with_seed(&ssl.base, seeds.shuffle),
        augmentation: crate::data::AugmentationSpec {
            seed: seeds.augment,
            ..ssl.augmentation
        },
        ..ssl.clone()
    };
    let (clf, dom) = model.build(labeled.dim(), labeled.class_count(), seeds.init)?;
    let variant = |opts: SslOptions| -> Result<TargetScore> {
        let out = run_drssl(&labeled, &target, &cfg, opts, clf.clone(), dom.clone(), None)?;
        let (preds, _) = predict_dataset(&out.trained.clf, &out.trained.dom, opts.ratios, &data.target)?;
        score(&preds, &labels)
    };
    Ok(SslBenchmark {
        drssl: variant(SslOptions::robust(model.r))?,
        softmax: variant(SslOptions::softmax())?,
    })
}

/// A trained model pair with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub classifier: RobustClassifier,
    pub domain: DomainClassifier,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.classifier.features.in_dim() != ck.domain.in_dim() {
            return config("checkpoint classifier and domain classifier disagree on input size");
        }
        Ok(ck)
    }
}
