//! Self-training where every round re-solves a robust learning problem on the source data
//! plus class-balanced confident pseudo-labels for the target.

use serde::{Deserialize, Serialize};

use crate::calibration::{self, DEFAULT_BINS};
use crate::data::{Dataset, Sample};
use crate::domain::DomainClassifier;
use crate::drl::{evaluate, Engine, Prediction, RatioMode, RobustClassifier, TrainConfig, Trained};
use crate::error::{config, contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainSchedule {
    /// Pseudo-label portion in the first round.
    pub p0: f64,
    /// Portion increment per round.
    pub dp: f64,
    pub pmax: f64,
    pub rounds: usize,
    /// Training epochs over the augmented source in each round.
    pub epochs_per_round: usize,
}

impl Default for SelfTrainSchedule {
    fn default() -> Self {
        Self {
            p0: 0.065,
            dp: 0.0085,
            pmax: 0.165,
            rounds: 5,
            epochs_per_round: 1,
        }
    }
}

impl SelfTrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p0 && self.p0 <= self.pmax && self.pmax <= 1.0) {
            return config("schedule needs 0 <= p0 <= pmax <= 1");
        }
        if !(self.dp >= 0.0 && self.dp.is_finite()) {
            return config("schedule needs dp >= 0");
        }
        Ok(())
    }

    /// `min(p0 + t·dp, pmax)` for round `t` (0-based).
    pub fn portion(&self, round: usize) -> f64 {
        (self.p0 + round as f64 * self.dp).min(self.pmax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub target_index: usize,
    pub label: usize,
    pub confidence: f64,
}

/// Per-class quota of `⌈portion · N_c⌉` where `N_c` counts the targets predicted as `c`.
pub fn class_quota(portion: f64, count: usize) -> usize {
    // Guard against products like 0.15 · 20 = 3.0000000000000004.
    let raw = portion * count as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(count)
}

/// Class-balanced confident selection: within each predicted class keep the
/// `⌈portion · N_c⌉` most confident targets, breaking ties by the lower index.
pub fn select_pseudo<P: AsRef<[f64]>>(preds: &[P], portion: f64) -> Vec<PseudoLabel> {
    let portion = portion.clamp(0.0, 1.0);
    let mut by_class: Vec<Vec<PseudoLabel>> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let p = p.as_ref();
        let label = crate::numeric::argmax(p);
        if by_class.len() <= label {
            by_class.resize_with(label + 1, Vec::new);
        }
        by_class[label].push(PseudoLabel {
            target_index: i,
            label,
            confidence: p[label],
        });
    }
    let mut selected = Vec::new();
    for mut group in by_class {
        let quota = class_quota(portion, group.len());
        group.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.target_index.cmp(&b.target_index))
        });
        selected.extend(group.into_iter().take(quota));
    }
    selected.sort_by_key(|p| p.target_index);
    selected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub portion: f64,
    pub n_pseudo: usize,
    pub accuracy: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DrstOutcome {
    pub trained: Trained,
    pub rounds: Vec<RoundRecord>,
}

/// How the robust learner inside each round gets its ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrstOptions {
    pub r: f64,
    pub ratios: RatioMode,
    pub ece_bins: usize,
}

impl DrstOptions {
    pub fn new(r: f64) -> Self {
        Self {
            r,
            ratios: RatioMode::Learned,
            ece_bins: DEFAULT_BINS,
        }
    }
}

fn test_predictions(
    clf: &RobustClassifier,
    dom: &DomainClassifier,
    mode: RatioMode,
    target: &Dataset,
) -> Result<Vec<Prediction>> {
    let dom = (mode == RatioMode::Learned).then_some(dom);
    Ok(evaluate(clf, dom, target)?.predictions)
}

/// Runs one initial robust-learning pass followed by `schedule.rounds` self-training rounds.
///
/// Each round predicts every target in test mode, re-selects pseudo-labels from scratch,
/// and retrains (warm-started) on the original source plus the selected targets. Targets
/// stay in the domain classifier's target pool whether or not they carry a pseudo-label.
/// `eval_labels`, when given, only feeds the round history.
#[allow(clippy::too_many_arguments)]
pub fn run_drst(
    source: &Dataset,
    target: &Dataset,
    schedule: &SelfTrainSchedule,
    cfg: &TrainConfig,
    opts: DrstOptions,
    mut clf: RobustClassifier,
    dom: DomainClassifier,
    eval_labels: Option<&[usize]>,
) -> Result<DrstOutcome> {
    schedule.validate()?;
    if target.is_empty() {
        return contract("self-training needs target samples");
    }
    if source.is_empty() || !source.is_labeled() {
        return contract("self-training needs a labeled source");
    }
    if let Some(l) = eval_labels {
        if l.len() != target.len() {
            return config("one evaluation label per target sample is required");
        }
    }
    if !(0.0..=1.0).contains(&opts.r) {
        return config("r must lie in [0, 1]");
    }
    clf.r = opts.r;

    let source_refs: Vec<&Sample> = source.samples().iter().collect();
    let target_refs: Vec<&Sample> = target.samples().iter().collect();
    let mut trained = Engine {
        labeled: source_refs.clone(),
        dom_source: source_refs.clone(),
        dom_target: target_refs.clone(),
        ratios: opts.ratios,
    }
    .run(clf, dom, cfg)?;

    let mut rounds = Vec::with_capacity(schedule.rounds);
    for round in 0..schedule.rounds {
        let portion = schedule.portion(round);
        let preds = test_predictions(&trained.clf, &trained.dom, opts.ratios, target)?;
        let pseudo = select_pseudo(&preds, portion);
        let pseudo_samples: Vec<Sample> = pseudo
            .iter()
            .map(|p| {
                let s = &target.samples()[p.target_index];
                Sample::new(s.features.clone(), Some(p.label), s.domain)
            })
            .collect();
        let mut labeled = source_refs.clone();
        labeled.extend(pseudo_samples.iter());

        let round_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(round as u64 + 1),
            epochs: schedule.epochs_per_round,
            ..cfg.clone()
        };
        let history = std::mem::take(&mut trained.history);
        let mut next = Engine {
            labeled,
            dom_source: source_refs.clone(),
            dom_target: target_refs.clone(),
            ratios: opts.ratios,
        }
        .run(trained.clf, trained.dom, &round_cfg)?;
        let mut merged = history;
        let offset = merged.len();
        merged.extend(next.history.drain(..).map(|mut r| {
            r.epoch += offset;
            r
        }));
        next.history = merged;
        trained = next;

        let (accuracy, brier, ece) = match eval_labels {
            Some(labels) => {
                let preds = test_predictions(&trained.clf, &trained.dom, opts.ratios, target)?;
                (
                    Some(calibration::accuracy(&preds, labels)?),
                    Some(calibration::brier(&preds, labels)?),
                    Some(calibration::ece(&preds, labels, opts.ece_bins)?.0),
                )
            }
            None => (None, None, None),
        };
        rounds.push(RoundRecord {
            round,
            portion,
            n_pseudo: pseudo.len(),
            accuracy,
            brier,
            ece,
        });
    }
    Ok(DrstOutcome { trained, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full_selection() {
        let preds = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4]];
        assert!(select_pseudo(&preds, 0.0).is_empty());
        let all = select_pseudo(&preds, 1.0);
        assert_eq!(all.len(), 3);
        assert_eq!(all.iter().map(|p| p.label).collect::<Vec<_>>(), vec![0, 1, 0]);
    }

    #[test]
    fn half_portion_hand_example() {
        // class 0 confidences {0.9, 0.6}, class 1 {0.8}
        let preds = vec![vec![0.6, 0.4], vec![0.2, 0.8], vec![0.9, 0.1]];
        let sel = select_pseudo(&preds, 0.5);
        let idx: Vec<usize> = sel.iter().map(|p| p.target_index).collect();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(sel[1].confidence, 0.9);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let preds = vec![vec![0.7, 0.3], vec![0.7, 0.3], vec![0.7, 0.3]];
        let sel = select_pseudo(&preds, 0.5);
        assert_eq!(sel.iter().map(|p| p.target_index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn quota_is_robust_to_rounding() {
        assert_eq!(class_quota(0.15, 20), 3);
        assert_eq!(class_quota(0.1, 10), 1);
        assert_eq!(class_quota(0.11, 10), 2);
        assert_eq!(class_quota(1.0, 7), 7);
        assert_eq!(class_quota(0.0, 7), 0);
    }

    #[test]
    fn schedule_caps() {
        let s = SelfTrainSchedule {
            p0: 0.1,
            dp: 0.1,
            pmax: 0.15,
            rounds: 3,
            epochs_per_round: 1,
        };
        let got: Vec<f64> = (0..3).map(|t| s.portion(t)).collect();
        assert_eq!(got, vec![0.1, 0.15, 0.15]);
        let bad = SelfTrainSchedule {
            p0: 0.3,
            pmax: 0.2,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_schedule() {
        let s = SelfTrainSchedule::default();
        assert_eq!((s.p0, s.dp, s.pmax), (0.065, 0.0085, 0.165));
    }
}
