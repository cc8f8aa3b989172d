mod common;

use common::*;
use deepdrl::calibration::{brier, ece, fit_temperature, nll_at_temperature};
use deepdrl::data::{
    augment, generate_gaussian_shift, AugmentationSpec, DiscreteDomainSpec, Domain, GaussianShiftSpec,
    Sample, Strength,
};
use deepdrl::domain::{drl_density_gradient, RatioBounds, RatioEstimate};
use deepdrl::drl::{predict_scores, LabelMode};
use deepdrl::features::{Activation, FeatureMap};
use deepdrl::matrix::Matrix;
use deepdrl::numeric::{argmax, entropy, kl_to_uniform, softmax};
use deepdrl::ratio_baselines::{plugin_ratio, KdeModel};
use deepdrl::selftrain::{class_quota, select_pseudo, SelfTrainSchedule};
use deepdrl::ssl::{consistency_loss, pseudo_targets};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prob_vec(c: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    c.prop_flat_map(|c| prop::collection::vec(0.01f64..1.0, c)).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

/// Predictions over a fixed class count with labels.
fn scored(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..=4)
        .prop_flat_map(move |c| {
            let probs = prop::collection::vec(prob_vec(c..=c), n.clone());
            probs.prop_flat_map(move |p| {
                let len = p.len();
                (Just(p), prop::collection::vec(0..c, len))
            })
        })
}

/// Logits whose largest and smallest entries differ by at least 0.1.
fn spread_logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 2..=5).prop_filter("non-constant", |z| {
        let max = z.iter().copied().fold(f64::MIN, f64::max);
        let min = z.iter().copied().fold(f64::MAX, f64::min);
        max - min >= 0.1
    })
}

fn shift_spec() -> impl Strategy<Value = GaussianShiftSpec> {
    (
        prop::array::uniform2(-2.0f64..2.0),
        prop::array::uniform2(-2.0f64..2.0),
        prop::array::uniform2(0.3f64..3.0),
        prop::array::uniform2(0.3f64..3.0),
        -0.8f64..0.8,
        prop::array::uniform2(-2.0f64..2.0),
        any::<u64>(),
    )
        .prop_map(|(ms, mt, vs, vt, rho, w, seed)| {
            let cov = |v: [f64; 2]| {
                let off = rho * (v[0] * v[1]).sqrt();
                vec![vec![v[0], off], vec![off, v[1]]]
            };
            GaussianShiftSpec {
                source_mean: ms.to_vec(),
                target_mean: mt.to_vec(),
                source_cov: cov(vs),
                target_cov: cov(vt),
                boundary_weights: w.to_vec(),
                boundary_bias: 0.3,
                n_source: 20,
                n_target: 20,
                seed,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ---- data ----

    #[test]
    fn swapped_spec_inverts_the_true_ratio(spec in shift_spec()) {
        let a = generate_gaussian_shift(&spec).unwrap();
        let b = generate_gaussian_shift(&spec.swapped()).unwrap();
        for s in a.source.samples().iter().chain(a.target.samples()) {
            let r = a.true_ratio.ratio(&s.features);
            let r_swapped = b.true_ratio.ratio(&s.features);
            prop_assert!((r * r_swapped - 1.0).abs() <= 1e-12, "{r} * {r_swapped}");
        }
    }

    #[test]
    fn off_simplex_probabilities_are_rejected(offset in prop_oneof![1.1e-9f64..0.1, -0.1f64..-1.1e-9], n in 1usize..8) {
        let points: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let uniform = vec![1.0 / n as f64; n];
        let mut bad = uniform.clone();
        bad[0] += offset;
        let cond = Matrix::from_fn(n, 2, |_, _| 0.5);
        prop_assert!(DiscreteDomainSpec::new(points.clone(), bad.clone(), uniform.clone(), cond.clone()).is_err());
        prop_assert!(DiscreteDomainSpec::new(points.clone(), uniform.clone(), bad, cond.clone()).is_err());
        prop_assert!(DiscreteDomainSpec::new(points, uniform.clone(), uniform, cond).is_ok());
    }

    #[test]
    fn augmentation_is_a_function_of_the_rng_state(
        x in prop::collection::vec(-5.0f64..5.0, 1..8),
        seed in any::<u64>(),
        strong in any::<bool>(),
    ) {
        let sample = Sample::new(x, Some(0), Domain::Target);
        let spec = AugmentationSpec::default();
        let strength = if strong { Strength::Strong } else { Strength::Weak };
        let a = augment(&sample, &spec, strength, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&sample, &spec, strength, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    // ---- features ----

    #[test]
    fn feature_forward_is_pure(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let map = FeatureMap::mlp(4, &[5, 3], 6, Activation::Tanh, &mut rng(seed)).unwrap();
        let a = map.forward(&x).unwrap();
        let b = map.forward(&x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn feature_backward_is_linear_in_upstream(
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let map = FeatureMap::mlp(3, &[4, 4], 5, Activation::Relu, &mut r).unwrap();
        let x = gaussian_vec(&mut r, 3, 1.0);
        let u1 = gaussian_vec(&mut r, 5, 1.0);
        let u2 = gaussian_vec(&mut r, 5, 1.0);
        let mixed: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| a * p + b * q).collect();
        let g = map.backward(&x, &mixed).unwrap().flatten();
        let g1 = map.backward(&x, &u1).unwrap().flatten();
        let g2 = map.backward(&x, &u2).unwrap().flatten();
        for ((v, p), q) in g.iter().zip(&g1).zip(&g2) {
            prop_assert!((v - (a * p + b * q)).abs() <= 1e-12);
        }
    }

    // ---- domain ----

    #[test]
    fn domain_probabilities_sum_to_one_exactly(logit in -60.0f64..60.0) {
        let est = RatioEstimate::from_logit(logit, RatioBounds::default());
        prop_assert_eq!(est.tau_s + est.tau_t, 1.0);
    }

    #[test]
    fn density_gradient_follows_the_ratio_chain(seed in any::<u64>(), logit in -8.0f64..8.0) {
        let inst = random_instance(seed, 0.0);
        let (phi, z) = inst.clf.scores(&inst.batch[0].features).unwrap();
        let est = RatioEstimate::from_logit(logit, RatioBounds::default());
        let f = predict_scores(&z, est.ratio, 0.0, LabelMode::Test).unwrap();
        let got = drl_density_gradient(&inst.clf.theta, &phi, &f, &est).unwrap();
        if est.clamped {
            prop_assert_eq!(got, (0.0, 0.0));
        } else {
            // dL/dR = Σ_y f_y z_y; R = τ_s/τ_t.
            let dl_dr: f64 = f.probs.iter().zip(&z).map(|(p, v)| p * v).sum();
            let want = (dl_dr / est.tau_t, -dl_dr * est.tau_s / (est.tau_t * est.tau_t));
            prop_assert!((got.0 - want.0).abs() <= 1e-10 * want.0.abs().max(1.0));
            prop_assert!((got.1 - want.1).abs() <= 1e-10 * want.1.abs().max(1.0));
        }
    }

    // ---- robust prediction ----

    #[test]
    fn unit_ratio_without_regularization_is_softmax(z in prop::collection::vec(-10.0f64..10.0, 2..6), y in 0usize..2) {
        let want = softmax(&z);
        for mode in [LabelMode::Test, LabelMode::Train(y)] {
            let p = predict_scores(&z, 1.0, 0.0, mode).unwrap();
            for (a, b) in p.probs.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn test_mode_is_temperature_scaling(
        z in prop::collection::vec(-10.0f64..10.0, 2..6),
        ratio in 1e-3f64..1e3,
        r in 0.0f64..1.0,
    ) {
        let p = predict_scores(&z, ratio, r, LabelMode::Test).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| ratio * v / (1.0 + r)).collect();
        for (a, b) in p.probs.iter().zip(softmax(&scaled)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_strictly_decreases_in_the_ratio(z in spread_logits(), lo in 0.01f64..5.0, step in 1.1f64..2.0) {
        let hi = lo * step;
        let h = |ratio: f64| entropy(&predict_scores(&z, ratio, 0.0, LabelMode::Test).unwrap().probs);
        prop_assert!(h(hi) < h(lo), "H({hi}) = {} vs H({lo}) = {}", h(hi), h(lo));
    }

    #[test]
    fn kl_to_uniform_vanishes_monotonically_as_the_ratio_shrinks(z in spread_logits()) {
        let grid = [1.0, 0.5, 0.1, 0.05, 0.01, 1e-3];
        let kl: Vec<f64> = grid
            .iter()
            .map(|&ratio| kl_to_uniform(&predict_scores(&z, ratio, 0.0, LabelMode::Test).unwrap().probs))
            .collect();
        prop_assert!(kl.windows(2).all(|w| w[1] <= w[0]), "{kl:?}");
        prop_assert!(kl[grid.len() - 1] < 1e-4);
    }

    #[test]
    fn argmax_does_not_depend_on_the_ratio(z in prop::collection::vec(-5.0f64..5.0, 2..6), ratio in 1e-3f64..1e3) {
        let p = predict_scores(&z, ratio, 0.0, LabelMode::Test).unwrap();
        prop_assert_eq!(argmax(&p.probs), argmax(&z));
    }

    // ---- kernel density plug-in ----

    #[test]
    fn kde_ignores_point_order(
        points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..20),
        h in 0.05f64..2.0,
        x in prop::collection::vec(-3.0f64..3.0, 2),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = KdeModel::new(points, h).unwrap().log_density(&x).unwrap();
        let b = KdeModel::new(shuffled, h).unwrap().log_density(&x).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn plugin_ratio_is_reciprocal(
        ps in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..15),
        pt in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..15),
        h in 0.3f64..2.0,
        x in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let bounds = RatioBounds::default();
        let a = KdeModel::new(ps, h).unwrap();
        let b = KdeModel::new(pt, h).unwrap();
        let r_ab = plugin_ratio(&a, &b, &x, bounds).unwrap();
        let r_ba = plugin_ratio(&b, &a, &x, bounds).unwrap();
        prop_assume!(r_ab > bounds.min && r_ab < bounds.max);
        prop_assert!((r_ab * r_ba - 1.0).abs() <= 1e-10);
    }

    // ---- self-training ----

    #[test]
    fn selection_invariants((preds, _) in scored(0..40), portion in 0.0f64..1.0) {
        let selected = select_pseudo(&preds, portion);
        let mut seen = std::collections::HashSet::new();
        for s in &selected {
            prop_assert!(seen.insert(s.target_index), "duplicate target {}", s.target_index);
            prop_assert_eq!(s.label, argmax(&preds[s.target_index]));
        }
        let c = preds.first().map_or(0, Vec::len);
        for class in 0..c {
            let n_c = preds.iter().filter(|p| argmax(p) == class).count();
            let got = selected.iter().filter(|s| s.label == class).count();
            let want = ((portion * n_c as f64 - 1e-9).ceil().max(0.0) as usize).min(n_c);
            prop_assert_eq!(got, want);
            prop_assert_eq!(got, class_quota(portion, n_c));
        }
    }

    #[test]
    fn portion_schedule_is_capped_and_non_decreasing(
        p0 in 0.0f64..0.5,
        dp in 0.0f64..0.2,
        extra in 0.0f64..0.5,
    ) {
        let schedule = SelfTrainSchedule { p0, dp, pmax: (p0 + extra).min(1.0), ..SelfTrainSchedule::default() };
        let seq: Vec<f64> = (0..20).map(|t| schedule.portion(t)).collect();
        prop_assert!(seq.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(seq.iter().all(|&p| p <= schedule.pmax));
    }

    // ---- consistency training ----

    #[test]
    fn consistency_loss_is_non_negative_and_zero_when_masked(
        (weak, _) in scored(1..20),
        tau in 0.3f64..0.999,
        strong_seed in any::<u64>(),
    ) {
        let mut r = rng(strong_seed);
        let strong: Vec<Vec<f64>> = weak
            .iter()
            .map(|p| {
                let w: Vec<f64> = (0..p.len()).map(|_| r.random_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let loss = consistency_loss(&weak, &strong, tau).unwrap();
        prop_assert!(loss >= 0.0);
        let masked = pseudo_targets(&weak, tau).iter().all(Option::is_none);
        if masked {
            prop_assert_eq!(loss, 0.0);
        } else {
            // Strong predictions here never put full mass on one class.
            prop_assert!(loss > 0.0);
        }
        let echoed: Vec<Vec<f64>> = pseudo_targets(&weak, tau)
            .iter()
            .zip(&strong)
            .map(|(t, s)| match t {
                Some(c) => (0..s.len()).map(|j| f64::from(u8::from(j == *c))).collect(),
                None => s.clone(),
            })
            .collect();
        prop_assert_eq!(consistency_loss(&weak, &echoed, tau).unwrap(), 0.0);
    }

    #[test]
    fn mask_rate_does_not_grow_with_the_threshold((weak, _) in scored(1..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kept = |tau: f64| pseudo_targets(&weak, tau).iter().filter(|t| t.is_some()).count();
        prop_assert!(kept(hi) <= kept(lo));
    }

    // ---- calibration ----

    #[test]
    fn metrics_ignore_sample_order((probs, labels) in scored(1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.shuffle(&mut rng(seed));
        let p2: Vec<Vec<f64>> = order.iter().map(|&i| probs[i].clone()).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        prop_assert!((brier(&probs, &labels).unwrap() - brier(&p2, &l2).unwrap()).abs() <= 1e-12);
        let e1 = ece(&probs, &labels, 5).unwrap().0;
        let e2 = ece(&p2, &l2, 5).unwrap().0;
        prop_assert!((e1 - e2).abs() <= 1e-12);
    }

    #[test]
    fn single_bin_ece_is_the_accuracy_gap((probs, labels) in scored(1..30)) {
        let n = probs.len() as f64;
        let acc = probs.iter().zip(&labels).filter(|(p, &y)| argmax(p) == y).count() as f64 / n;
        let conf = probs.iter().map(|p| p[argmax(p)]).sum::<f64>() / n;
        let e = ece(&probs, &labels, 1).unwrap().0;
        prop_assert!((e - (acc - conf).abs()).abs() <= 1e-12);
    }

    #[test]
    fn fitted_temperature_never_hurts(
        logits in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 3), 1..30),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let labels: Vec<usize> = logits.iter().map(|_| r.random_range(0..3)).collect();
        let t = fit_temperature(&logits, &labels).unwrap();
        prop_assert!(nll_at_temperature(&logits, &labels, t) <= nll_at_temperature(&logits, &labels, 1.0) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_backward_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.random_range(1..=6);
        let m = r.random_range(1..=8);
        let hidden = [r.random_range(1..=5), r.random_range(1..=5)];
        let act = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let mut map = FeatureMap::mlp(d, &hidden, m, act, &mut r).unwrap();
        let mut p = map.flat_params();
        for v in p.iter_mut() {
            *v += 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
        map.set_flat_params(&p);
        let x = gaussian_vec(&mut r, d, 1.0);
        let upstream = gaussian_vec(&mut r, m, 1.0);
        let g = map.backward(&x, &upstream).unwrap().flatten();
        let mut probe = map.clone();
        let fd = central_diff(&p, |q| {
            probe.set_flat_params(q);
            probe.forward(&x).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        });
        let e = rel_error(&g, &fd);
        prop_assert!(e <= 1e-4, "rel error {e:e}");
    }
}

#[test]
fn label_frequency_matches_the_mean_label_probability() {
    for seed in 0..4 {
        let spec = GaussianShiftSpec {
            n_source: 10_000,
            n_target: 10,
            boundary_bias: 0.4,
            seed,
            ..GaussianShiftSpec::default()
        };
        let data = generate_gaussian_shift(&spec).unwrap();
        let n = data.source.len() as f64;
        let freq = data.source.samples().iter().filter(|s| s.label == Some(1)).count() as f64 / n;
        let probs: Vec<f64> = data.source.samples().iter().map(|s| spec.label_probability(&s.features)).collect();
        let mean = probs.iter().sum::<f64>() / n;
        let var = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>() / n;
        let tol = 4.5 * (var / n).sqrt();
        assert!((freq - mean).abs() <= tol, "seed {seed}: {freq} vs {mean} (tol {tol})");
    }
}

#[test]
fn one_dimensional_kde_integrates_to_one() {
    let mut r = rng(5);
    let points: Vec<Vec<f64>> = (0..25).map(|_| vec![r.random_range(-2.0..2.0)]).collect();
    for h in [0.1, 0.5, 1.5] {
        let kde = KdeModel::new(points.clone(), h).unwrap();
        let (lo, hi, n) = (-20.0, 20.0, 40_000);
        let dx = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| kde.log_density(&[lo + (i as f64 + 0.5) * dx]).unwrap().exp() * dx)
            .sum();
        assert!((total - 1.0).abs() <= 1e-3, "h = {h}: {total}");
    }
}

#[test]
fn uniform_predictor_brier_values() {
    assert!((brier(&[vec![0.5, 0.5]], &[0]).unwrap() - 0.5).abs() <= 1e-12);
    assert!((brier(&[vec![0.25; 4]], &[2]).unwrap() - 0.75).abs() <= 1e-12);
}
