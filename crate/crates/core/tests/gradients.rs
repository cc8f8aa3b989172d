mod common;

use common::*;
use deepdrl::data::{oracle_expectations, OracleRatios, Sample};
use deepdrl::domain::RatioBounds;
use deepdrl::drl::{grad_source_weighted, RobustClassifier};
use deepdrl::features::{Activation, FeatureMap};
use deepdrl::matrix::Matrix;

const TOL: f64 = 1e-4;

#[test]
fn grad_source_matches_finite_differences() {
    for seed in 0..25 {
        let inst = random_instance(seed, 0.0);
        let (e_theta, e_w) = check_grad_source(&inst);
        assert!(e_theta <= TOL, "seed {seed}: theta rel error {e_theta:e}");
        assert!(e_w <= TOL, "seed {seed}: feature rel error {e_w:e}");
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    for seed in 0..25 {
        let e = check_bce(seed);
        assert!(e <= TOL, "seed {seed}: rel error {e:e}");
    }
}

#[test]
fn density_gradient_matches_finite_differences() {
    for seed in 0..25 {
        let (e_tau, e_z) = check_density(seed);
        assert!(e_tau <= TOL, "seed {seed}: tau rel error {e_tau:e}");
        assert!(e_z <= TOL, "seed {seed}: logit rel error {e_z:e}");
    }
}

fn oracle_model(seed: u64, c: usize, d: usize, r: f64) -> RobustClassifier {
    let mut rng = rng(seed);
    let features = FeatureMap::mlp(d, &[5], 4, Activation::Tanh, &mut rng).unwrap();
    let theta = Matrix::from_fn(c, 4, |_, _| rand::Rng::random_range(&mut rng, -1.5..1.5));
    RobustClassifier::new(theta, features, r, RatioBounds::default()).unwrap()
}

#[test]
fn source_gradient_equals_enumerated_dual_gradient() {
    for seed in 0..10 {
        let c = 2 + (seed as usize % 3);
        let spec = random_discrete(seed, c, 3, 16);
        let clf = oracle_model(seed + 100, c, 3, 0.0);
        let oracle = oracle_expectations(&spec, &clf, OracleRatios::Exact).unwrap();
        let (samples, weights) = spec.source_distribution();
        let refs: Vec<&Sample> = samples.iter().collect();
        let exact = spec.exact_ratios().unwrap();
        let ratios: Vec<f64> = samples
            .iter()
            .map(|s| exact[spec.points().iter().position(|p| *p == s.features).unwrap()])
            .collect();
        let g = grad_source_weighted(&clf, &refs, &weights, &ratios).unwrap();
        for (a, b) in g.theta.data.iter().zip(&oracle.grad_theta.data) {
            assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn oracle_theta_gradient_matches_finite_differences_of_its_value() {
    for (seed, r) in [(1, 0.0), (2, 0.3), (3, 1.0)] {
        let spec = random_discrete(seed, 3, 2, 8);
        let clf = oracle_model(seed, 3, 2, r);
        let oracle = oracle_expectations(&spec, &clf, OracleRatios::Exact).unwrap();
        let mut probe = clf.clone();
        let fd = central_diff(&clf.theta.data, |p| {
            probe.theta.data.copy_from_slice(p);
            oracle_expectations(&spec, &probe, OracleRatios::Exact)
                .unwrap()
                .dual_value
        });
        let e = rel_error(&oracle.grad_theta.data, &fd);
        assert!(e <= 1e-7, "r = {r}: rel error {e:e}");
    }
}

#[test]
fn oracle_ratio_gradient_matches_domain_classifier_chain() {
    // Perturbing the domain classifier's output bias moves every logit by the same amount,
    // so the dual's derivative in that bias is Σ_x (dD/dz)(x).
    let spec = random_discrete(7, 2, 2, 12);
    let clf = oracle_model(7, 2, 2, 0.0);
    let mut rng = rng(70);
    let dom = random_domain_classifier(&mut rng, 2);
    let oracle = oracle_expectations(&spec, &clf, OracleRatios::Domain(&dom)).unwrap();
    let analytic: f64 = spec
        .points()
        .iter()
        .zip(&oracle.grad_ratio)
        .map(|(x, &pair)| {
            let est = dom.forward(x).unwrap();
            deepdrl::domain::density_gradient_to_logit(&est, pair)
        })
        .sum();
    let n = dom.net().param_count();
    let mut probe = dom.clone();
    let base = dom.net().flat_params();
    let fd = central_diff(&[base[n - 1]], |p| {
        let mut q = base.clone();
        q[n - 1] = p[0];
        probe.net_mut().set_flat_params(&q);
        oracle_expectations(&spec, &clf, OracleRatios::Domain(&probe))
            .unwrap()
            .dual_value
    });
    assert!(rel_error(&[analytic], &fd) <= TOL, "{analytic} vs {}", fd[0]);
}
