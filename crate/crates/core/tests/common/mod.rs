//! Random small instances and finite-difference checks shared by the integration tests.
#![allow(dead_code)]

use deepdrl::data::{DiscreteDomainSpec, Domain, Sample};
use deepdrl::domain::{
    bce_gradient, bce_loss, density_gradient_to_logit, drl_density_gradient, DomainClassifier,
    RatioBounds, RatioEstimate,
};
use deepdrl::drl::{grad_source, predict_scores, LabelMode, RobustClassifier};
use deepdrl::features::{Activation, FeatureMap};
use deepdrl::matrix::Matrix;
use deepdrl::numeric::log_sum_exp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `params`.
pub fn central_diff(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// A random robust classifier with an MLP feature map, `C ≤ 4`, `d ≤ 6`, `m ≤ 8`.
pub struct Instance {
    pub clf: RobustClassifier,
    pub batch: Vec<Sample>,
    pub ratios: Vec<f64>,
}

pub fn random_instance(seed: u64, r: f64) -> Instance {
    let mut rng = rng(seed);
    let c = rng.random_range(2..=4);
    let d = rng.random_range(1..=6);
    let m = rng.random_range(1..=8);
    let hidden = rng.random_range(1..=6);
    let act = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let mut features = FeatureMap::mlp(d, &[hidden], m, act, &mut rng).unwrap();
    // Nonzero biases so ReLU kinks are unlikely to sit on a sample.
    let mut p = features.flat_params();
    for v in p.iter_mut() {
        *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    features.set_flat_params(&p);
    let theta = Matrix::from_fn(c, m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let clf = RobustClassifier::new(theta, features, r, RatioBounds::default()).unwrap();
    let n = rng.random_range(1..=5);
    let batch: Vec<Sample> = (0..n)
        .map(|_| {
            let x = gaussian_vec(&mut rng, d, 1.0);
            Sample::new(x, Some(rng.random_range(0..c)), Domain::Source)
        })
        .collect();
    let ratios = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    Instance { clf, batch, ratios }
}

/// Loss whose exact gradient is `grad_source` at `r = 0`:
/// `(1/N) Σ_i [log Z(R_i z_i) / R_i − z_{i, y_i}]`.
pub fn surrogate_loss(clf: &RobustClassifier, batch: &[Sample], ratios: &[f64]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .zip(ratios)
        .map(|(s, &ratio)| {
            let (_, z) = clf.scores(&s.features).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| ratio * v).collect();
            log_sum_exp(&scaled) / ratio - z[s.label.unwrap()]
        })
        .sum::<f64>()
        / n
}

/// Relative errors of the θ and feature-parameter parts of `grad_source`.
pub fn check_grad_source(inst: &Instance) -> (f64, f64) {
    let refs: Vec<&Sample> = inst.batch.iter().collect();
    let g = grad_source(&inst.clf, &refs, &inst.ratios).unwrap();

    let theta0 = inst.clf.theta.data.clone();
    let mut clf = inst.clf.clone();
    let fd_theta = central_diff(&theta0, |p| {
        clf.theta.data.copy_from_slice(p);
        surrogate_loss(&clf, &inst.batch, &inst.ratios)
    });
    let e_theta = rel_error(&g.theta.data, &fd_theta);

    let w0 = inst.clf.features.flat_params();
    let mut clf = inst.clf.clone();
    let fd_w = central_diff(&w0, |p| {
        clf.features.set_flat_params(p);
        surrogate_loss(&clf, &inst.batch, &inst.ratios)
    });
    let e_w = rel_error(&g.features.flatten(), &fd_w);
    (e_theta, e_w)
}

pub fn random_domain_classifier(rng: &mut ChaCha8Rng, d: usize) -> DomainClassifier {
    let hidden = rng.random_range(1..=6);
    let mut dom = DomainClassifier::mlp(d, &[hidden], Activation::Tanh, RatioBounds::default(), rng).unwrap();
    let mut p = dom.net().flat_params();
    for v in p.iter_mut() {
        *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    dom.net_mut().set_flat_params(&p);
    dom
}

/// Relative error of `bce_gradient` on a random mixed-domain batch.
pub fn check_bce(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(1..=6);
    let dom = random_domain_classifier(&mut rng, d);
    let n = rng.random_range(2..=8);
    let batch: Vec<Sample> = (0..n)
        .map(|i| {
            let domain = if i % 2 == 0 { Domain::Source } else { Domain::Target };
            Sample::new(gaussian_vec(&mut rng, d, 1.0), None, domain)
        })
        .collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let g = bce_gradient(&dom, &refs).unwrap();
    let mut probe = dom.clone();
    let fd = central_diff(&dom.net().flat_params(), |p| {
        probe.net_mut().set_flat_params(p);
        bce_loss(&probe, &refs).unwrap()
    });
    rel_error(&g.grad.flatten(), &fd)
}

/// Relative errors of the density gradient with respect to `(τ_s, τ_t)` and, chained,
/// to the domain logit, for the test-mode log-partition at `r = 0`.
pub fn check_density(seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let inst = random_instance(seed ^ 0xd0d0, 0.0);
    let x = &inst.batch[0].features;
    let (phi, z) = inst.clf.scores(x).unwrap();
    let logit: f64 = rng.random_range(-2.0..2.0);
    let bounds = RatioBounds::default();
    let est = RatioEstimate::from_logit(logit, bounds);
    let f = predict_scores(&z, est.ratio, 0.0, LabelMode::Test).unwrap();
    let d_tau = drl_density_gradient(&inst.clf.theta, &phi, &f, &est).unwrap();

    let log_z = |ratio: f64| {
        let scaled: Vec<f64> = z.iter().map(|v| ratio * v).collect();
        log_sum_exp(&scaled)
    };
    let fd_tau = central_diff(&[est.tau_s, est.tau_t], |p| log_z(p[0] / p[1]));
    let e_tau = rel_error(&[d_tau.0, d_tau.1], &fd_tau);

    let dz = density_gradient_to_logit(&est, d_tau);
    let fd_z = central_diff(&[logit], |p| log_z(p[0].exp()));
    let e_z = rel_error(&[dz], &fd_z);
    (e_tau, e_z)
}

/// A random discrete domain with full support in both distributions.
pub fn random_discrete(seed: u64, c: usize, d: usize, n_points: usize) -> DiscreteDomainSpec {
    let mut rng = rng(seed);
    let points: Vec<Vec<f64>> = (0..n_points).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let simplex = |rng: &mut ChaCha8Rng, n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let p_s = simplex(&mut rng, n_points);
    let p_t = simplex(&mut rng, n_points);
    let rows: Vec<Vec<f64>> = (0..n_points).map(|_| simplex(&mut rng, c)).collect();
    DiscreteDomainSpec::new(points, p_s, p_t, Matrix::from_rows(&rows)).unwrap()
}
