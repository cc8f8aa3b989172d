//! Small numerically stable primitives shared by the models and metrics.

/// `log Σ exp(v_i)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax together with the log-partition of the input logits.
pub fn softmax_with_log_partition(logits: &[f64]) -> (Vec<f64>, f64) {
    let log_z = log_sum_exp(logits);
    let probs = logits.iter().map(|l| (l - log_z).exp()).collect();
    (probs, log_z)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_with_log_partition(logits).0
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)` without overflow.
#[inline]
pub fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats. Zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// `KL(p ‖ uniform)` in nats.
pub fn kl_to_uniform(probs: &[f64]) -> f64 {
    (probs.len() as f64).ln() - entropy(probs)
}
