//! Representation networks `φ(x; w)`: identity, bias-augmented identity, and small MLPs
//! with hand-written reverse-mode gradients.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Identity,
    BiasAugmented,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a`.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer `W h + b`, with `W` stored as out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut a = self.weight.mul_vec(h);
        for (ai, bi) in a.iter_mut().zip(&self.bias) {
            *ai += bi;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Gradients for each layer of a [`FeatureMap`]; empty for parameter-free maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGradient {
    pub layers: Vec<Layer>,
}

impl FeatureGradient {
    pub fn zeros_like(map: &FeatureMap) -> Self {
        Self {
            layers: map
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `self += a · other`
    pub fn add_scaled(&mut self, a: f64, other: &FeatureGradient) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.weight.add_scaled(a, &theirs.weight);
            for (b, o) in mine.bias.iter_mut().zip(&theirs.bias) {
                *b += a * o;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.weight.scale(a);
            l.bias.iter_mut().for_each(|b| *b *= a);
        }
    }

    /// Parameters flattened layer by layer: weights (row-major) then biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weight.data);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: FeatureKind::Identity,
            in_dim: dim,
            out_dim: dim,
            activation: Activation::Tanh,
            layers: Vec::new(),
        }
    }

    pub fn bias_augmented(dim: usize) -> Self {
        Self {
            kind: FeatureKind::BiasAugmented,
            in_dim: dim,
            out_dim: dim + 1,
            activation: Activation::Tanh,
            layers: Vec::new(),
        }
    }

    /// MLP with the given hidden widths (possibly none) and a linear output layer.
    /// Weights are drawn from `U(-1/√fan_in, 1/√fan_in)`, biases start at zero.
    pub fn mlp<R: Rng>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.contains(&0) {
            return config("MLP dimensions must be positive");
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            kind: FeatureKind::Mlp,
            in_dim,
            out_dim,
            activation,
            layers,
        })
    }

    /// MLP from explicit layers; validates that dimensions chain.
    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return config("an MLP needs at least one layer");
        };
        let in_dim = first.weight.cols;
        let mut prev = in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols != prev || l.bias.len() != l.weight.rows {
                return config(format!("layer {i} does not chain with its predecessor"));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return config(format!("layer {i} has non-finite parameters"));
            }
            prev = l.weight.rows;
        }
        Ok(Self {
            kind: FeatureKind::Mlp,
            in_dim,
            out_dim: prev,
            activation,
            layers,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.data.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return config(format!(
                "feature map expects input of length {}, got {}",
                self.in_dim,
                x.len()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self.kind {
            FeatureKind::Identity => x.to_vec(),
            FeatureKind::BiasAugmented => {
                let mut v = x.to_vec();
                v.push(1.0);
                v
            }
            FeatureKind::Mlp => {
                let last = self.layers.len() - 1;
                let mut h = x.to_vec();
                for (i, layer) in self.layers.iter().enumerate() {
                    h = layer.forward(&h);
                    if i < last {
                        h.iter_mut().for_each(|a| *a = self.activation.apply(*a));
                    }
                }
                h
            }
        })
    }

    /// Gradient of `upstream · φ(x; w)` with respect to every layer parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<FeatureGradient> {
        self.check_input(x)?;
        if upstream.len() != self.out_dim {
            return config(format!(
                "upstream has length {}, feature map outputs {}",
                upstream.len(),
                self.out_dim
            ));
        }
        if self.kind != FeatureKind::Mlp {
            return Ok(FeatureGradient { layers: Vec::new() });
        }

        // inputs[i] feeds layer i; pre[i] is layer i's affine output.
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&h);
            let next = if i < last {
                a.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                a.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }

        let mut grads = FeatureGradient::zeros_like(self);
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (d, &a) in delta.iter_mut().zip(&pre[i]) {
                    *d *= self.activation.derivative(a);
                }
            }
            grads.layers[i].weight.add_outer(1.0, &delta, &inputs[i]);
            grads.layers[i].bias.copy_from_slice(&delta);
            if i > 0 {
                delta = self.layers[i].weight.tr_mul_vec(&delta);
            }
        }
        Ok(grads)
    }

    /// `w -= lr · grad`
    pub fn apply_step(&mut self, lr: f64, grad: &FeatureGradient) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            layer.weight.add_scaled(-lr, &g.weight);
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Gradient of `decay/2 · ‖W‖²` over all weight matrices; biases are not decayed.
    pub(crate) fn weight_decay_gradient(&self, decay: f64) -> FeatureGradient {
        FeatureGradient {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut w = l.weight.clone();
                    w.scale(decay);
                    Layer {
                        weight: w,
                        bias: vec![0.0; l.bias.len()],
                    }
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}
