//! Distributionally robust learning for calibrated classification under covariate shift.
//!
//! A robust classifier predicts `f_y(x) ∝ exp(R(x) θ_y·φ(x))` where `R(x) = P_s(x)/P_t(x)`
//! comes from a jointly trained binary domain classifier. Far from the source data `R` is
//! small and predictions flatten toward uniform.
//!
//! Modules:
//! - [`data`]: datasets, CSV, synthetic Gaussian shift, discrete oracle domains, augmentation
//! - [`features`]: representation networks with manual gradients
//! - [`domain`]: domain classifier and density-ratio gradients
//! - [`drl`]: robust predictor, dual objective, end-to-end and ERM training
//! - [`ratio_baselines`]: KDE plug-in ratios and the bandwidth simulation
//! - [`selftrain`]: self-training with class-balanced pseudo-labels
//! - [`ssl`]: confidence-thresholded consistency training
//! - [`calibration`]: Brier, ECE, reliability bins, misclassification entropy, temperature scaling
//! - [`experiment`]: seeded benchmark pipelines shared by the CLI and the acceptance tests

pub mod calibration;
pub mod data;
pub mod domain;
pub mod drl;
mod error;
pub mod experiment;
pub mod features;
pub mod matrix;
pub mod numeric;
pub mod ratio_baselines;
pub mod selftrain;
pub mod ssl;

pub use error::{DrlError, Result};
