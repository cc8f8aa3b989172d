//! The robust predictor, its maximum-entropy dual objective, source-measure gradients,
//! and the end-to-end trainer.

mod objective;
mod robust;
mod train;

pub use objective::{
    dual_objective, dual_objective_weighted, grad_source, grad_source_weighted, FeatureConstraint,
    SourceGradient,
};
pub use robust::{predict_scores, LabelMode, Prediction, RobustClassifier};
pub use train::{
    evaluate, train_end_to_end, train_erm, EpochRecord, Evaluation, RatioMode, TrainConfig,
    Trained,
};
pub(crate) use train::{Cycler, Engine, StepHook};
