//! Prediction matching, intermediate-layer matching and the training loop
//! that combines them.

mod loss;
mod strategy;
mod train;

pub use loss::{hidden_match_loss, kl_loss, total_distill_loss, BoundProjections, Projection, ProjectionSet};
pub use strategy::{evenly_spaced, middle_layer, select_layers, LayerMapping, Strategy};
pub use train::{
    distill, DistanceMetric, DistillConfig, DistillOutcome, EvalRecord, InitScheme, StepRecord, TeacherCache,
};
