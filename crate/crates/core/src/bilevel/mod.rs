//! Alternating bilevel training of a predictor and its weighting network,
//! the hypergradient it relies on, and the reweighting baselines.

mod config;
mod hypergrad;
mod optim;
mod trainer;

pub use config::{Method, TrainConfig};
pub use hypergrad::{
    inner_step, inner_step_with_weights, instance_weights, meta_gradient, meta_gradient_fd,
    meta_gradient_with, meta_inputs, normalize_weights, weighted_batch_grad, InnerStep, MetaGradient,
    MetaObjective,
};
pub use optim::Sgd;
pub use trainer::{
    batch_weights, init_classifier, init_meta, margin_weights, streams, train, train_baseline,
    train_from, EpochRecord, Splits, Task, TrainedPair,
};
