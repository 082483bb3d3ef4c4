//! Optimiser, schedule, training loop and evaluation.

pub mod config;
pub mod eval;
pub mod optim;
pub mod run;

pub use config::TrainConfig;
pub use eval::{class_probabilities, evaluate, predict_labels, EvalConfig, MULTI_SCALES};
pub use optim::{poly_lr, sgd_step, OptimConfig, OptimState};
pub use run::{load_model, train, train_on, MetricLine, StepLosses, TrainReport};
