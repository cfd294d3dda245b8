//! Experiment plumbing: configuration, datasets, losses, training,
//! decoupled evaluation, the inference-cost benchmark and VQA export.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;
pub mod vqa;

pub use bench::{bench, tiled_scene, BenchReport, BenchRow};
pub use config::{DataConfig, EvalConfig, ExperimentConfig, TrainConfig};
pub use eval::{evaluate, HeadPredictor, Heuristic, HeuristicPredictor, PairwisePredictor, Predictor, ScenePrediction};
pub use loss::{order_losses, LossWeights};
pub use model::{BackboneKind, BackboneSpec, ModelConfig, OrderModel};
pub use train::{train, TrainLog, TrainOutcome};
pub use vqa::{vqa_export, VqaRecord, VqaTask};
