//! Holistic instance order prediction.
//!
//! Given per-segment mask embeddings and a per-pixel embedding, the order
//! head predicts the complete occlusion and depth adjacency matrices of a
//! scene in one forward pass. Around it sit the evaluation protocol
//! (Hungarian matching, precision/recall/F1, WHDR), non-parametric and
//! pairwise baselines, and a synthetic layered-scene generator that supplies
//! exact ground truth.

pub mod backbone;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod order;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub use harness::{ExperimentConfig, OrderModel};
pub use head::{HeadConfig, HeadOutput, OrderHead};
pub use metrics::{MetricsReport, Prf, Whdr};
pub use order::{Bitmap, DepthMatrix, InstanceMask, OcclusionMatrix, SceneAnnotation};
pub use synth::{SceneSample, SynthConfig};
