//! Reference predictors: mask and depth-map heuristics, and a pairwise
//! network that scores one instance pair per forward pass.

pub mod heuristics;
pub mod pairwise;

pub use heuristics::{area_depth, area_occlusion, depth_from_depthmap, yaxis_depth, yaxis_occlusion, DepthStatistic};
pub use pairwise::{train_pairwise, PairwiseConfig, PairwiseModel, PairwiseNet, PairwiseTrainConfig};
