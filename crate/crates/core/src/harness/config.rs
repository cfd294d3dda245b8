//! Experiment configuration: data, model, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::baselines::{PairwiseConfig, PairwiseTrainConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::metrics::Aggregation;
use crate::synth::SynthConfig;
use crate::tensor::optim::{AdamWConfig, StepSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Base seed; sample `k` of the whole dataset uses `sample_seed(seed, k)`.
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            seed: 0,
            train: 2000,
            val: 100,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub adamw: AdamWConfig,
    pub lambda_occlusion: f64,
    pub lambda_depth: f64,
    /// Seed of batch sampling.
    pub seed: u64,
    /// Validate (and possibly checkpoint) every this many steps; 0 validates
    /// only at the end.
    pub eval_every: usize,
    /// Record the training loss every this many steps.
    pub log_every: usize,
    /// Mask-loss pretraining steps of a learned backbone before the order
    /// head is trained on top of it.
    pub backbone_iterations: usize,
    pub backbone_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 8,
            schedule: StepSchedule {
                base: 1e-3,
                milestones: vec![2.0 / 3.0, 11.0 / 12.0],
                factor: 0.1,
            },
            adamw: AdamWConfig::default(),
            lambda_occlusion: 5.0,
            lambda_depth: 5.0,
            seed: 0,
            eval_every: 500,
            log_every: 50,
            backbone_iterations: 0,
            backbone_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.lambda_occlusion >= 0.0 && self.lambda_depth >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.backbone_iterations > 0 && !(self.backbone_lr > 0.0) {
            return Err(Error::Config("backbone learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    /// Decode depth with the pair-coherent post-processor instead of the
    /// per-entry argmax.
    pub coherent_depth: bool,
}

/// Pairwise baseline network and its training recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseSection {
    pub net: PairwiseConfig,
    pub train: PairwiseTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub pairwise: PairwiseSection,
}

impl ExperimentConfig {
    /// Laptop-scale profile: 64×64 scenes with 3–6 instances, oracle
    /// backbone, a 2-layer head.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Large-scale recipe: 8 heads, 512 channels, 2048-wide feed-forward,
    /// 8 decoder layers, 120k iterations at batch 16, learning rate 1e-5
    /// decayed ×0.1 at 80k and 110k steps.
    pub fn large() -> Self {
        let mut c = Self::default();
        c.model.backbone.oracle.channels = 512;
        c.model.backbone.oracle.queries = 100;
        c.model.backbone.tiny.channels = 512;
        c.model.backbone.tiny.queries = 100;
        c.model.head = HeadConfig {
            dim: 512,
            heads: 8,
            ffn_dim: 2048,
            encoder_layers: 1,
            decoder_layers: 8,
            task_hidden: 256,
            ..HeadConfig::default()
        };
        c.train.iterations = 120_000;
        c.train.batch_size = 16;
        c.train.schedule.base = 1e-5;
        c.train.eval_every = 5000;
        c.data.train = 100_000;
        c.data.val = 1000;
        c.data.test = 5000;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or large)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let nq = match self.model.backbone.kind {
            super::model::BackboneKind::Oracle => self.model.backbone.oracle.queries,
            super::model::BackboneKind::Tiny => self.model.backbone.tiny.queries,
        };
        if nq < self.data.synth.n_max {
            return Err(Error::Config(format!(
                "{nq} queries cannot hold scenes of up to {} instances",
                self.data.synth.n_max
            )));
        }
        if self.model.backbone.kind == super::model::BackboneKind::Tiny {
            let t = &self.model.backbone.tiny;
            if (t.width, t.height) != (self.data.synth.width, self.data.synth.height) {
                return Err(Error::Config(format!(
                    "backbone expects {}×{} images, data is {}×{}",
                    t.width, t.height, self.data.synth.width, self.data.synth.height
                )));
            }
        }
        let p = &self.pairwise.net;
        if (p.width, p.height) != (self.data.synth.width, self.data.synth.height) {
            return Err(Error::Config(format!(
                "pairwise net expects {}×{} images, data is {}×{}",
                p.width, p.height, self.data.synth.width, self.data.synth.height
            )));
        }
        Ok(())
    }

    /// Applies a global seed to data generation, initialization and batch
    /// sampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.pairwise.train.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for name in ["desk", "large"] {
            let c = ExperimentConfig::profile(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert!(ExperimentConfig::profile("huge").is_err());
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_typos() {
        let c = ExperimentConfig::from_json(r#"{"train": {"iterations": 7}}"#).unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.model, ModelConfig::default());
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"iteratons": 7}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"data": {"synth": {"n_max": 20}}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn schedule_drops_tenfold_at_two_thirds() {
        let s = TrainConfig::default().schedule;
        let total = 1200;
        assert_eq!(s.lr_at(799, total), 1e-3);
        assert!((s.lr_at(800, total) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(1100, total) - 1e-5).abs() < 1e-18);
    }
}
