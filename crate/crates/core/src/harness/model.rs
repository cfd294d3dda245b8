//! Backbone plus order head as one checkpointable model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    coarse_masks, compute_masks, oracle_backbone, tiny::mask_loss, AdapterMode, OracleConfig, TinyBackbone,
    TinyBackboneConfig,
};
use crate::error::{Error, Result};
use crate::head::{select_tokens, DescriptorPath, HeadConfig, HeadForward, HeadOutput, OrderHead, Selection, CONFIDENCE_THRESHOLD};
use crate::metrics::match_segments;
use crate::order::Bitmap;
use crate::synth::{sample_seed, SceneSample};
use crate::tensor::checkpoint;
use crate::tensor::nn::{Binder, ParamStore};
use crate::tensor::{sigmoid, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Oracle,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    #[serde(default)]
    pub mode: AdapterMode,
    pub bottleneck: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub oracle: OracleConfig,
    pub tiny: TinyBackboneConfig,
    /// Adapters inserted into the tiny backbone and trained with the order
    /// losses while the rest of the backbone stays frozen.
    pub adapters: Option<AdapterSpec>,
}

impl BackboneSpec {
    pub fn channels(&self) -> usize {
        match self.kind {
            BackboneKind::Oracle => self.oracle.channels,
            BackboneKind::Tiny => self.tiny.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::default(),
            head: HeadConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.backbone.channels() != self.head.dim {
            return Err(Error::Config(format!(
                "backbone has {} channels, head expects {}",
                self.backbone.channels(),
                self.head.dim
            )));
        }
        if self.backbone.kind == BackboneKind::Oracle && self.backbone.adapters.is_some() {
            return Err(Error::Config("adapters need the tiny backbone".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Oracle(OracleConfig),
    Tiny(TinyBackbone),
}

/// Backbone outputs on a tape: all query rows, pixel tokens, decoded masks
/// and confidences.
pub struct Features<'t> {
    pub queries: Var<'t>,
    pub pixels: Var<'t>,
    pub masks: Vec<Bitmap>,
    pub confidences: Vec<f64>,
    /// Mask loss of the tiny backbone, when requested.
    pub mask_loss: Option<Var<'t>>,
}

/// Head inputs after token selection.
pub struct Selected<'t> {
    pub ids: Vec<usize>,
    pub queries: Var<'t>,
    pub pixels: Var<'t>,
    pub masks: Vec<Bitmap>,
}

#[derive(Clone, Debug)]
pub struct OrderModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: OrderHead,
}

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

impl OrderModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = match config.backbone.kind {
            BackboneKind::Oracle => Backbone::Oracle(config.backbone.oracle),
            BackboneKind::Tiny => {
                let mut net = TinyBackbone::new(&mut store, BACKBONE_PREFIX, config.backbone.tiny, &mut rng)?;
                if let Some(a) = config.backbone.adapters {
                    // Own stream, so adding adapters leaves every other initial weight as it was.
                    let mut adapter_rng = ChaCha8Rng::seed_from_u64(sample_seed(config.init_seed, 1));
                    net.attach_adapters(&mut store, BACKBONE_PREFIX, a.mode, a.bottleneck, &mut adapter_rng)?;
                }
                Backbone::Tiny(net)
            }
        };
        let head = OrderHead::new(&mut store, HEAD_PREFIX, config.head.clone(), &mut rng)?;
        Ok(OrderModel {
            config,
            store,
            backbone,
            head,
        })
    }

    /// Marks what the order losses train: the head, plus adapters when
    /// present. The rest of the backbone is frozen.
    pub fn freeze_backbone(&mut self) {
        let prefix = format!("{BACKBONE_PREFIX}.");
        self.store.set_trainable_where(|n| n.starts_with(&prefix) && !n.contains(".adapter_"), false);
    }

    /// Trainable flags for backbone mask pretraining: backbone without
    /// adapters only.
    pub fn backbone_only(&mut self) {
        let prefix = format!("{BACKBONE_PREFIX}.");
        self.store.set_trainable_where(|_| true, false);
        self.store.set_trainable_where(|n| n.starts_with(&prefix) && !n.contains(".adapter_"), true);
    }

    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        checkpoint::save(dir, &self.store, &self.config, meta).map(|_| ())
    }

    /// Rebuilds the model from a checkpoint's stored configuration.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = checkpoint::read_manifest(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest.config)?;
        let mut model = OrderModel::new(config)?;
        checkpoint::load(dir, &mut model.store, Some(&model.config))?;
        Ok(model)
    }

    /// Runs the backbone on `sample` with parameters bound through `b`.
    pub fn features<'t>(&self, b: &Binder<'t, '_>, sample: &SceneSample, with_mask_loss: bool) -> Result<Features<'t>> {
        let tape = b.tape();
        match &self.backbone {
            Backbone::Oracle(cfg) => {
                let out = oracle_backbone(sample, cfg)?;
                let masks = out.masks(0.5)?;
                Ok(Features {
                    pixels: tape.constant(out.pixel_tokens()),
                    queries: tape.constant(out.q),
                    masks,
                    confidences: out.confidences,
                    mask_loss: None,
                })
            }
            Backbone::Tiny(net) => {
                let out = net.forward(b, &sample.image)?;
                let (w, h) = net.cfg.grid();
                let p = out.pixels.value().transpose()?;
                let masks = compute_masks(&out.q.value(), &p, w, h, 0.5)?;
                let confidences = out.confidence_logits.value().data().iter().map(|&x| sigmoid(x)).collect();
                let mask_loss = if with_mask_loss {
                    Some(mask_loss(&out, &coarse_masks(sample))?.0)
                } else {
                    None
                };
                Ok(Features {
                    queries: out.q,
                    pixels: out.pixels,
                    masks,
                    confidences,
                    mask_loss,
                })
            }
        }
    }

    /// Training selection: every ground-truth instance takes the query whose
    /// mask matches it best, in ground-truth order.
    pub fn select_for_training<'t>(&self, f: &Features<'t>, gt_masks: &[Bitmap]) -> Result<Selected<'t>> {
        let assignment = match_segments(&f.masks, gt_masks)?;
        let (ids, masks) = select_tokens(
            &f.masks,
            &f.confidences,
            Selection::Training {
                assignment: &assignment,
                n_gt: gt_masks.len(),
            },
        )?;
        Ok(Selected {
            queries: f.queries.select_rows(&ids)?,
            pixels: f.pixels,
            ids,
            masks,
        })
    }

    pub fn select_for_inference<'t>(&self, f: &Features<'t>) -> Result<Selected<'t>> {
        let (ids, masks) = select_tokens(
            &f.masks,
            &f.confidences,
            Selection::Inference {
                threshold: CONFIDENCE_THRESHOLD,
            },
        )?;
        Ok(Selected {
            queries: f.queries.select_rows(&ids)?,
            pixels: f.pixels,
            ids,
            masks,
        })
    }

    pub fn head_forward<'t>(&self, b: &Binder<'t, '_>, s: &Selected<'t>) -> Result<HeadForward<'t>> {
        self.head.forward(b, &s.queries, &s.pixels, &s.masks, DescriptorPath::Compact)
    }

    /// Inference on one image: selected query ids, their masks and the
    /// final-layer logits.
    pub fn predict(&self, sample: &SceneSample) -> Result<Prediction> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, &self.store);
        let f = self.features(&b, sample, false)?;
        let s = self.select_for_inference(&f)?;
        let out = self.head_forward(&b, &s)?;
        let output = HeadOutput::from_logits(s.ids.len(), out.last());
        Ok(Prediction {
            ids: s.ids,
            masks: s.masks,
            output,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub ids: Vec<usize>,
    pub masks: Vec<Bitmap>,
    pub output: HeadOutput,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SynthConfig};

    fn tiny_config(adapters: Option<AdapterSpec>) -> ModelConfig {
        let tiny = TinyBackboneConfig {
            width: 16,
            height: 16,
            channels: 8,
            heads: 2,
            ffn_dim: 8,
            layers: 1,
            queries: 8,
        };
        ModelConfig {
            backbone: BackboneSpec {
                kind: BackboneKind::Tiny,
                tiny,
                adapters,
                ..Default::default()
            },
            head: HeadConfig {
                dim: 8,
                heads: 2,
                ffn_dim: 8,
                task_hidden: 4,
                ..Default::default()
            },
            init_seed: 3,
        }
    }

    #[test]
    fn config_checks() {
        let mut c = ModelConfig::default();
        c.head.dim = 32;
        assert!(matches!(OrderModel::new(c), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.backbone.adapters = Some(AdapterSpec {
            mode: AdapterMode::FfnOnly,
            bottleneck: 4,
        });
        assert!(matches!(OrderModel::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_training_selection_is_ground_truth_order() {
        let model = OrderModel::new(ModelConfig::default()).unwrap();
        let s = generate_sample(11, &SynthConfig::default()).unwrap();
        let tape = Tape::inference();
        let b = Binder::new(&tape, &model.store);
        let f = model.features(&b, &s, false).unwrap();
        let sel = model.select_for_training(&f, &coarse_masks(&s)).unwrap();
        assert_eq!(sel.ids, (0..s.n()).collect::<Vec<_>>());
        let p = model.predict(&s).unwrap();
        assert_eq!(p.ids, sel.ids);
        assert_eq!(p.output.n, s.n());
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_model() {
        let dir = tempfile::tempdir().unwrap();
        let m = OrderModel::new(tiny_config(Some(AdapterSpec {
            mode: AdapterMode::AttnAndFfn,
            bottleneck: 2,
        })))
        .unwrap();
        m.save(dir.path(), Default::default()).unwrap();
        let back = OrderModel::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.store.len(), m.store.len());
        for id in m.store.ids() {
            let a = m.store.get(id).data().iter().map(|&v| v as f32 as f64);
            assert!(a.eq(back.store.get(id).data().iter().copied()));
        }
    }

    #[test]
    fn freezing_keeps_adapters_trainable() {
        let mut m = OrderModel::new(tiny_config(Some(AdapterSpec {
            mode: AdapterMode::FfnOnly,
            bottleneck: 2,
        })))
        .unwrap();
        m.freeze_backbone();
        for (_, p) in m.store.iter() {
            let expect = p.name.starts_with("head.") || p.name.contains(".adapter_");
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
        m.backbone_only();
        for (_, p) in m.store.iter() {
            assert_eq!(p.trainable, p.name.starts_with("backbone.") && !p.name.contains(".adapter_"));
        }
    }
}
