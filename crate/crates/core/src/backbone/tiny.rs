//! Small learned encoder with the same output contract as the oracle.
//!
//! Patch embedding (one token per quarter-resolution cell) plus a learned
//! positional embedding, self-attention layers over the pixel tokens, learned
//! queries cross-attending to them, and linear read-outs for `Q`, `P` and the
//! confidence logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneOutput;
use crate::error::{dim_err, Error, Result};
use crate::metrics::hungarian;
use crate::order::Bitmap;
use crate::synth::FEATURE_STRIDE;
use crate::tensor::nn::{Adapter, Binder, Init, LayerConfig, Linear, ParamId, ParamStore, TransformerLayer};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Where adapters go inside the backbone's transformer layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// After every feed-forward block.
    #[default]
    FfnOnly,
    /// After every attention block and every feed-forward block.
    AttnAndFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyBackboneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub queries: usize,
}

impl Default for TinyBackboneConfig {
    fn default() -> Self {
        TinyBackboneConfig {
            width: 64,
            height: 64,
            channels: 64,
            heads: 4,
            ffn_dim: 128,
            layers: 2,
            queries: 16,
        }
    }
}

impl TinyBackboneConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.width / FEATURE_STRIDE, self.height / FEATURE_STRIDE)
    }
}

#[derive(Clone, Debug)]
pub struct TinyBackbone {
    pub cfg: TinyBackboneConfig,
    patch_embed: Linear,
    position: ParamId,
    encoder: Vec<TransformerLayer>,
    query_embed: ParamId,
    decoder: TransformerLayer,
    pixel_head: Linear,
    mask_head: Linear,
    confidence_head: Linear,
}

/// Differentiable backbone outputs.
pub struct TinyOutput<'t> {
    /// `[N_q × C]`.
    pub q: Var<'t>,
    /// Pixel tokens `[h·w × C]`, i.e. `Pᵀ`.
    pub pixels: Var<'t>,
    /// `[N_q × 1]`.
    pub confidence_logits: Var<'t>,
}

impl TinyOutput<'_> {
    pub fn to_output(&self, cfg: &TinyBackboneConfig) -> BackboneOutput {
        let (w, h) = cfg.grid();
        BackboneOutput {
            q: (*self.q.value()).clone(),
            p: self.pixels.value().transpose().expect("pixel tokens are rank 2"),
            confidences: self.confidence_logits.value().data().iter().map(|&x| sigmoid(x)).collect(),
            height: h,
            width: w,
        }
    }
}

impl TinyBackbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TinyBackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.width % FEATURE_STRIDE != 0 || cfg.height % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!("image {}×{} is not a multiple of {FEATURE_STRIDE}", cfg.width, cfg.height)));
        }
        let c = cfg.channels;
        let (w, h) = cfg.grid();
        let layer = LayerConfig {
            dim: c,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
            zero_residual: false,
        };
        let patch = 3 * FEATURE_STRIDE * FEATURE_STRIDE;
        let small = |rng: &mut dyn rand::RngCore, rows: usize| {
            let data = (0..rows * c).map(|_| rng.gen_range(-0.1..0.1)).collect();
            Tensor::new([rows, c], data).expect("embedding shape")
        };
        Ok(TinyBackbone {
            cfg,
            patch_embed: Linear::new(store, &format!("{name}.patch_embed"), patch, c, Init::Xavier, rng),
            position: store.add(format!("{name}.position"), small(rng, w * h)),
            encoder: (0..cfg.layers)
                .map(|l| TransformerLayer::new(store, &format!("{name}.encoder.{l}"), layer, Init::Xavier, rng))
                .collect::<Result<_>>()?,
            query_embed: store.add(format!("{name}.query_embed"), small(rng, cfg.queries)),
            decoder: TransformerLayer::new(store, &format!("{name}.decoder"), layer, Init::Xavier, rng)?,
            pixel_head: Linear::new(store, &format!("{name}.pixel_head"), c, c, Init::Xavier, rng),
            mask_head: Linear::new(store, &format!("{name}.mask_head"), c, c, Init::Xavier, rng),
            confidence_head: Linear::new(store, &format!("{name}.confidence_head"), c, 1, Init::Xavier, rng),
        })
    }

    /// Inserts fresh adapters into every transformer layer. Their up
    /// projections start at zero, so outputs are unchanged until trained.
    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        mode: AdapterMode,
        bottleneck: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be at least 1".into()));
        }
        let on_attention = mode == AdapterMode::AttnAndFfn;
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            layer.attach_adapters(store, &format!("{name}.encoder.{l}"), bottleneck, on_attention, rng);
        }
        self.decoder.attach_adapters(store, &format!("{name}.decoder"), bottleneck, on_attention, rng);
        Ok(())
    }

    pub fn adapters(&self) -> Vec<&Adapter> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.decoder))
            .flat_map(|l| l.adapter_attn.iter().chain(l.adapter_ffn.iter()))
            .collect()
    }

    /// Non-overlapping `4×4×3` patches, one row per quarter-resolution cell.
    pub fn patchify(&self, image: &[f64]) -> Result<Tensor> {
        let (w, h) = (self.cfg.width, self.cfg.height);
        if image.len() != w * h * 3 {
            return Err(dim_err!("image has {} values, expected {w}×{h}×3", image.len()));
        }
        let (gw, gh) = self.cfg.grid();
        let s = FEATURE_STRIDE;
        let mut data = Vec::with_capacity(gw * gh * s * s * 3);
        for cy in 0..gh {
            for cx in 0..gw {
                for y in cy * s..(cy + 1) * s {
                    let start = (y * w + cx * s) * 3;
                    data.extend_from_slice(&image[start..start + s * 3]);
                }
            }
        }
        Tensor::new([gw * gh, s * s * 3], data)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, image: &[f64]) -> Result<TinyOutput<'t>> {
        let patches = b.tape().constant(self.patchify(image)?);
        let mut x = self.patch_embed.forward(b, &patches)?.add(&b.param(self.position))?;
        for layer in &self.encoder {
            x = layer.forward(b, &x, None, None)?;
        }
        let queries = self.decoder.forward(b, &b.param(self.query_embed), Some(&x), None)?;
        Ok(TinyOutput {
            q: self.mask_head.forward(b, &queries)?,
            pixels: self.pixel_head.forward(b, &x)?,
            confidence_logits: self.confidence_head.forward(b, &queries)?,
        })
    }

    /// Inference forward on a throwaway tape.
    pub fn run(&self, store: &ParamStore, image: &[f64]) -> Result<BackboneOutput> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, store);
        Ok(self.forward(&b, image)?.to_output(&self.cfg))
    }
}

/// Matching cost and loss terms between one predicted mask row and a target.
fn bce_dice_value(logits: &[f64], target: &[bool]) -> f64 {
    let n = logits.len() as f64;
    let (mut bce, mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target) {
        let t = t as u8 as f64;
        bce += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        let p = sigmoid(x);
        inter += p * t;
        ps += p;
        ts += t;
    }
    bce / n + 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0)
}

/// Set-prediction mask loss: queries are matched to ground-truth masks by
/// minimum BCE + dice cost; matched queries get BCE + dice on their masks and
/// confidence target 1, the rest confidence target 0. Returns the loss and
/// the matching `(query, gt)` pairs.
pub fn mask_loss<'t>(out: &TinyOutput<'t>, gt: &[Bitmap]) -> Result<(Var<'t>, Vec<(usize, usize)>)> {
    let logits = out.q.matmul_nt(&out.pixels)?;
    let (nq, hw) = logits.dims2()?;
    if let Some(m) = gt.iter().find(|m| m.bits().len() != hw) {
        return Err(dim_err!("ground-truth mask has {} cells, P has {hw}", m.bits().len()));
    }
    let values = logits.value();
    let mut cost = Vec::with_capacity(nq * gt.len());
    for k in 0..nq {
        for g in gt {
            cost.push(bce_dice_value(values.row(k), g.bits()));
        }
    }
    let assignment = hungarian(&cost, nq, gt.len())?;
    let mut terms = Vec::new();
    let mut conf_targets = vec![0.0; nq];
    for &(k, j) in &assignment.pairs {
        conf_targets[k] = 1.0;
        let row = logits.select_rows(&[k])?;
        let t: Vec<f64> = gt[j].bits().iter().map(|&b| b as u8 as f64).collect();
        let tsum: f64 = t.iter().sum();
        let bce = row.bce_with_logits(&t, &vec![1.0 / hw as f64; hw])?;
        let target = row.tape().constant(Tensor::new([1, hw], t)?);
        let p = row.sigmoid();
        let num = p.mul(&target)?.sum().scale(2.0).add_scalar(1.0);
        let den = p.sum().add_scalar(tsum + 1.0);
        let dice = num.div(&den)?.scale(-1.0).add_scalar(1.0);
        terms.push(bce.add(&dice)?);
    }
    let matched = terms.len().max(1) as f64;
    let mut loss = out
        .confidence_logits
        .bce_with_logits(&conf_targets, &vec![1.0 / nq as f64; nq])?;
    for t in terms {
        loss = loss.add(&t.scale(1.0 / matched))?;
    }
    Ok((loss, assignment.pairs))
}
