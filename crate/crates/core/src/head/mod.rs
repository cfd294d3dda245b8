//! Holistic order head.
//!
//! From mask embeddings `Q`, the per-pixel embedding `P` and the decoded
//! masks `M`, one forward pass yields the occlusion and depth logits of every
//! ordered instance pair:
//!
//! 1. descriptors: each instance's region of `P` goes through masked
//!    self-attention layers and is max-pooled to one vector `D_i`;
//! 2. interaction: `[D; Q]` passes through transformer layers and is split
//!    back into halves, mapped by two MLPs to `D*` and `Q*`;
//! 3. compatibility `G = Q*·D*ᵀ` feeds per-entry task MLPs.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::metrics::Assignment;
use crate::order::{Bitmap, DepthMatrix, OcclusionMatrix, FRONT, NOT_FRONT, OVERLAP};
use crate::tensor::nn::{Activation, Binder, Init, LayerConfig, LayerNorm, Mlp, ParamStore, TransformerLayer};
use crate::tensor::{Tape, Tensor, Var, MASK_NEG};

/// Confidence a query must exceed to be kept at inference.
pub const CONFIDENCE_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModality {
    QueriesQueries,
    DescriptorsDescriptors,
    QueriesDescriptors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Occlusion,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub input_modality: InputModality,
    pub aux_loss: bool,
    pub tasks: Vec<Task>,
    /// Hidden width of the per-entry task MLPs.
    pub task_hidden: usize,
    /// Number of channel groups in the compatibility product; each group
    /// contributes one `n×n` map. `1` is the plain `Q*·D*ᵀ`.
    pub compat_groups: usize,
    /// Start the interaction decoder's residual branches at zero.
    pub zero_residual_decoder: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 1,
            decoder_layers: 2,
            input_modality: InputModality::QueriesDescriptors,
            aux_loss: true,
            tasks: vec![Task::Occlusion, Task::Depth],
            task_hidden: 64,
            compat_groups: 1,
            zero_residual_decoder: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("{} channels do not split into {} heads", self.dim, self.heads));
        }
        if self.decoder_layers == 0 {
            return bad("the interaction decoder needs at least one layer".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        if t.len() != self.tasks.len() {
            return bad("tasks must not repeat".into());
        }
        if self.compat_groups == 0 || self.dim % self.compat_groups != 0 {
            return bad(format!("{} channels do not split into {} groups", self.dim, self.compat_groups));
        }
        if self.task_hidden == 0 || self.ffn_dim == 0 {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn has(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }
}

/// How selected instances are chosen from the backbone's queries.
pub enum Selection<'a> {
    /// Ground-truth order: gt instance `j` uses the query assigned to it
    /// (assignment rows are queries, columns ground-truth instances).
    Training { assignment: &'a Assignment, n_gt: usize },
    /// Queries whose confidence exceeds the threshold, in query order.
    Inference { threshold: f64 },
}

/// Picks the query rows and masks the head will order.
pub fn select_tokens(masks: &[Bitmap], confidences: &[f64], selection: Selection<'_>) -> Result<(Vec<usize>, Vec<Bitmap>)> {
    if masks.len() != confidences.len() {
        return Err(dim_err!("{} masks for {} confidences", masks.len(), confidences.len()));
    }
    let ids: Vec<usize> = match selection {
        Selection::Training { assignment, n_gt } => (0..n_gt)
            .map(|j| {
                assignment
                    .row_of(j)
                    .ok_or_else(|| Error::Contract(format!("ground-truth instance {j} has no assigned query")))
            })
            .collect::<Result<_>>()?,
        Selection::Inference { threshold } => (0..confidences.len()).filter(|&k| confidences[k] > threshold).collect(),
    };
    if ids.len() < 2 {
        return Err(Error::NothingToOrder(ids.len()));
    }
    let selected = ids.iter().map(|&k| masks[k].clone()).collect();
    Ok((ids, selected))
}

/// Per-instance copies of `P` (`[C × h·w]`) zeroed outside each mask, with a
/// flag for every empty mask.
pub fn mask_pixel_embedding(p: &Tensor, masks: &[Bitmap]) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let (c, hw) = p.dims2()?;
    let mut out = Vec::with_capacity(masks.len());
    let mut empty = Vec::with_capacity(masks.len());
    for m in masks {
        if m.bits().len() != hw {
            return Err(dim_err!("mask has {} cells, P has {hw}", m.bits().len()));
        }
        let mut data = p.data().to_vec();
        for ch in 0..c {
            for (k, &b) in m.bits().iter().enumerate() {
                if !b {
                    data[ch * hw + k] = 0.0;
                }
            }
        }
        out.push(Tensor::new([c, hw], data)?);
        empty.push(m.is_empty());
    }
    Ok((out, empty))
}

/// Descriptor encoder evaluation strategy. Both give the same descriptors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DescriptorPath {
    /// Only in-mask tokens, all instances in one block-diagonal attention.
    #[default]
    Compact,
    /// Every pixel token per instance, out-of-mask keys masked with the
    /// additive sentinel.
    Dense,
}

/// Logits of one decoder layer's read-out, `n²` rows in row-major pair order.
#[derive(Clone, Copy)]
pub struct LayerLogits<'t> {
    /// `[n² × 1]`.
    pub occlusion: Option<Var<'t>>,
    /// `[n² × 3]`, classes not-front / front / overlap.
    pub depth: Option<Var<'t>>,
}

pub struct HeadForward<'t> {
    /// One entry per supervised decoder layer; the last is the prediction.
    pub layers: Vec<LayerLogits<'t>>,
    pub descriptors: Var<'t>,
    pub empty_masks: Vec<bool>,
}

impl<'t> HeadForward<'t> {
    pub fn last(&self) -> &LayerLogits<'t> {
        self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Debug)]
pub struct OrderHead {
    pub cfg: HeadConfig,
    encoder: Vec<TransformerLayer>,
    decoder: Vec<TransformerLayer>,
    out_norm: LayerNorm,
    mlp_phi: Mlp,
    mlp_theta: Mlp,
    occlusion_mlp: Option<Mlp>,
    depth_mlp: Option<Mlp>,
    forwards: AtomicUsize,
}

impl Clone for OrderHead {
    fn clone(&self) -> Self {
        OrderHead {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            out_norm: self.out_norm.clone(),
            mlp_phi: self.mlp_phi.clone(),
            mlp_theta: self.mlp_theta.clone(),
            occlusion_mlp: self.occlusion_mlp.clone(),
            depth_mlp: self.depth_mlp.clone(),
            forwards: AtomicUsize::new(0),
        }
    }
}

impl OrderHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let layer = |zero| LayerConfig {
            dim: c,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
            zero_residual: zero,
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|l| TransformerLayer::new(store, &format!("{name}.encoder.{l}"), layer(false), Init::Xavier, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("{name}.decoder.{l}"),
                    layer(cfg.zero_residual_decoder),
                    Init::Xavier,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let g = cfg.compat_groups;
        let h = cfg.task_hidden;
        let task = |store: &mut ParamStore, rng: &mut _, t: Task, name: &str, out: usize| {
            cfg.has(t)
                .then(|| Mlp::new(store, name, &[g, h, out], Activation::Relu, Init::Xavier, rng))
        };
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), c);
        let mlp_phi = Mlp::new(store, &format!("{name}.mlp_phi"), &[c, c, c], Activation::Gelu, Init::Xavier, rng);
        let mlp_theta = Mlp::new(store, &format!("{name}.mlp_theta"), &[c, c, c], Activation::Gelu, Init::Xavier, rng);
        let occlusion_mlp = task(store, rng, Task::Occlusion, &format!("{name}.occlusion_mlp"), 1);
        let depth_mlp = task(store, rng, Task::Depth, &format!("{name}.depth_mlp"), 3);
        Ok(OrderHead {
            cfg,
            encoder,
            decoder,
            out_norm,
            mlp_phi,
            mlp_theta,
            occlusion_mlp,
            depth_mlp,
            forwards: AtomicUsize::new(0),
        })
    }

    /// Forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Mask descriptors `D` (`[n × C]`) from pixel tokens `[h·w × C]`.
    pub fn descriptors<'t>(
        &self,
        b: &Binder<'t, '_>,
        pixels: &Var<'t>,
        masks: &[Bitmap],
        path: DescriptorPath,
    ) -> Result<(Var<'t>, Vec<bool>)> {
        let (hw, c) = pixels.dims2()?;
        if c != self.cfg.dim {
            return Err(dim_err!("head expects {} channels, pixels have {c}", self.cfg.dim));
        }
        if let Some(m) = masks.iter().find(|m| m.bits().len() != hw) {
            return Err(dim_err!("mask has {} cells, P has {hw}", m.bits().len()));
        }
        let positions: Vec<Vec<usize>> = masks
            .iter()
            .map(|m| m.bits().iter().enumerate().filter(|(_, &v)| v).map(|(k, _)| k).collect())
            .collect();
        let empty: Vec<bool> = positions.iter().map(|p| p.is_empty()).collect();
        let zero = || b.tape().constant(Tensor::zeros([1, c]));
        let rows = match path {
            DescriptorPath::Compact => {
                let flat: Vec<usize> = positions.concat();
                if flat.is_empty() {
                    vec![zero(); masks.len()]
                } else {
                    let mut x = pixels.select_rows(&flat)?;
                    if !self.encoder.is_empty() {
                        let t = flat.len();
                        let mut segment = Vec::with_capacity(t);
                        for (i, p) in positions.iter().enumerate() {
                            segment.extend(std::iter::repeat(i).take(p.len()));
                        }
                        let mut mask = vec![MASK_NEG; t * t];
                        for r in 0..t {
                            for k in 0..t {
                                if segment[r] == segment[k] {
                                    mask[r * t + k] = 0.0;
                                }
                            }
                        }
                        let mask = Tensor::new([t, t], mask)?;
                        for layer in &self.encoder {
                            x = layer.forward(b, &x, None, Some(&mask))?;
                        }
                    }
                    let mut start = 0;
                    let mut rows = Vec::with_capacity(masks.len());
                    for p in &positions {
                        rows.push(if p.is_empty() {
                            zero()
                        } else {
                            x.narrow_rows(start, p.len())?.max_rows()?
                        });
                        start += p.len();
                    }
                    rows
                }
            }
            DescriptorPath::Dense => {
                let mut rows = Vec::with_capacity(masks.len());
                for (m, p) in masks.iter().zip(&positions) {
                    if p.is_empty() {
                        rows.push(zero());
                        continue;
                    }
                    let keep: Vec<f64> = m.bits().iter().flat_map(|&v| std::iter::repeat(v as u8 as f64).take(c)).collect();
                    let mut x = pixels.mul(&b.tape().constant(Tensor::new([hw, c], keep)?))?;
                    let addmask: Vec<f64> = (0..hw)
                        .flat_map(|_| m.bits().iter().map(|&v| if v { 0.0 } else { MASK_NEG }))
                        .collect();
                    let addmask = Tensor::new([hw, hw], addmask)?;
                    for layer in &self.encoder {
                        x = layer.forward(b, &x, None, Some(&addmask))?;
                    }
                    rows.push(x.select_rows(p)?.max_rows()?);
                }
                rows
            }
        };
        Ok((Var::concat_rows(&rows)?, empty))
    }

    /// Pair logits for the interaction of `queries` (`[n × C]`) and
    /// `descriptors` (`[n × C]`).
    pub fn interact<'t>(&self, b: &Binder<'t, '_>, queries: &Var<'t>, descriptors: &Var<'t>) -> Result<Vec<LayerLogits<'t>>> {
        let (n, c) = queries.dims2()?;
        if descriptors.dims2()? != (n, c) || c != self.cfg.dim {
            return Err(dim_err!(
                "queries {:?} and descriptors {:?} must both be n×{}",
                queries.shape(),
                descriptors.shape(),
                self.cfg.dim
            ));
        }
        let (first, second) = match self.cfg.input_modality {
            InputModality::QueriesDescriptors => (descriptors, queries),
            InputModality::QueriesQueries => (queries, queries),
            InputModality::DescriptorsDescriptors => (descriptors, descriptors),
        };
        let mut e = Var::concat_rows(&[*first, *second])?;
        let mut out = Vec::new();
        let last = self.decoder.len() - 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            e = layer.forward(b, &e, None, None)?;
            if self.cfg.aux_loss || l == last {
                out.push(self.read_out(b, &e, n)?);
            }
        }
        Ok(out)
    }

    fn read_out<'t>(&self, b: &Binder<'t, '_>, e: &Var<'t>, n: usize) -> Result<LayerLogits<'t>> {
        let e = self.out_norm.forward(b, e)?;
        let d_star = self.mlp_theta.forward(b, &e.narrow_rows(0, n)?)?;
        let q_star = self.mlp_phi.forward(b, &e.narrow_rows(n, n)?)?;
        let features = compatibility(&q_star, &d_star, self.cfg.compat_groups)?;
        Ok(LayerLogits {
            occlusion: self.occlusion_mlp.as_ref().map(|m| m.forward(b, &features)).transpose()?,
            depth: self.depth_mlp.as_ref().map(|m| m.forward(b, &features)).transpose()?,
        })
    }

    /// Full head pass: `queries` are the selected rows of `Q` (`[n × C]`),
    /// `pixels` is `Pᵀ` (`[h·w × C]`), `masks` the selected masks.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        queries: &Var<'t>,
        pixels: &Var<'t>,
        masks: &[Bitmap],
        path: DescriptorPath,
    ) -> Result<HeadForward<'t>> {
        let (n, _) = queries.dims2()?;
        if n != masks.len() {
            return Err(dim_err!("{n} queries for {} masks", masks.len()));
        }
        if n < 2 {
            return Err(Error::NothingToOrder(n));
        }
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let (descriptors, empty_masks) = self.descriptors(b, pixels, masks, path)?;
        let layers = self.interact(b, queries, &descriptors)?;
        Ok(HeadForward {
            layers,
            descriptors,
            empty_masks,
        })
    }

    /// Inference on plain tensors: returns the final layer's logits.
    pub fn predict(&self, store: &ParamStore, queries: &Tensor, pixels: &Tensor, masks: &[Bitmap]) -> Result<HeadOutput> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, store);
        let q = tape.constant(queries.clone());
        let p = tape.constant(pixels.clone());
        let out = self.forward(&b, &q, &p, masks, DescriptorPath::Compact)?;
        Ok(HeadOutput::from_logits(masks.len(), out.last()))
    }
}

/// `G = Q*·D*ᵀ` per channel group, as `[n² × groups]` features (row
/// `i·n + j` holds the entries for pair `(i, j)`).
pub fn compatibility<'t>(q_star: &Var<'t>, d_star: &Var<'t>, groups: usize) -> Result<Var<'t>> {
    let (n, c) = q_star.dims2()?;
    if d_star.dims2()? != (n, c) || groups == 0 || c % groups != 0 {
        return Err(dim_err!("compatibility of {:?} and {:?} in {groups} groups", q_star.shape(), d_star.shape()));
    }
    if groups == 1 {
        return q_star.matmul_nt(d_star)?.reshape([n * n, 1]);
    }
    let w = c / groups;
    let maps = (0..groups)
        .map(|g| q_star.narrow_cols(g * w, w)?.matmul_nt(&d_star.narrow_cols(g * w, w)?)?.reshape([n * n, 1]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&maps)
}

/// Final-layer logits detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub n: usize,
    /// Row-major `n×n`.
    pub occlusion_logits: Option<Vec<f64>>,
    /// Row-major `n×n×3`.
    pub depth_logits: Option<Vec<f64>>,
}

impl HeadOutput {
    pub fn from_logits(n: usize, l: &LayerLogits<'_>) -> Self {
        HeadOutput {
            n,
            occlusion_logits: l.occlusion.map(|v| v.value().data().to_vec()),
            depth_logits: l.depth.map(|v| v.value().data().to_vec()),
        }
    }

    /// `i` occludes `j` iff `σ(logit) > 0.5`.
    pub fn occlusion(&self) -> Result<OcclusionMatrix> {
        let logits = self
            .occlusion_logits
            .as_ref()
            .ok_or_else(|| Error::Config("this head has no occlusion task".into()))?;
        let n = self.n;
        let mut m = OcclusionMatrix::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && logits[i * n + j] > 0.0 {
                    m.set(i, j, 1);
                }
            }
        }
        Ok(m)
    }

    fn depth_logits(&self) -> Result<&[f64]> {
        self.depth_logits
            .as_deref()
            .ok_or_else(|| Error::Config("this head has no depth task".into()))
    }

    /// Per-entry argmax (ties to the lower class). May violate antisymmetry.
    pub fn depth(&self) -> Result<DepthMatrix> {
        let logits = self.depth_logits()?;
        let n = self.n;
        let mut m = DepthMatrix::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let l = &logits[(i * n + j) * 3..(i * n + j) * 3 + 3];
                    let best = (0..3).fold(0, |b, k| if l[k] > l[b] { k } else { b });
                    m.set(i, j, best as i8);
                }
            }
        }
        Ok(m)
    }

    /// Valid depth matrix: each unordered pair takes the relation
    /// (front/behind/overlap) with the largest summed log-probability of
    /// its two entries.
    pub fn coherent_depth(&self) -> Result<DepthMatrix> {
        let logits = self.depth_logits()?;
        let n = self.n;
        let log_probs = |i: usize, j: usize| -> [f64; 3] {
            let l = &logits[(i * n + j) * 3..(i * n + j) * 3 + 3];
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            [l[0] - lse, l[1] - lse, l[2] - lse]
        };
        let mut m = DepthMatrix::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (log_probs(i, j), log_probs(j, i));
                let front = a[FRONT as usize] + b[NOT_FRONT as usize];
                let behind = a[NOT_FRONT as usize] + b[FRONT as usize];
                let overlap = a[OVERLAP as usize] + b[OVERLAP as usize];
                if front >= behind && front >= overlap {
                    m.set_front(i, j);
                } else if behind >= overlap {
                    m.set_front(j, i);
                } else {
                    m.set_overlap(i, j);
                }
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            task_hidden: 6,
            ..HeadConfig::default()
        }
    }

    /// Disjoint masks on a 4×4 grid.
    fn masks() -> Vec<Bitmap> {
        let mut out = Vec::new();
        for (x0, y0, x1, y1) in [(0, 0, 2, 2), (2, 0, 4, 1), (0, 3, 3, 4)] {
            let mut b = Bitmap::new(4, 4);
            for y in y0..y1 {
                for x in x0..x1 {
                    b.set(x, y, true);
                }
            }
            out.push(b);
        }
        out
    }

    #[test]
    fn selection_rules() {
        let m = masks();
        let (ids, _) = select_tokens(&m, &[0.9, 0.9, 0.9], Selection::Inference { threshold: 0.8 }).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(matches!(
            select_tokens(&m, &[0.9, 0.8, 0.1], Selection::Inference { threshold: 0.8 }),
            Err(Error::NothingToOrder(1))
        ));
        let a = Assignment {
            pairs: vec![(0, 2), (1, 0), (2, 1)],
            total_cost: 0.0,
        };
        let (ids, _) = select_tokens(&m, &[0.0; 3], Selection::Training { assignment: &a, n_gt: 3 }).unwrap();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn masked_pixel_embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random(3, 16, &mut rng);
        let full = Bitmap::from_bits(4, 4, vec![true; 16]).unwrap();
        let (out, empty) = mask_pixel_embedding(&p, &[full, Bitmap::new(4, 4)]).unwrap();
        assert_eq!(out[0], p);
        assert!(out[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(empty, vec![false, true]);
        let m = masks();
        let (out, _) = mask_pixel_embedding(&p, &m[..2]).unwrap();
        assert!(out[0].data().iter().zip(out[1].data()).all(|(a, b)| a * b == 0.0));
    }

    #[test]
    fn max_pool_without_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            encoder_layers: 0,
            ..small_cfg()
        };
        let head = OrderHead::new(&mut store, "head", cfg, &mut rng).unwrap();
        let mut pix = Tensor::zeros([16, 8]);
        // Region of mask 0 is cells 0, 1, 4, 5.
        for (cell, v) in [(0, 1.0), (1, 3.0), (4, -2.0), (5, -2.0)] {
            pix.data_mut()[cell * 8] = v;
        }
        pix.data_mut()[15 * 8] = 100.0;
        let tape = Tape::inference();
        let b = Binder::new(&tape, &store);
        let (d, empty) = head
            .descriptors(&b, &tape.constant(pix), &[masks()[0].clone(), Bitmap::new(4, 4)], DescriptorPath::Compact)
            .unwrap();
        assert_eq!(d.value().at(0, 0), 3.0);
        assert_eq!(d.value().row(1), &[0.0; 8]);
        assert_eq!(empty, vec![false, true]);
    }

    #[test]
    fn compact_and_dense_descriptors_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = OrderHead::new(&mut store, "head", small_cfg(), &mut rng).unwrap();
        let pix = random(16, 8, &mut rng);
        let tape = Tape::inference();
        let b = Binder::new(&tape, &store);
        let p = tape.constant(pix);
        let (a, _) = head.descriptors(&b, &p, &masks(), DescriptorPath::Compact).unwrap();
        let (d, _) = head.descriptors(&b, &p, &masks(), DescriptorPath::Dense).unwrap();
        for (x, y) in a.value().data().iter().zip(d.value().data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn compatibility_examples() {
        let tape = Tape::inference();
        let q = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let d = tape.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap());
        let g = compatibility(&q, &d, 1).unwrap();
        assert_eq!(g.value().data(), &[2.0, 0.0, 0.0, 3.0]);
        let g2 = compatibility(&q, &d.scale(2.0), 1).unwrap();
        assert_eq!(g2.value().data(), &[4.0, 0.0, 0.0, 6.0]);
        let g = compatibility(&q, &d, 2).unwrap();
        assert_eq!(g.value().shape(), &[4, 2]);
        assert_eq!(g.value().data(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn zero_residual_decoder_reads_out_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            zero_residual_decoder: true,
            aux_loss: false,
            ..small_cfg()
        };
        let head = OrderHead::new(&mut store, "head", cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let b = Binder::new(&tape, &store);
        let q = tape.constant(random(3, 8, &mut rng));
        let d = tape.constant(random(3, 8, &mut rng));
        let out = head.interact(&b, &q, &d).unwrap();
        let e = head.out_norm.forward(&b, &Var::concat_rows(&[d, q]).unwrap()).unwrap();
        let q_star = head.mlp_phi.forward(&b, &e.narrow_rows(3, 3).unwrap()).unwrap();
        let d_star = head.mlp_theta.forward(&b, &e.narrow_rows(0, 3).unwrap()).unwrap();
        let g = compatibility(&q_star, &d_star, 1).unwrap();
        let expect = head.occlusion_mlp.as_ref().unwrap().forward(&b, &g).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].occlusion.unwrap().value().data(), expect.value().data());
    }

    #[test]
    fn task_selection_and_aux_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            tasks: vec![Task::Occlusion],
            ..small_cfg()
        };
        let head = OrderHead::new(&mut store, "head", cfg, &mut rng).unwrap();
        let out = head
            .predict(&store, &random(3, 8, &mut rng), &random(16, 8, &mut rng), &masks())
            .unwrap();
        assert!(out.depth_logits.is_none());
        assert!(matches!(out.depth(), Err(Error::Config(_))));
        assert_eq!(head.forward_count(), 1);

        let mut store = ParamStore::new();
        let head = OrderHead::new(&mut store, "head", small_cfg(), &mut rng).unwrap();
        let tape = Tape::inference();
        let b = Binder::new(&tape, &store);
        let q = tape.constant(random(3, 8, &mut rng));
        let p = tape.constant(random(16, 8, &mut rng));
        let f = head.forward(&b, &q, &p, &masks(), DescriptorPath::Compact).unwrap();
        assert_eq!(f.layers.len(), 2);
        assert_eq!(f.last().depth.unwrap().shape(), vec![9, 3]);
    }

    #[test]
    fn permuting_instances_permutes_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = OrderHead::new(&mut store, "head", small_cfg(), &mut rng).unwrap();
        let q = random(3, 8, &mut rng);
        let p = random(16, 8, &mut rng);
        let m = masks();
        let perm = [2, 0, 1];
        let q_perm = Tensor::from_rows(&perm.map(|k| q.row(k).to_vec())).unwrap();
        let m_perm: Vec<Bitmap> = perm.iter().map(|&k| m[k].clone()).collect();
        let a = head.predict(&store, &q, &p, &m).unwrap();
        let b = head.predict(&store, &q_perm, &p, &m_perm).unwrap();
        let (la, lb) = (a.occlusion_logits.unwrap(), b.occlusion_logits.unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert!((lb[i * 3 + j] - la[perm[i] * 3 + perm[j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coherent_depth_is_always_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let out = HeadOutput {
                n,
                occlusion_logits: None,
                depth_logits: Some((0..n * n * 3).map(|_| rng.gen_range(-3.0..3.0)).collect()),
            };
            assert!(crate::order::validate_depth(&out.coherent_depth().unwrap()).is_empty());
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let head = OrderHead::new(&mut store, "head", small_cfg(), &mut rng).unwrap();
        let q = random(3, 8, &mut rng);
        let p = random(16, 8, &mut rng);
        let m = masks();
        let report = check_params(
            &store,
            |b| {
                let tape = b.tape();
                let f = head.forward(b, &tape.constant(q.clone()), &tape.constant(p.clone()), &m, DescriptorPath::Compact)?;
                let mut loss = f.descriptors.sum().scale(0.01);
                for l in &f.layers {
                    loss = loss.add(&l.occlusion.unwrap().bce_with_logits(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[1.0; 9])?)?;
                    loss = loss.add(&l.depth.unwrap().cross_entropy(&[0, 1, 2, 0, 0, 1, 2, 0, 0], &[1.0; 9])?)?;
                }
                Ok(loss)
            },
            1e-5,
            Some((4, &mut ChaCha8Rng::seed_from_u64(8))),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
