//! Parameters and the layers built from them.
//!
//! Parameters live in a [`ParamStore`] outside any tape. A [`Binder`] lazily
//! places each parameter on a tape the first time a layer asks for it and
//! collects the gradients afterwards, so several tapes (one per sample) can
//! read the same store concurrently.

use std::cell::RefCell;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradient buffers, indexed like the store.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Grads {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0)?.as_deref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Adds `other` into `self`, growing as needed.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Binds store parameters onto one tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of the bound parameters after `tape.backward`.
    pub fn grads(&self) -> Grads {
        let bound = self.bound.borrow();
        Grads {
            slots: bound
                .iter()
                .map(|v| v.and_then(|v| v.grad()).map(Tensor::into_data))
                .collect(),
        }
    }
}

/// Losses and summed gradients of `f` over `items`. Each item runs on its
/// own tape, in parallel; results are combined in item order so the sum does
/// not depend on the thread count.
pub fn batch_grads<T, F>(store: &ParamStore, items: &[T], f: F) -> Result<(Vec<f64>, Grads)>
where
    T: Sync,
    F: for<'t, 's> Fn(&Binder<'t, 's>, &T) -> Result<Var<'t>> + Sync,
{
    let per: Vec<Result<(f64, Grads)>> = items
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            let b = Binder::new(&tape, store);
            let loss = f(&b, item)?;
            let value = loss.value().item();
            tape.backward(loss)?;
            Ok((value, b.grads()))
        })
        .collect();
    let mut losses = Vec::with_capacity(items.len());
    let mut total = Grads::new(store.len());
    for r in per {
        let (l, g) = r?;
        losses.push(l);
        total.accumulate(&g);
    }
    Ok((losses, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Glorot uniform, bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Kaiming uniform with `a = sqrt(5)`, bound `1 / sqrt(fan_in)`.
    KaimingUniform,
    Zeros,
}

pub fn init_weight(init: Init, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = match init {
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::KaimingUniform => 1.0 / (fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    let data = (0..fan_in * fan_out)
        .map(|_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..bound) })
        .collect();
    Tensor::new([fan_in, fan_out], data).expect("weight shape")
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(init, in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&b.param(self.weight))?.add_row(&b.param(self.bias))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&b.param(self.gamma), &b.param(self.beta), Self::EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.apply(&h);
            }
            h = layer.forward(b, &h)?;
        }
        Ok(h)
    }
}

/// Residual bottleneck `x + up(relu(down(x)))`. The up projection starts at
/// zero, making a fresh adapter an exact identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub const DEFAULT_BOTTLENECK: usize = 64;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        Adapter {
            down: Linear::new(store, &format!("{name}.down"), dim, bottleneck, Init::KaimingUniform, rng),
            up: Linear::new(store, &format!("{name}.up"), bottleneck, dim, Init::Zeros, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.down.forward(b, x)?.relu();
        x.add(&self.up.forward(b, &h)?)
    }
}

/// Multi-head scaled dot-product attention with an optional additive mask
/// of shape `[queries×keys]` shared by all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        init: Init,
        out_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, init, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, init, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, out_init, rng),
            heads,
        })
    }

    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        queries: &Var<'t>,
        memory: &Var<'t>,
        addmask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let (_, dim) = queries.dims2()?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(b, queries)?;
        let k = self.key.forward(b, memory)?;
        let v = self.value.forward(b, memory)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dh, dh)?;
            let kh = k.narrow_cols(h * dh, dh)?;
            let vh = v.narrow_cols(h * dh, dh)?;
            let scores = qh.matmul_nt(&kh)?.scale(scale);
            let (attn, _) = scores.masked_softmax(addmask)?;
            outs.push(attn.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        self.out.forward(b, &merged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Start attention and FFN output projections at zero so the layer is an
    /// identity map.
    pub zero_residual: bool,
}

/// Pre-norm transformer layer:
/// `x + Attn(LN(x))` then `x + FFN(LN(x))`, FFN = Linear·GELU·Linear.
/// With `memory`, attention reads keys and values from it (cross-attention).
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub adapter_attn: Option<Adapter>,
    pub adapter_ffn: Option<Adapter>,
    pub cfg: LayerConfig,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: LayerConfig, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let out_init = if cfg.zero_residual { Init::Zeros } else { init };
        Ok(TransformerLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, init, out_init, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn.0"), cfg.dim, cfg.ffn_dim, init, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.1"), cfg.ffn_dim, cfg.dim, out_init, rng),
            adapter_attn: None,
            adapter_ffn: None,
            cfg,
        })
    }

    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: &Var<'t>,
        memory: Option<&Var<'t>>,
        addmask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let (_, dim) = x.dims2()?;
        if dim != self.cfg.dim {
            return Err(dim_err!("layer expects {} channels, got {}", self.cfg.dim, dim));
        }
        let h = self.norm_attn.forward(b, x)?;
        let mut a = match memory {
            Some(m) => self.attn.forward(b, &h, m, addmask)?,
            None => self.attn.forward(b, &h, &h, addmask)?,
        };
        if let Some(ad) = &self.adapter_attn {
            a = ad.forward(b, &a)?;
        }
        let x = x.add(&a)?;
        let h = self.norm_ffn.forward(b, &x)?;
        let mut f = self.ffn_out.forward(b, &self.ffn_in.forward(b, &h)?.gelu())?;
        if let Some(ad) = &self.adapter_ffn {
            f = ad.forward(b, &f)?;
        }
        x.add(&f)
    }

    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        bottleneck: usize,
        on_attention: bool,
        rng: &mut impl Rng,
    ) {
        let dim = self.cfg.dim;
        self.adapter_ffn = Some(Adapter::new(store, &format!("{name}.adapter_ffn"), dim, bottleneck, rng));
        if on_attention {
            self.adapter_attn = Some(Adapter::new(store, &format!("{name}.adapter_attn"), dim, bottleneck, rng));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_tokens(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
        Tensor::new([rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_residual_layer_is_identity() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = LayerConfig {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            zero_residual: true,
        };
        let layer = TransformerLayer::new(&mut store, "l", cfg, Init::Xavier, &mut r).unwrap();
        let x = random_tokens(3, 8, &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&b, &xv, None, None).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 1, Init::Xavier, Init::Xavier, &mut r).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let x = tape.constant(random_tokens(1, 4, &mut r));
        let q = attn.query.forward(&b, &x).unwrap();
        let k = attn.key.forward(&b, &x).unwrap();
        let (w, _) = q.matmul_nt(&k).unwrap().masked_softmax(None).unwrap();
        assert_eq!(w.value().data(), &[1.0]);
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut store = ParamStore::new();
        let err = MultiHeadAttention::new(&mut store, "a", 6, 4, Init::Xavier, Init::Xavier, &mut rng());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let ad = Adapter::new(&mut store, "ad", 8, Adapter::DEFAULT_BOTTLENECK, &mut r);
        assert_eq!(Adapter::DEFAULT_BOTTLENECK, 64);
        let x = random_tokens(5, 8, &mut r);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let y = ad.forward(&b, &tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
        assert!(store.get(ad.up.weight).data().iter().all(|&w| w == 0.0));
        assert!(store.get(ad.down.bias).data().iter().all(|&w| w == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        let down = store.get(ad.down.weight).data();
        assert!(down.iter().all(|w| w.abs() <= bound) && down.iter().any(|&w| w != 0.0));
    }
}
