//! Pairwise order network: one forward pass per instance pair.
//!
//! The input is the image stacked with the two instance masks (5 channels).
//! Strided 3×3 convolutions, global max and mean pooling and an MLP give two
//! independent occlusion logits (A occludes B, B occludes A) and three depth
//! logits for A relative to B (not-front, front, overlap).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::order::{Bitmap, DepthMatrix, OcclusionMatrix, FRONT, NOT_FRONT, OVERLAP};
use crate::synth::SceneSample;
use crate::tensor::nn::{batch_grads, Activation, Binder, Init, Linear, Mlp, ParamStore};
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::{checkpoint, Tape, Tensor, Var, GATHER_ZERO};

pub const INPUT_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseConfig {
    pub width: usize,
    pub height: usize,
    /// Output channels of each stride-2 convolution.
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            width: 64,
            height: 64,
            channels: vec![16, 32, 32],
            hidden: 64,
        }
    }
}

/// 3×3 convolution, stride 2, zero padding 1, as im2col + matmul.
#[derive(Clone, Debug)]
struct Conv {
    linear: Linear,
    index: Arc<[usize]>,
    out_w: usize,
    out_h: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        (w, h, cin): (usize, usize, usize),
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
        let mut index = Vec::with_capacity(ow * oh * 9 * cin);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..cin {
                            index.push(if inside {
                                (iy as usize * w + ix as usize) * cin + c
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
        Conv {
            linear: Linear::new(store, name, 9 * cin, cout, Init::KaimingUniform, rng),
            index: index.into(),
            out_w: ow,
            out_h: oh,
        }
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let cols = x.gather(self.index.clone(), [self.out_w * self.out_h, self.linear.in_dim])?;
        Ok(self.linear.forward(b, &cols)?.relu())
    }
}

#[derive(Debug)]
pub struct PairwiseNet {
    pub cfg: PairwiseConfig,
    convs: Vec<Conv>,
    mlp: Mlp,
    forwards: AtomicUsize,
}

impl Clone for PairwiseNet {
    fn clone(&self) -> Self {
        PairwiseNet {
            cfg: self.cfg.clone(),
            convs: self.convs.clone(),
            mlp: self.mlp.clone(),
            forwards: AtomicUsize::new(0),
        }
    }
}

/// Logits of one pair.
pub struct PairLogits<'t> {
    /// `[1×2]`: A occludes B, B occludes A.
    pub occlusion: Var<'t>,
    /// `[1×3]`: A relative to B.
    pub depth: Var<'t>,
}

impl PairwiseNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PairwiseConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) || cfg.hidden == 0 {
            return Err(Error::Config("pairwise net needs positive widths and at least one convolution".into()));
        }
        if cfg.width == 0 || cfg.height == 0 {
            return Err(Error::Config("pairwise input must be non-empty".into()));
        }
        let mut shape = (cfg.width, cfg.height, INPUT_CHANNELS);
        let mut convs = Vec::new();
        for (l, &c) in cfg.channels.iter().enumerate() {
            let conv = Conv::new(store, &format!("{name}.conv{l}"), shape, c, rng);
            shape = (conv.out_w, conv.out_h, c);
            convs.push(conv);
        }
        let last = *cfg.channels.last().expect("non-empty");
        let mlp = Mlp::new(
            store,
            &format!("{name}.mlp"),
            &[2 * last, cfg.hidden, 5],
            Activation::Relu,
            Init::Xavier,
            rng,
        );
        Ok(PairwiseNet {
            cfg,
            convs,
            mlp,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// `[h·w × 5]` input: RGB then mask A then mask B.
    pub fn input(&self, image: &[f64], a: &Bitmap, b: &Bitmap) -> Result<Tensor> {
        let hw = self.cfg.width * self.cfg.height;
        if image.len() != hw * 3 {
            return Err(dim_err!("image has {} values, expected {hw}×3", image.len()));
        }
        for m in [a, b] {
            if (m.width(), m.height()) != (self.cfg.width, self.cfg.height) {
                return Err(dim_err!(
                    "mask is {}×{}, image {}×{}",
                    m.width(),
                    m.height(),
                    self.cfg.width,
                    self.cfg.height
                ));
            }
        }
        let mut data = Vec::with_capacity(hw * INPUT_CHANNELS);
        for p in 0..hw {
            data.extend_from_slice(&image[p * 3..p * 3 + 3]);
            data.push(a.bits()[p] as u8 as f64);
            data.push(b.bits()[p] as u8 as f64);
        }
        Tensor::new([hw, INPUT_CHANNELS], data)
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, image: &[f64], ma: &Bitmap, mb: &Bitmap) -> Result<PairLogits<'t>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let mut x = b.tape().constant(self.input(image, ma, mb)?);
        for conv in &self.convs {
            x = conv.forward(b, &x)?;
        }
        let (rows, _) = x.dims2()?;
        let avg = b.tape().constant(Tensor::full([1, rows], 1.0 / rows as f64));
        let pooled = Var::concat_cols(&[x.max_rows()?, avg.matmul(&x)?])?;
        let out = self.mlp.forward(b, &pooled)?;
        Ok(PairLogits {
            occlusion: out.narrow_cols(0, 2)?,
            depth: out.narrow_cols(2, 3)?,
        })
    }

    /// Full matrices for `masks` from `n(n−1)/2` forward passes, one per
    /// unordered pair `i < j`.
    pub fn predict(&self, store: &ParamStore, image: &[f64], masks: &[Bitmap]) -> Result<(OcclusionMatrix, DepthMatrix)> {
        let n = masks.len();
        let mut occ = OcclusionMatrix::empty(n);
        let mut depth = DepthMatrix::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                let tape = Tape::inference();
                let b = Binder::new(&tape, store);
                let out = self.forward(&b, image, &masks[i], &masks[j])?;
                let o = out.occlusion.value();
                occ.set(i, j, (o.data()[0] > 0.0) as i8);
                occ.set(j, i, (o.data()[1] > 0.0) as i8);
                let d = out.depth.value();
                let l = d.data();
                let class = (0..3).fold(0, |b, k| if l[k] > l[b] { k } else { b }) as i8;
                match class {
                    FRONT => depth.set_front(i, j),
                    NOT_FRONT => depth.set_front(j, i),
                    _ => depth.set_overlap(i, j),
                }
            }
        }
        Ok((occ, depth))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PairwiseTrainConfig {
    fn default() -> Self {
        PairwiseTrainConfig {
            iterations: 500,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One supervised ordered pair: scene index and instances `(a, b)`.
type PairItem = (usize, usize, usize);

fn pair_loss<'t>(net: &PairwiseNet, b: &Binder<'t, '_>, s: &SceneSample, a: usize, c: usize) -> Result<Var<'t>> {
    let out = net.forward(b, &s.image, &s.instances[a].bitmap, &s.instances[c].bitmap)?;
    let occ = [s.occlusion.get(a, c) as f64, s.occlusion.get(c, a) as f64];
    let d = s.depth.get(a, c);
    if !(0..=2).contains(&d) {
        return Err(Error::Data(format!("pair ({a},{c}) has no depth label")));
    }
    let depth_class = if d == OVERLAP { 2 } else { d as usize };
    out.occlusion
        .bce_with_logits(&occ, &[0.5, 0.5])?
        .add(&out.depth.cross_entropy(&[depth_class], &[1.0])?)
}

/// Trains on random ordered pairs (both orders appear, so the data are
/// symmetric under swapping A and B). Returns the mean batch loss per step.
pub fn train_pairwise(
    net: &PairwiseNet,
    store: &mut ParamStore,
    samples: &[SceneSample],
    cfg: &PairwiseTrainConfig,
) -> Result<Vec<f64>> {
    let usable: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].n() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::NothingToOrder(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut curve = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch: Vec<PairItem> = (0..cfg.batch_size)
            .map(|_| {
                let k = *usable.choose(&mut rng).expect("non-empty");
                let n = samples[k].n();
                let a = rng.gen_range(0..n);
                let c = (a + rng.gen_range(1..n)) % n;
                (k, a, c)
            })
            .collect();
        let (losses, mut grads) = batch_grads(store, &batch, |b, &(k, a, c)| pair_loss(net, b, &samples[k], a, c))?;
        grads.scale(1.0 / batch.len() as f64);
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pairwise loss {mean}"),
            });
        }
        opt.step(store, &grads, cfg.lr)?;
        curve.push(mean);
    }
    Ok(curve)
}

/// Pairwise network together with its parameters, checkpointed like the
/// order model.
pub struct PairwiseModel {
    pub net: PairwiseNet,
    pub store: ParamStore,
}

impl PairwiseModel {
    pub fn new(cfg: PairwiseConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PairwiseNet::new(&mut store, "pairwise", cfg, &mut rng)?;
        Ok(PairwiseModel { net, store })
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(dir, &self.store, &self.net.cfg, serde_json::Map::new()).map(|_| ())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: PairwiseConfig = serde_json::from_value(checkpoint::read_manifest(dir)?.config)?;
        let mut m = PairwiseModel::new(cfg, 0)?;
        checkpoint::load(dir, &mut m.store, Some(&m.net.cfg))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{validate_depth, validate_occlusion};
    use crate::synth::{generate_sample, SynthConfig};
    use crate::tensor::gradcheck::check_params;

    fn small() -> PairwiseConfig {
        PairwiseConfig {
            width: 8,
            height: 8,
            channels: vec![3, 4],
            hidden: 6,
        }
    }

    fn masks() -> (Bitmap, Bitmap) {
        let mut a = Bitmap::new(8, 8);
        let mut b = Bitmap::new(8, 8);
        for y in 0..4 {
            for x in 0..5 {
                a.set(x, y, true);
                b.set(x + 3, y + 3, true);
            }
        }
        (a, b)
    }

    #[test]
    fn output_arity_and_forward_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = PairwiseNet::new(&mut store, "pw", small(), &mut rng).unwrap();
        let img: Vec<f64> = (0..192).map(|k| (k % 7) as f64 / 7.0).collect();
        let (a, b) = masks();
        let tape = Tape::inference();
        let binder = Binder::new(&tape, &store);
        let out = net.forward(&binder, &img, &a, &b).unwrap();
        assert_eq!((out.occlusion.shape(), out.depth.shape()), (vec![1, 2], vec![1, 3]));
        net.reset_forward_count();
        let (o, d) = net.predict(&store, &img, &[a.clone(), b.clone(), a, b]).unwrap();
        assert_eq!(net.forward_count(), 6);
        assert!(validate_depth(&d).is_empty());
        assert!(validate_occlusion(&o).is_empty());
        assert!(matches!(net.predict(&store, &img[..10], &masks_vec()), Err(Error::Dimension(_))));
    }

    fn masks_vec() -> Vec<Bitmap> {
        let (a, b) = masks();
        vec![a, b]
    }

    #[test]
    fn conv_padding_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = PairwiseNet::new(&mut store, "pw", small(), &mut rng).unwrap();
        assert_eq!((net.convs[0].out_w, net.convs[1].out_w), (4, 2));
        // Output cell (0,0) reads input rows -1..=1, so its first tap is padding.
        assert_eq!(net.convs[0].index[0], GATHER_ZERO);
        let img: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (a, b) = masks();
        let report = check_params(
            &store,
            |binder| {
                let out = net.forward(binder, &img, &a, &b)?;
                out.occlusion
                    .bce_with_logits(&[1.0, 0.0], &[1.0, 1.0])?
                    .add(&out.depth.cross_entropy(&[1], &[1.0])?)
            },
            1e-5,
            Some((5, &mut ChaCha8Rng::seed_from_u64(2))),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = SynthConfig {
            width: 16,
            height: 16,
            n_min: 2,
            n_max: 3,
            min_visible_pixels: 4,
            radius_range: [0.25, 0.45],
            ..Default::default()
        };
        let samples: Vec<_> = (0..8).map(|s| generate_sample(s, &cfg).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let pc = PairwiseConfig {
            width: 16,
            height: 16,
            channels: vec![4, 8],
            hidden: 16,
        };
        let net = PairwiseNet::new(&mut store, "pw", pc, &mut rng).unwrap();
        let tc = PairwiseTrainConfig {
            iterations: 150,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        };
        let curve = train_pairwise(&net, &mut store, &samples, &tc).unwrap();
        let head: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = curve[curve.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PairwiseModel::new(small(), 4).unwrap();
        m.save(dir.path()).unwrap();
        let back = PairwiseModel::load(dir.path()).unwrap();
        assert_eq!(back.net.cfg, m.net.cfg);
        for id in m.store.ids() {
            let (a, b) = (m.store.get(id), back.store.get(id));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
        }
    }
}
