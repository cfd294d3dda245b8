//! Mask-transformer style encoders producing mask embeddings `Q`, a
//! per-pixel embedding `P` at quarter resolution, and per-query confidences.
//!
//! Masks are decoded as `round(σ(Q·P))`. Two encoders are provided: an exact
//! oracle that builds `Q` and `P` from ground-truth masks, and a small learned
//! encoder.

pub mod tiny;

pub use tiny::{AdapterMode, TinyBackbone, TinyBackboneConfig};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::order::{downsample_labels, Bitmap};
use crate::synth::{SceneSample, FEATURE_STRIDE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// Mask embeddings `[N_q × C]`.
    pub q: Tensor,
    /// Per-pixel embedding `[C × h·w]`, row-major over `h×w`.
    pub p: Tensor,
    pub confidences: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl BackboneOutput {
    pub fn num_queries(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.q.shape()[1]
    }

    /// `P` as one row per pixel, `[h·w × C]`.
    pub fn pixel_tokens(&self) -> Tensor {
        self.p.transpose().expect("P is rank 2")
    }

    pub fn masks(&self, threshold: f64) -> Result<Vec<Bitmap>> {
        compute_masks(&self.q, &self.p, self.width, self.height, threshold)
    }
}

/// `M = [σ(Q·P) ≥ threshold]`, one `width×height` bitmap per query row.
pub fn compute_masks(q: &Tensor, p: &Tensor, width: usize, height: usize, threshold: f64) -> Result<Vec<Bitmap>> {
    let logits = q.matmul(p)?;
    let (nq, hw) = logits.dims2()?;
    if hw != width * height {
        return Err(dim_err!("P has {hw} columns for a {width}×{height} map"));
    }
    (0..nq)
        .map(|k| {
            let bits = logits.row(k).iter().map(|&x| crate::tensor::sigmoid(x) >= threshold).collect();
            Bitmap::from_bits(width, height, bits)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub channels: usize,
    pub queries: usize,
    /// Magnitude of the mask channels of `P`.
    pub alpha: f64,
    /// Magnitude of the one-hot rows of `Q`.
    pub beta: f64,
    /// Scale of the image-derived channels of `P`, kept comparable to
    /// `alpha` so layer norm does not flatten them.
    pub feature_gain: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            channels: 64,
            queries: 16,
            alpha: 10.0,
            beta: 1.0,
            feature_gain: 10.0,
        }
    }
}

/// Feature channels after the mask slots: mean RGB of the cell, mean RGB of
/// its left, right, upper and lower neighbours (the cell itself at the
/// border), four coordinate ramps, then sin/cos Fourier features of x and y
/// until the channels run out.
pub const MIN_FEATURE_CHANNELS: usize = 19;

/// Quarter-resolution label map of a sample (mode pooling).
pub fn coarse_labels(sample: &SceneSample) -> (usize, usize, Vec<u32>) {
    downsample_labels(&sample.labels, sample.width, sample.height, FEATURE_STRIDE)
}

/// Quarter-resolution ground-truth masks, ordered by instance id.
pub fn coarse_masks(sample: &SceneSample) -> Vec<Bitmap> {
    let (w, h, labels) = coarse_labels(sample);
    (0..sample.n())
        .map(|i| {
            let bits = labels.iter().map(|&l| l == i as u32 + 1).collect();
            Bitmap::from_bits(w, h, bits).expect("label map size")
        })
        .collect()
}

/// Image features per quarter-resolution cell, `[C_f × h·w]` row-major, for
/// `C_f = channels` feature channels.
fn image_features(sample: &SceneSample, channels: usize) -> Vec<f64> {
    let (w, h) = (sample.width / FEATURE_STRIDE, sample.height / FEATURE_STRIDE);
    let hw = w * h;
    let block = (FEATURE_STRIDE * FEATURE_STRIDE) as f64;
    let mut mean = vec![[0.0; 3]; hw];
    for (cell, m) in mean.iter_mut().enumerate() {
        let (cx, cy) = (cell % w, cell / w);
        for y in cy * FEATURE_STRIDE..(cy + 1) * FEATURE_STRIDE {
            for x in cx * FEATURE_STRIDE..(cx + 1) * FEATURE_STRIDE {
                let p = (y * sample.width + x) * 3;
                for c in 0..3 {
                    m[c] += sample.image[p + c] / block;
                }
            }
        }
    }
    let mut f = vec![0.0; channels * hw];
    for cy in 0..h {
        for cx in 0..w {
            let cell = cy * w + cx;
            let neighbours = [
                cy * w + cx.saturating_sub(1),
                cy * w + (cx + 1).min(w - 1),
                cy.saturating_sub(1) * w + cx,
                (cy + 1).min(h - 1) * w + cx,
            ];
            let x = (cx as f64 + 0.5) / w as f64;
            let y = (cy as f64 + 0.5) / h as f64;
            let mut values = mean[cell].to_vec();
            for n in neighbours {
                values.extend_from_slice(&mean[n]);
            }
            values.extend([x, y, 1.0 - x, 1.0 - y]);
            let mut freq = 1.0;
            while values.len() < channels {
                let t = std::f64::consts::TAU * freq;
                values.extend([(t * x).sin(), (t * x).cos(), (t * y).sin(), (t * y).cos()]);
                freq += 1.0;
            }
            for (c, v) in values.into_iter().take(channels).enumerate() {
                f[c * hw + cell] = v;
            }
        }
    }
    f
}

/// Exact encoder: query `k` is `β·e_k`, and channel `k < n` of `P` is
/// `α(2·mask_k − 1)` so that `round(σ(Q·P))` reproduces the quarter-resolution
/// ground-truth masks. Unused query slots have an all-negative channel and
/// confidence 0.
pub fn oracle_backbone(sample: &SceneSample, cfg: &OracleConfig) -> Result<BackboneOutput> {
    let n = sample.n();
    let (c, nq) = (cfg.channels, cfg.queries);
    if n > nq {
        return Err(Error::Capacity {
            needed: n,
            available: nq,
        });
    }
    if c < nq + MIN_FEATURE_CHANNELS {
        return Err(Error::Config(format!(
            "oracle needs at least {} channels for {nq} queries, got {c}",
            nq + MIN_FEATURE_CHANNELS
        )));
    }
    let (w, h, labels) = coarse_labels(sample);
    let hw = w * h;
    let mut p = vec![0.0; c * hw];
    for k in 0..nq {
        for (cell, &l) in labels.iter().enumerate() {
            let inside = k < n && l == k as u32 + 1;
            p[k * hw + cell] = if inside { cfg.alpha } else { -cfg.alpha };
        }
    }
    for (dst, v) in p[nq * hw..].iter_mut().zip(image_features(sample, c - nq)) {
        *dst = cfg.feature_gain * v;
    }
    let mut q = vec![0.0; nq * c];
    for k in 0..nq {
        q[k * c + k] = cfg.beta;
    }
    Ok(BackboneOutput {
        q: Tensor::new([nq, c], q)?,
        p: Tensor::new([c, hw], p)?,
        confidences: (0..nq).map(|k| if k < n { 1.0 } else { 0.0 }).collect(),
        height: h,
        width: w,
    })
}
