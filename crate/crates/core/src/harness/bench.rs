//! Inference cost of the holistic head against the pairwise baseline as the
//! number of instances grows.
//!
//! Benchmark scenes tile the whole canvas with `n` Voronoi regions, so every
//! scene covers the same pixels and only the instance count varies.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::OrderModel;
use crate::baselines::PairwiseNet;
use crate::error::{Error, Result};
use crate::order::{Bitmap, DepthMatrix, InstanceMask, OcclusionMatrix};
use crate::synth::{SceneSample, FEATURE_STRIDE};
use crate::tensor::nn::{Binder, ParamStore};
use crate::tensor::Tape;

pub const DEFAULT_SIZES: [usize; 5] = [2, 5, 10, 15, 20];

/// Canvas tiled by `n` Voronoi regions whose sites sit on distinct feature
/// cells, so each region keeps at least one cell at feature resolution.
/// Order matrices are left empty; the scene is only for timing.
pub fn tiled_scene(n: usize, width: usize, height: usize, seed: u64) -> Result<SceneSample> {
    if width % FEATURE_STRIDE != 0 || height % FEATURE_STRIDE != 0 {
        return Err(Error::Config(format!("canvas {width}×{height} is not a multiple of {FEATURE_STRIDE}")));
    }
    let (cw, ch) = (width / FEATURE_STRIDE, height / FEATURE_STRIDE);
    if n < 2 || n > cw * ch {
        return Err(Error::Config(format!("cannot tile {cw}×{ch} cells with {n} regions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    while sites.len() < n {
        let c = rng.gen_range(0..cw * ch);
        if !sites.contains(&c) {
            sites.push(c);
        }
    }
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let cell_label = |c: usize| {
        let (x, y) = ((c % cw) as i64, (c / cw) as i64);
        let d = |s: usize| {
            let (sx, sy) = ((s % cw) as i64, (s / cw) as i64);
            (sx - x).pow(2) + (sy - y).pow(2)
        };
        (0..n).min_by_key(|&k| (d(sites[k]), k)).expect("n >= 2")
    };
    let coarse: Vec<usize> = (0..cw * ch).map(cell_label).collect();
    let mut labels = vec![0u32; width * height];
    let mut image = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let k = coarse[(y / FEATURE_STRIDE) * cw + x / FEATURE_STRIDE];
            let p = y * width + x;
            labels[p] = k as u32 + 1;
            image[p * 3..p * 3 + 3].copy_from_slice(&colors[k]);
        }
    }
    let instances = (0..n)
        .map(|k| {
            let bits = labels.iter().map(|&l| l == k as u32 + 1).collect();
            InstanceMask::new(k, format!("region {k}"), Bitmap::from_bits(width, height, bits)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        width,
        height,
        image,
        labels,
        instances,
        occlusion: OcclusionMatrix::empty(n),
        depth: DepthMatrix::empty(n),
        depth_map: vec![1.0; width * height],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub method: String,
    /// Forward passes of the order model for one image.
    pub forwards: usize,
    /// Median wall time of one full-image prediction.
    pub seconds: f64,
    /// Peak bytes held by one forward pass.
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn times(&self, method: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.method == method).map(|r| (r.n, r.seconds)).collect()
    }

    /// Slowest over fastest holistic prediction across all sizes.
    pub fn holistic_spread(&self) -> Option<f64> {
        let t: Vec<f64> = self.times("holistic").into_iter().map(|(_, s)| s).collect();
        let hi = t.iter().cloned().fold(f64::NAN, f64::max);
        let lo = t.iter().cloned().fold(f64::NAN, f64::min);
        (lo > 0.0).then(|| hi / lo)
    }

    /// Pairwise time at `to` over pairwise time at `from`.
    pub fn pairwise_growth(&self, from: usize, to: usize) -> Option<f64> {
        let t = self.times("pairwise");
        let at = |n| t.iter().find(|(m, _)| *m == n).map(|(_, s)| *s);
        match (at(from), at(to)) {
            (Some(a), Some(b)) if a > 0.0 => Some(b / a),
            _ => None,
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>4}  {:<10} {:>8} {:>12} {:>12}\n", "n", "method", "forwards", "ms", "peak KiB");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>4}  {:<10} {:>8} {:>12.3} {:>12.1}\n",
                r.n,
                r.method,
                r.forwards,
                r.seconds * 1e3,
                r.peak_bytes as f64 / 1024.0
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(t))
}

/// Measures one holistic and one pairwise prediction per scene size. Scenes
/// have the canvas size of the pairwise network.
pub fn bench(
    holistic: &OrderModel,
    pairwise: (&PairwiseNet, &ParamStore),
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    let (net, net_store) = pairwise;
    let mut rows = Vec::new();
    for &n in sizes {
        let scene = tiled_scene(n, net.cfg.width, net.cfg.height, seed ^ n as u64)?;

        holistic.head.reset_forward_count();
        let pred = holistic.predict(&scene)?;
        if pred.ids.len() != n {
            return Err(Error::Contract(format!("holistic model kept {} of {n} instances", pred.ids.len())));
        }
        let forwards = holistic.head.forward_count();
        let tape = Tape::inference();
        let b = Binder::new(&tape, &holistic.store);
        let f = holistic.features(&b, &scene, false)?;
        let s = holistic.select_for_inference(&f)?;
        holistic.head_forward(&b, &s)?;
        let peak_bytes = tape.live_bytes();
        drop(b);
        let seconds = timed(repeats, || holistic.predict(&scene))?;
        rows.push(BenchRow {
            n,
            method: "holistic".into(),
            forwards,
            seconds,
            peak_bytes,
        });

        let full: Vec<Bitmap> = scene.instances.iter().map(|i| i.bitmap.clone()).collect();
        net.reset_forward_count();
        net.predict(net_store, &scene.image, &full)?;
        let forwards = net.forward_count();
        let tape = Tape::inference();
        let b = Binder::new(&tape, net_store);
        net.forward(&b, &scene.image, &full[0], &full[1])?;
        let peak_bytes = tape.live_bytes();
        drop(b);
        let seconds = timed(repeats, || net.predict(net_store, &scene.image, &full))?;
        rows.push(BenchRow {
            n,
            method: "pairwise".into(),
            forwards,
            seconds,
            peak_bytes,
        });
    }
    Ok(BenchReport { rows })
}
