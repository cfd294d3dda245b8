//! Synthetic layered scenes with exact order ground truth.
//!
//! A scene is a stack of flat rectangles and ellipses, each with a depth
//! interval `[z_near, z_far]` (smaller is closer). Rendering is a per-pixel
//! painter's algorithm on `z_near`. Shape brightness falls with depth, so
//! depth order is visible in the image.
//!
//! Depths are snapped to multiples of 1e-3 and colours to multiples of 1/255
//! so that a sample survives a round trip through its PPM/PGM files exactly.

pub mod pnm;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::annotation::ImageRef;
use crate::order::{downsample_labels, Bitmap, DepthMatrix, InstanceMask, OcclusionMatrix, SceneAnnotation};

/// Annotation limit of the real dataset; larger scenes need
/// [`SynthConfig::allow_large_scenes`].
pub const MAX_INSTANCES: usize = 10;
/// Resolution ratio between images and backbone feature maps.
pub const FEATURE_STRIDE: usize = 4;
/// Depth PGM value for background pixels.
pub const DEPTH_BACKGROUND: u16 = u16::MAX;
/// Depth map units per unit of `z`.
const DEPTH_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Per-instance probability of being split around a neighbour.
    pub bidirectional_rate: f64,
    /// Shape half-extent range as a fraction of the canvas side.
    pub radius_range: [f64; 2],
    pub z_max: f64,
    /// Depth extent of a single shape.
    pub thickness: f64,
    /// Brightness drop from `z = 0` to `z = z_max`.
    pub depth_shading: f64,
    /// Minimum visible pixels per instance at full resolution.
    pub min_visible_pixels: usize,
    pub allow_large_scenes: bool,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            n_min: 3,
            n_max: 6,
            bidirectional_rate: 0.1,
            radius_range: [0.1, 0.3],
            z_max: 1.0,
            thickness: 0.1,
            depth_shading: 0.75,
            min_visible_pixels: 12,
            allow_large_scenes: false,
            max_attempts: 500,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_min < 2 || self.n_min > self.n_max {
            return cfg(format!("need 2 <= n_min <= n_max, got {}..{}", self.n_min, self.n_max));
        }
        if self.n_max > MAX_INSTANCES && !self.allow_large_scenes {
            return cfg(format!("n_max {} exceeds the {MAX_INSTANCES}-instance cap", self.n_max));
        }
        if self.width % FEATURE_STRIDE != 0 || self.height % FEATURE_STRIDE != 0 {
            return cfg(format!("canvas {}×{} is not a multiple of {FEATURE_STRIDE}", self.width, self.height));
        }
        let cells = (self.width / FEATURE_STRIDE) * (self.height / FEATURE_STRIDE);
        if cells < 4 * self.n_max || self.width * self.height < self.n_max * self.min_visible_pixels * 2 {
            return cfg(format!(
                "canvas {}×{} is too small for {} instances",
                self.width, self.height, self.n_max
            ));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return cfg(format!("radius range {lo}..{hi} must satisfy 0 < lo <= hi <= 0.5"));
        }
        if !(self.thickness > 0.0 && self.z_max > 2.0 * self.thickness) {
            return cfg("z_max must exceed twice the shape thickness".into());
        }
        if !(0.0..=1.0).contains(&self.bidirectional_rate) || !(0.0..1.0).contains(&self.depth_shading) {
            return cfg("bidirectional_rate must lie in [0,1] and depth_shading in [0,1)".into());
        }
        if self.z_max * DEPTH_SCALE >= DEPTH_BACKGROUND as f64 {
            return cfg("z_max does not fit the 16-bit depth encoding".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
        }
    }
}

/// Keeps the part of a shape with `coord < at` (or `>= at`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub vertical: bool,
    pub at: f64,
    pub keep_below: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Centre and half-extents in pixels.
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub clip: Option<HalfPlane>,
    pub rgb: [f64; 3],
    pub z_near: f64,
    pub z_far: f64,
    pub part_of: usize,
}

impl Shape {
    /// Whether the shape's support contains the centre of pixel `(x, y)`.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let dx = (px - self.center[0]) / self.radii[0];
        let dy = (py - self.center[1]) / self.radii[1];
        let inside = match self.kind {
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        };
        inside
            && self.clip.map_or(true, |c| {
                let v = if c.vertical { px } else { py };
                (v < c.at) == c.keep_below
            })
    }

    fn intersects_box(&self, other: &Shape) -> bool {
        (0..2).all(|k| (self.center[k] - other.center[k]).abs() < self.radii[k] + other.radii[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredScene {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    pub categories: Vec<String>,
    pub seed: u64,
}

impl LayeredScene {
    pub fn n(&self) -> usize {
        self.categories.len()
    }

    /// `[min z_near, max z_far]` over each instance's shapes.
    pub fn z_ranges(&self) -> Vec<(f64, f64)> {
        let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n()];
        for s in &self.shapes {
            let e = &mut r[s.part_of];
            e.0 = e.0.min(s.z_near);
            e.1 = e.1.max(s.z_far);
        }
        r
    }

    /// Index of the shape drawn at a pixel: smallest `z_near`, ties to the
    /// earlier shape.
    fn top_shape(&self, x: usize, y: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, s) in self.shapes.iter().enumerate() {
            if s.covers(x, y) && best.map_or(true, |b| s.z_near < self.shapes[b].z_near) {
                best = Some(k);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0,1]`, row-major.
    pub image: Vec<f64>,
    /// `0` for background, `id + 1` for instance pixels.
    pub labels: Vec<u32>,
    /// Visible-region masks, ordered by id.
    pub instances: Vec<InstanceMask>,
    pub occlusion: OcclusionMatrix,
    pub depth: DepthMatrix,
    /// Per-pixel depth of the visible surface; `+inf` on background.
    pub depth_map: Vec<f64>,
}

const COLOR_NAMES: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rounds to the grid `k / scale`, computed the same way file decoding does.
fn snap(v: f64, scale: f64) -> f64 {
    (v * scale).round() / scale
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<LayeredScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    for _ in 0..cfg.max_attempts {
        let scene = propose(&mut rng, n, seed, cfg);
        if accept(&scene, cfg) {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "no valid {n}-instance layout on a {}×{} canvas after {} attempts",
        cfg.width, cfg.height, cfg.max_attempts
    )))
}

fn shade(hue: f64, z: f64, cfg: &SynthConfig) -> [f64; 3] {
    let v = 1.0 - cfg.depth_shading * z / cfg.z_max;
    hsv_to_rgb(hue, 0.85, v).map(|c| snap(c, 255.0))
}

fn propose(rng: &mut ChaCha8Rng, n: usize, seed: u64, cfg: &SynthConfig) -> LayeredScene {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut shapes = Vec::with_capacity(n + 2);
    let mut hues = Vec::with_capacity(n);
    let mut categories = Vec::with_capacity(n);
    for id in 0..n {
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Ellipse
        };
        let [lo, hi] = cfg.radius_range;
        let radii = [rng.gen_range(lo..=hi) * w, rng.gen_range(lo..=hi) * h];
        let center = [rng.gen_range(radii[0]..=w - radii[0]), rng.gen_range(radii[1]..=h - radii[1])];
        let z_near = snap(rng.gen_range(0.0..=cfg.z_max - cfg.thickness), DEPTH_SCALE);
        let hue: f64 = rng.gen();
        let color = COLOR_NAMES[((hue * 6.0).round() as usize) % 6];
        categories.push(format!("{color} {}", kind.name()));
        hues.push(hue);
        shapes.push(Shape {
            kind,
            center,
            radii,
            clip: None,
            rgb: shade(hue, z_near, cfg),
            z_near,
            z_far: snap(z_near + cfg.thickness, DEPTH_SCALE),
            part_of: id,
        });
    }

    // Sandwiches: split instance `a` through the centre of a neighbour `b`
    // and put one half in front of `b`, the other behind it.
    let mut used = vec![false; n];
    for a in 0..n {
        if used[a] || !rng.gen_bool(cfg.bidirectional_rate) {
            continue;
        }
        let mut partners: Vec<usize> = (0..n)
            .filter(|&b| b != a && !used[b] && shapes[a].intersects_box(&shapes[b]))
            .collect();
        partners.shuffle(rng);
        for b in partners {
            let (sa, sb) = (&shapes[a], &shapes[b]);
            let gap = 0.5 * cfg.thickness;
            let front = snap(sb.z_near - cfg.thickness - gap, DEPTH_SCALE);
            let back = snap(sb.z_far + gap, DEPTH_SCALE);
            if front < 0.0 || back + cfg.thickness > cfg.z_max {
                continue;
            }
            let axis = (0..2).find(|&k| (sb.center[k] - sa.center[k]).abs() < 0.8 * sa.radii[k]);
            let Some(k) = axis else { continue };
            let at = sb.center[k];
            let mut near = sa.clone();
            near.clip = Some(HalfPlane {
                vertical: k == 0,
                at,
                keep_below: true,
            });
            near.z_near = front;
            near.z_far = snap(front + cfg.thickness, DEPTH_SCALE);
            near.rgb = shade(hues[a], front, cfg);
            let mut far = sa.clone();
            far.clip = Some(HalfPlane {
                vertical: k == 0,
                at,
                keep_below: false,
            });
            far.z_near = back;
            far.z_far = snap(back + cfg.thickness, DEPTH_SCALE);
            far.rgb = shade(hues[a], back, cfg);
            shapes[a] = near;
            shapes.push(far);
            used[a] = true;
            used[b] = true;
            break;
        }
    }
    LayeredScene {
        width: cfg.width,
        height: cfg.height,
        shapes,
        categories,
        seed,
    }
}

fn accept(scene: &LayeredScene, cfg: &SynthConfig) -> bool {
    let labels = label_map(scene);
    let n = scene.n();
    let mut area = vec![0usize; n + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    if area[1..].iter().any(|&a| a < cfg.min_visible_pixels) {
        return false;
    }
    let (_, _, coarse) = downsample_labels(&labels, scene.width, scene.height, FEATURE_STRIDE);
    let mut seen = vec![false; n + 1];
    for &l in &coarse {
        seen[l as usize] = true;
    }
    seen[1..].iter().all(|&s| s)
}

fn label_map(scene: &LayeredScene) -> Vec<u32> {
    let mut labels = vec![0u32; scene.width * scene.height];
    for y in 0..scene.height {
        for x in 0..scene.width {
            if let Some(k) = scene.top_shape(x, y) {
                labels[y * scene.width + x] = scene.shapes[k].part_of as u32 + 1;
            }
        }
    }
    labels
}

/// `i` occludes `j` iff at some pixel the drawn shape belongs to `i` and a
/// shape of `j` also covers that pixel.
pub fn oracle_occlusion(scene: &LayeredScene) -> OcclusionMatrix {
    let n = scene.n();
    let mut m = OcclusionMatrix::empty(n);
    for y in 0..scene.height {
        for x in 0..scene.width {
            let Some(top) = scene.top_shape(x, y) else { continue };
            let i = scene.shapes[top].part_of;
            for s in &scene.shapes {
                if s.part_of != i && s.covers(x, y) {
                    m.set(i, s.part_of, 1);
                }
            }
        }
    }
    m
}

/// Strict interval order gives front/behind; intersecting closed intervals
/// give overlap.
pub fn oracle_depth(scene: &LayeredScene) -> DepthMatrix {
    depth_from_ranges(&scene.z_ranges())
}

pub fn depth_from_ranges(ranges: &[(f64, f64)]) -> DepthMatrix {
    let n = ranges.len();
    let mut m = DepthMatrix::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (ranges[i], ranges[j]);
            if a.1 < b.0 {
                m.set_front(i, j);
            } else if b.1 < a.0 {
                m.set_front(j, i);
            } else {
                m.set_overlap(i, j);
            }
        }
    }
    m
}

pub fn render(scene: &LayeredScene) -> Result<SceneSample> {
    let (w, h) = (scene.width, scene.height);
    let n = scene.n();
    let mut image = vec![0.0; w * h * 3];
    let mut labels = vec![0u32; w * h];
    let mut depth_map = vec![f64::INFINITY; w * h];
    let mut bitmaps = vec![Bitmap::new(w, h); n];
    for y in 0..h {
        for x in 0..w {
            let Some(k) = scene.top_shape(x, y) else { continue };
            let s = &scene.shapes[k];
            let p = y * w + x;
            image[p * 3..p * 3 + 3].copy_from_slice(&s.rgb);
            labels[p] = s.part_of as u32 + 1;
            depth_map[p] = s.z_near;
            bitmaps[s.part_of].set(x, y, true);
        }
    }
    let instances = bitmaps
        .into_iter()
        .zip(&scene.categories)
        .enumerate()
        .map(|(id, (b, c))| InstanceMask::new(id, c.clone(), b))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        width: w,
        height: h,
        image,
        labels,
        instances,
        occlusion: oracle_occlusion(scene),
        depth: oracle_depth(scene),
        depth_map,
    })
}

pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SceneSample> {
    render(&generate_scene(seed, cfg)?)
}

pub const IMAGE_FILE: &str = "image.ppm";
pub const MASKS_FILE: &str = "masks.pgm";
pub const DEPTH_FILE: &str = "depth.pgm";
pub const ANNOTATION_FILE: &str = "annotation.json";

impl SceneSample {
    pub fn n(&self) -> usize {
        self.instances.len()
    }

    pub fn annotation(&self) -> SceneAnnotation {
        SceneAnnotation {
            image: ImageRef {
                width: self.width,
                height: self.height,
                path: IMAGE_FILE.into(),
            },
            instances: self.instances.clone(),
            occlusion: self.occlusion.clone(),
            depth: self.depth.clone(),
            prediction: None,
        }
    }

    pub fn depth_pgm_values(&self) -> Vec<u16> {
        self.depth_map
            .iter()
            .map(|&z| {
                if z.is_finite() {
                    (z * DEPTH_SCALE).round() as u16
                } else {
                    DEPTH_BACKGROUND
                }
            })
            .collect()
    }

    /// Writes image, label map, depth map and annotation into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (w, h) = (self.width, self.height);
        pnm::write(dir.join(IMAGE_FILE), &pnm::encode_ppm(w, h, &self.image))?;
        let labels: Vec<u8> = self.labels.iter().map(|&l| l.min(255) as u8).collect();
        pnm::write(dir.join(MASKS_FILE), &pnm::encode_pgm8(w, h, &labels))?;
        pnm::write(dir.join(DEPTH_FILE), &pnm::encode_pgm16(w, h, &self.depth_pgm_values()))?;
        self.annotation().save(dir.join(ANNOTATION_FILE))
    }

    /// Reads a sample written by [`SceneSample::save`]. Instance masks and
    /// order matrices come from the annotation; the label map is rebuilt
    /// from the masks.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ann = SceneAnnotation::load(dir.join(ANNOTATION_FILE))?;
        Self::from_annotation(ann, dir)
    }

    pub fn from_annotation(ann: SceneAnnotation, dir: &Path) -> Result<Self> {
        let (w, h) = (ann.image.width, ann.image.height);
        let (iw, ih, image) = pnm::decode_ppm(&pnm::read(dir.join(&ann.image.path))?)?;
        let (dw, dh, raw) = pnm::decode_pgm(&pnm::read(dir.join(DEPTH_FILE))?)?;
        if (iw, ih) != (w, h) || (dw, dh) != (w, h) {
            return Err(Error::Data(format!(
                "{}: image {iw}×{ih} and depth {dw}×{dh} do not match annotation {w}×{h}",
                dir.display()
            )));
        }
        let mut labels = vec![0u32; w * h];
        for inst in &ann.instances {
            for (p, &b) in inst.bitmap.bits().iter().enumerate() {
                if b {
                    if labels[p] != 0 {
                        return Err(Error::Data(format!("{}: instance masks overlap", dir.display())));
                    }
                    labels[p] = inst.id as u32 + 1;
                }
            }
        }
        let depth_map = raw
            .into_iter()
            .map(|v| {
                if v == DEPTH_BACKGROUND {
                    f64::INFINITY
                } else {
                    v as f64 / DEPTH_SCALE
                }
            })
            .collect();
        Ok(SceneSample {
            width: w,
            height: h,
            image,
            labels,
            instances: ann.instances,
            occlusion: ann.occlusion,
            depth: ann.depth,
            depth_map,
        })
    }

    /// Same scene with instances reordered: new instance `k` is old
    /// instance `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0u32; perm.len() + 1];
        for (k, &old) in perm.iter().enumerate() {
            inverse[old + 1] = k as u32 + 1;
        }
        let ann = self.annotation().permuted(perm);
        SceneSample {
            labels: self.labels.iter().map(|&l| inverse[l as usize]).collect(),
            instances: ann.instances,
            occlusion: ann.occlusion,
            depth: ann.depth,
            ..self.clone()
        }
    }
}
