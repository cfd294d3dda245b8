//! Scene annotation files and the pair-list ↔ matrix conversion.
//!
//! Schema (version 1):
//!
//! ```json
//! { "version": 1,
//!   "image": {"width": 64, "height": 64, "path": "image.ppm"},
//!   "instances": [{"id": 0, "category": "red ellipse", "bbox": [a_w, a_h, b_w, b_h], "mask_rle": [..]}],
//!   "occlusion": [{"i": 0, "j": 1}],
//!   "depth": [{"i": 0, "j": 1, "rel": "front", "count": 2}],
//!   "predictions": {"method": "...", "occlusion": [..], "depth": [..]} }
//! ```
//!
//! `mask_rle` holds row-major run lengths starting with background.
//! `"front"` means `i` is in front of `j`; `"overlap"` pairs are symmetric.
//! `predictions` is optional. The canonical form is compact JSON with
//! instances sorted by id and pairs sorted, followed by a newline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bitmap, DepthMatrix, InstanceMask, OcclusionMatrix, FRONT, OVERLAP};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Annotation count assumed when a depth pair carries none (`w = 1`).
pub const DEFAULT_COUNT: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRelation {
    Front,
    Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DepthPair {
    pub i: usize,
    pub j: usize,
    pub rel: DepthRelation,
    pub count: u32,
}

impl DepthPair {
    /// Overlap pairs are stored with `i < j`.
    pub fn canonical(self) -> Self {
        if self.rel == DepthRelation::Overlap && self.i > self.j {
            DepthPair {
                i: self.j,
                j: self.i,
                ..self
            }
        } else {
            self
        }
    }

    fn key(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }
}

fn check_pair(i: usize, j: usize, n: usize) -> Result<()> {
    if i >= n || j >= n {
        return Err(Error::Data(format!("pair ({i},{j}) out of range for {n} instances")));
    }
    if i == j {
        return Err(Error::Data(format!("pair ({i},{i}) relates an instance to itself")));
    }
    Ok(())
}

/// Occlusion matrix from `(occluder, occludee)` pairs.
pub fn occlusion_from_pairs(pairs: &[(usize, usize)], n: usize) -> Result<OcclusionMatrix> {
    let mut m = OcclusionMatrix::empty(n);
    for &(i, j) in pairs {
        check_pair(i, j, n)?;
        m.set(i, j, 1);
    }
    Ok(m)
}

pub fn occlusion_to_pairs(m: &OcclusionMatrix) -> Vec<(usize, usize)> {
    let n = m.n();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| m.occludes(i, j))
        .collect()
}

/// Depth matrix from relation pairs. Unmentioned pairs stay `0/0`; weights
/// are `2 / count`. Repeating a pair with a different relation or count is a
/// data error.
pub fn depth_from_pairs(pairs: &[DepthPair], n: usize) -> Result<DepthMatrix> {
    let mut seen: BTreeMap<(usize, usize), DepthPair> = BTreeMap::new();
    for &p in pairs {
        check_pair(p.i, p.j, n)?;
        let p = p.canonical();
        if let Some(prev) = seen.insert(p.key(), p) {
            if prev != p {
                return Err(Error::Data(format!(
                    "conflicting depth annotations for pair ({}, {})",
                    p.key().0,
                    p.key().1
                )));
            }
        }
    }
    let mut m = DepthMatrix::empty(n);
    for p in seen.values() {
        match p.rel {
            DepthRelation::Front => m.set_front(p.i, p.j),
            DepthRelation::Overlap => m.set_overlap(p.i, p.j),
        }
        m.set_count(p.i, p.j, p.count)?;
    }
    Ok(m)
}

/// Inverse of [`depth_from_pairs`] on its image: pairs sorted by unordered
/// key, overlap pairs with `i < j`.
pub fn depth_to_pairs(m: &DepthMatrix) -> Vec<DepthPair> {
    let n = m.n();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let count = (2.0 / m.weight(i, j)).round() as u32;
            let rel = match (m.get(i, j), m.get(j, i)) {
                (FRONT, _) => Some((i, j, DepthRelation::Front)),
                (_, FRONT) => Some((j, i, DepthRelation::Front)),
                (OVERLAP, _) | (_, OVERLAP) => Some((i, j, DepthRelation::Overlap)),
                _ => None,
            };
            if let Some((a, b, rel)) = rel {
                out.push(DepthPair { i: a, j: b, rel, count });
            }
        }
    }
    out
}

/// Sorted, deduplicated, canonically oriented pair list.
pub fn canonicalize_depth_pairs(pairs: &[DepthPair]) -> Vec<DepthPair> {
    let mut v: Vec<DepthPair> = pairs.iter().map(|p| p.canonical()).collect();
    v.sort_by_key(|p| (p.key(), p.i, p.rel, p.count));
    v.dedup();
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub width: usize,
    pub height: usize,
    pub path: String,
}

/// A predicted pair of order matrices attached to an annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub method: String,
    pub occlusion: Option<OcclusionMatrix>,
    pub depth: Option<DepthMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub image: ImageRef,
    /// Sorted by id; ids are `0..n`.
    pub instances: Vec<InstanceMask>,
    pub occlusion: OcclusionMatrix,
    pub depth: DepthMatrix,
    pub prediction: Option<Prediction>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: usize,
    category: String,
    bbox: [f64; 4],
    mask_rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct OcclusionRecord {
    i: usize,
    j: usize,
}

#[derive(Serialize, Deserialize)]
struct DepthRecord {
    i: usize,
    j: usize,
    rel: DepthRelation,
    #[serde(default = "default_count")]
    count: u32,
}

fn default_count() -> u32 {
    DEFAULT_COUNT
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    occlusion: Option<Vec<OcclusionRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<DepthRecord>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    version: u32,
    image: ImageRef,
    instances: Vec<InstanceRecord>,
    occlusion: Vec<OcclusionRecord>,
    depth: Vec<DepthRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predictions: Option<PredictionRecord>,
}

fn occ_records(m: &OcclusionMatrix) -> Vec<OcclusionRecord> {
    occlusion_to_pairs(m)
        .into_iter()
        .map(|(i, j)| OcclusionRecord { i, j })
        .collect()
}

fn depth_records(m: &DepthMatrix) -> Vec<DepthRecord> {
    depth_to_pairs(m)
        .into_iter()
        .map(|p| DepthRecord {
            i: p.i,
            j: p.j,
            rel: p.rel,
            count: p.count,
        })
        .collect()
}

fn occ_from_records(r: &[OcclusionRecord], n: usize) -> Result<OcclusionMatrix> {
    let pairs: Vec<_> = r.iter().map(|p| (p.i, p.j)).collect();
    occlusion_from_pairs(&pairs, n)
}

fn depth_from_records(r: &[DepthRecord], n: usize) -> Result<DepthMatrix> {
    let pairs: Vec<_> = r
        .iter()
        .map(|p| DepthPair {
            i: p.i,
            j: p.j,
            rel: p.rel,
            count: p.count,
        })
        .collect();
    depth_from_pairs(&pairs, n)
}

impl SceneAnnotation {
    pub fn n(&self) -> usize {
        self.instances.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text)?;
        if file.version != SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported annotation version {}", file.version)));
        }
        let (w, h) = (file.image.width, file.image.height);
        let n = file.instances.len();
        let mut instances = Vec::with_capacity(n);
        for rec in file.instances {
            let bitmap = Bitmap::from_rle(w, h, &rec.mask_rle)?;
            let inst = InstanceMask::new(rec.id, rec.category, bitmap)?;
            if inst.bbox.iter().zip(&rec.bbox).any(|(a, b)| (a - b).abs() > 1e-6) {
                return Err(Error::Data(format!(
                    "instance {}: bbox {:?} is not the tight box {:?} of its mask",
                    rec.id, rec.bbox, inst.bbox
                )));
            }
            instances.push(inst);
        }
        instances.sort_by_key(|i| i.id);
        if instances.iter().enumerate().any(|(k, i)| i.id != k) {
            return Err(Error::Data("instance ids must be dense 0..n-1".into()));
        }
        let prediction = match file.predictions {
            None => None,
            Some(p) => Some(Prediction {
                method: p.method,
                occlusion: p.occlusion.as_deref().map(|r| occ_from_records(r, n)).transpose()?,
                depth: p.depth.as_deref().map(|r| depth_from_records(r, n)).transpose()?,
            }),
        };
        Ok(SceneAnnotation {
            image: file.image,
            instances,
            occlusion: occ_from_records(&file.occlusion, n)?,
            depth: depth_from_records(&file.depth, n)?,
            prediction,
        })
    }

    /// Canonical serialization (compact JSON plus a trailing newline).
    pub fn to_json(&self) -> String {
        let file = AnnotationFile {
            version: SCHEMA_VERSION,
            image: self.image.clone(),
            instances: self
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    id: i.id,
                    category: i.category.clone(),
                    bbox: i.bbox,
                    mask_rle: i.bitmap.to_rle(),
                })
                .collect(),
            occlusion: occ_records(&self.occlusion),
            depth: depth_records(&self.depth),
            predictions: self.prediction.as_ref().map(|p| PredictionRecord {
                method: p.method.clone(),
                occlusion: p.occlusion.as_ref().map(occ_records),
                depth: p.depth.as_ref().map(depth_records),
            }),
        };
        let mut s = serde_json::to_string(&file).expect("annotation serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reorders instances so that new instance `k` is old instance `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let instances = perm
            .iter()
            .enumerate()
            .map(|(k, &old)| InstanceMask {
                id: k,
                ..self.instances[old].clone()
            })
            .collect();
        SceneAnnotation {
            image: self.image.clone(),
            instances,
            occlusion: self.occlusion.permuted(perm),
            depth: self.depth.permuted(perm),
            prediction: self.prediction.as_ref().map(|p| Prediction {
                method: p.method.clone(),
                occlusion: p.occlusion.as_ref().map(|m| m.permuted(perm)),
                depth: p.depth.as_ref().map(|m| m.permuted(perm)),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::NOT_FRONT;
    use proptest::prelude::*;

    fn fp(i: usize, j: usize, count: u32) -> DepthPair {
        DepthPair {
            i,
            j,
            rel: DepthRelation::Front,
            count,
        }
    }

    #[test]
    fn pairs_to_matrix_examples() {
        let m = occlusion_from_pairs(&[], 2).unwrap();
        assert_eq!(m.entries(), &[-1, 0, 0, -1]);
        let d = depth_from_pairs(&[], 2).unwrap();
        assert_eq!(d.entries(), &[-1, 0, 0, -1]);

        let d = depth_from_pairs(&[fp(0, 1, 2)], 2).unwrap();
        assert_eq!((d.get(0, 1), d.get(1, 0)), (FRONT, NOT_FRONT));
        assert_eq!(d.weight(0, 1), 1.0);

        let d = depth_from_pairs(
            &[DepthPair {
                i: 0,
                j: 1,
                rel: DepthRelation::Overlap,
                count: 4,
            }],
            2,
        )
        .unwrap();
        assert_eq!((d.get(0, 1), d.get(1, 0)), (OVERLAP, OVERLAP));
        assert_eq!(d.weight(1, 0), 0.5);
    }

    #[test]
    fn conflicting_duplicates_are_data_errors() {
        assert!(matches!(depth_from_pairs(&[fp(0, 1, 2), fp(1, 0, 2)], 2), Err(Error::Data(_))));
        assert!(matches!(depth_from_pairs(&[fp(0, 1, 2), fp(0, 1, 3)], 2), Err(Error::Data(_))));
        assert!(depth_from_pairs(&[fp(0, 1, 2), fp(0, 1, 2)], 2).is_ok());
        assert!(matches!(depth_from_pairs(&[fp(0, 2, 2)], 2), Err(Error::Data(_))));
        assert!(matches!(occlusion_from_pairs(&[(1, 1)], 2), Err(Error::Data(_))));
    }

    fn arb_pairs() -> impl Strategy<Value = (usize, Vec<DepthPair>)> {
        (2usize..7).prop_flat_map(|n| {
            let pair = (0..n, 0..n, 0u8..2, 1u32..6).prop_filter_map("distinct", |(i, j, r, c)| {
                (i != j).then_some(DepthPair {
                    i,
                    j,
                    rel: if r == 0 { DepthRelation::Front } else { DepthRelation::Overlap },
                    count: c,
                })
            });
            (Just(n), proptest::collection::vec(pair, 0..10))
        })
    }

    proptest! {
        #[test]
        fn matrix_to_pairs_inverts_pairs_to_matrix((n, pairs) in arb_pairs()) {
            // Keep the first relation given for each unordered pair so the list is consistent.
            let mut keep: BTreeMap<(usize, usize), DepthPair> = BTreeMap::new();
            for p in pairs {
                keep.entry(p.key()).or_insert(p);
            }
            let pairs: Vec<_> = keep.into_values().collect();
            let m = depth_from_pairs(&pairs, n).unwrap();
            prop_assert_eq!(depth_to_pairs(&m), canonicalize_depth_pairs(&pairs));
        }
    }

    fn sample() -> SceneAnnotation {
        let mut a = Bitmap::new(4, 4);
        a.set(0, 0, true);
        a.set(1, 0, true);
        let mut b = Bitmap::new(4, 4);
        b.set(3, 3, true);
        SceneAnnotation {
            image: ImageRef {
                width: 4,
                height: 4,
                path: "image.ppm".into(),
            },
            instances: vec![
                InstanceMask::new(0, "person", a).unwrap(),
                InstanceMask::new(1, "red ellipse", b).unwrap(),
            ],
            occlusion: occlusion_from_pairs(&[(1, 0)], 2).unwrap(),
            depth: depth_from_pairs(&[fp(1, 0, 3)], 2).unwrap(),
            prediction: None,
        }
    }

    #[test]
    fn json_is_byte_stable() {
        let ann = sample();
        let text = ann.to_json();
        let back = SceneAnnotation::from_json(&text).unwrap();
        assert_eq!(back, ann);
        assert_eq!(back.to_json(), text);
        assert!(text.starts_with(r#"{"version":1,"image":{"width":4,"height":4,"path":"image.ppm"}"#));
        assert!(text.contains(r#""depth":[{"i":1,"j":0,"rel":"front","count":3}]"#));
    }

    #[test]
    fn instance_storage_order_is_irrelevant() {
        let text = sample().to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut v2 = v.clone();
        v2["instances"].as_array_mut().unwrap().reverse();
        let parsed = SceneAnnotation::from_json(&v2.to_string()).unwrap();
        assert_eq!(parsed.to_json(), text);
    }

    #[test]
    fn wrong_bbox_and_sparse_ids_are_rejected() {
        let text = sample().to_json();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["instances"][0]["bbox"][2] = serde_json::json!(0.9);
        assert!(matches!(SceneAnnotation::from_json(&v.to_string()), Err(Error::Data(_))));
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["instances"][1]["id"] = serde_json::json!(5);
        assert!(matches!(SceneAnnotation::from_json(&v.to_string()), Err(Error::Data(_))));
    }
}
