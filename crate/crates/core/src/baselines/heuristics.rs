//! Mask- and depth-map-only order heuristics.
//!
//! Empty masks have no score. Their pairs are reported as depth overlap and
//! as no occlusion, and their indices are returned so callers can flag them.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::order::{Bitmap, DepthMatrix, OcclusionMatrix};

/// Depth order from one score per instance; larger scores are closer and
/// scores within `tau` of each other overlap.
fn depth_from_scores(scores: &[Option<f64>], tau: f64) -> DepthMatrix {
    let n = scores.len();
    let mut m = DepthMatrix::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            match (scores[i], scores[j]) {
                (Some(a), Some(b)) if (a - b).abs() > tau => {
                    if a > b {
                        m.set_front(i, j)
                    } else {
                        m.set_front(j, i)
                    }
                }
                _ => m.set_overlap(i, j),
            }
        }
    }
    m
}

fn empty_ids(masks: &[Bitmap]) -> Vec<usize> {
    masks.iter().enumerate().filter(|(_, m)| m.is_empty()).map(|(i, _)| i).collect()
}

/// Inclusive pixel boxes touch or overlap after growing each by one pixel.
fn in_contact(a: &Bitmap, b: &Bitmap) -> bool {
    match (a.pixel_bounds(), b.pixel_bounds()) {
        (Some(a), Some(b)) => a.0 <= b.2 + 1 && b.0 <= a.2 + 1 && a.1 <= b.3 + 1 && b.1 <= a.3 + 1,
        _ => false,
    }
}

/// `i` occludes `j` iff the masks are in contact and `i` scores strictly
/// higher. Equal scores give no edge.
fn occlusion_from_scores(masks: &[Bitmap], scores: &[Option<f64>]) -> OcclusionMatrix {
    let n = masks.len();
    let mut m = OcclusionMatrix::empty(n);
    for i in 0..n {
        for j in 0..n {
            if let (Some(a), Some(b)) = (scores[i], scores[j]) {
                if i != j && a > b && in_contact(&masks[i], &masks[j]) {
                    m.set(i, j, 1);
                }
            }
        }
    }
    m
}

fn centroid_y(masks: &[Bitmap]) -> Vec<Option<f64>> {
    masks.iter().map(|m| m.centroid().map(|c| c.1)).collect()
}

fn areas(masks: &[Bitmap]) -> Vec<Option<f64>> {
    masks.iter().map(|m| (!m.is_empty()).then(|| m.area() as f64)).collect()
}

/// Lower in the image (larger centroid y) is closer. Returns the matrix and
/// the empty-mask instances.
pub fn yaxis_depth(masks: &[Bitmap]) -> (DepthMatrix, Vec<usize>) {
    (depth_from_scores(&centroid_y(masks), 0.0), empty_ids(masks))
}

pub fn yaxis_occlusion(masks: &[Bitmap]) -> (OcclusionMatrix, Vec<usize>) {
    (occlusion_from_scores(masks, &centroid_y(masks)), empty_ids(masks))
}

/// Bigger is closer.
pub fn area_depth(masks: &[Bitmap]) -> (DepthMatrix, Vec<usize>) {
    (depth_from_scores(&areas(masks), 0.0), empty_ids(masks))
}

pub fn area_occlusion(masks: &[Bitmap]) -> (OcclusionMatrix, Vec<usize>) {
    (occlusion_from_scores(masks, &areas(masks)), empty_ids(masks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStatistic {
    /// Intersecting `[min, max]` ranges overlap; otherwise ordered.
    Minmax,
    Mean,
    Median,
}

/// Depth order from a metric depth map (smaller is closer). `+inf` pixels are
/// ignored. `tau` applies to the mean and median statistics.
pub fn depth_from_depthmap(
    depth_map: &[f64],
    masks: &[Bitmap],
    statistic: DepthStatistic,
    tau: f64,
) -> Result<(DepthMatrix, Vec<usize>)> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau must be non-negative, got {tau}")));
    }
    let values: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| {
            if m.bits().len() != depth_map.len() {
                return Err(dim_err!("mask has {} pixels, depth map {}", m.bits().len(), depth_map.len()));
            }
            Ok(m.bits()
                .iter()
                .zip(depth_map)
                .filter(|(&b, z)| b && z.is_finite())
                .map(|(_, &z)| z)
                .collect())
        })
        .collect::<Result<_>>()?;
    let excluded: Vec<usize> = values.iter().enumerate().filter(|(_, v)| v.is_empty()).map(|(i, _)| i).collect();
    let matrix = match statistic {
        DepthStatistic::Minmax => {
            let ranges: Vec<Option<(f64, f64)>> = values
                .iter()
                .map(|v| {
                    (!v.is_empty()).then(|| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |r, &z| (r.0.min(z), r.1.max(z))))
                })
                .collect();
            let n = masks.len();
            let mut m = DepthMatrix::empty(n);
            for i in 0..n {
                for j in i + 1..n {
                    match (ranges[i], ranges[j]) {
                        (Some(a), Some(b)) if a.1 < b.0 => m.set_front(i, j),
                        (Some(a), Some(b)) if b.1 < a.0 => m.set_front(j, i),
                        _ => m.set_overlap(i, j),
                    }
                }
            }
            m
        }
        DepthStatistic::Mean | DepthStatistic::Median => {
            let stat = |v: &Vec<f64>| -> Option<f64> {
                if v.is_empty() {
                    return None;
                }
                Some(if statistic == DepthStatistic::Mean {
                    v.iter().sum::<f64>() / v.len() as f64
                } else {
                    let mut s = v.clone();
                    s.sort_by(f64::total_cmp);
                    let k = s.len() / 2;
                    if s.len() % 2 == 1 {
                        s[k]
                    } else {
                        0.5 * (s[k - 1] + s[k])
                    }
                })
            };
            // Negate so that "larger score is closer" holds.
            let scores: Vec<Option<f64>> = values.iter().map(|v| stat(v).map(|d| -d)).collect();
            depth_from_scores(&scores, tau)
        }
    };
    Ok((matrix, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{validate_depth, validate_occlusion, FRONT, OVERLAP};

    fn block(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Bitmap {
        let mut b = Bitmap::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                b.set(x, y, true);
            }
        }
        b
    }

    #[test]
    fn yaxis_examples() {
        // Centroids at y = 0.8 and 0.3 of a 10-row image.
        let low = block(10, 10, 0, 7, 2, 9);
        let high = block(10, 10, 0, 2, 2, 4);
        let (m, ex) = yaxis_depth(&[low.clone(), high.clone()]);
        assert_eq!(m.get(0, 1), FRONT);
        assert!(ex.is_empty());
        let (m, _) = yaxis_depth(&[low.clone(), low.clone()]);
        assert_eq!(m.get(0, 1), OVERLAP);
        let mid = block(10, 10, 0, 5, 2, 6);
        let (m, _) = yaxis_depth(&[high, mid, low]);
        assert!(validate_depth(&m).is_empty());
        assert_eq!((m.get(2, 1), m.get(1, 0), m.get(2, 0)), (FRONT, FRONT, FRONT));
    }

    #[test]
    fn area_examples() {
        let big = block(20, 20, 0, 0, 10, 10);
        let small = block(20, 20, 10, 0, 15, 5);
        let (d, _) = area_depth(&[small.clone(), big.clone()]);
        assert_eq!(d.get(1, 0), FRONT);
        let (o, _) = area_occlusion(&[small.clone(), big.clone()]);
        assert!(o.occludes(1, 0) && !o.occludes(0, 1));

        let far = block(20, 20, 15, 15, 20, 20);
        let (o, _) = area_occlusion(&[big.clone(), far]);
        assert!(validate_occlusion(&o).is_empty() && !o.occludes(0, 1) && !o.occludes(1, 0));

        let twin = block(20, 20, 10, 0, 20, 10);
        let (o, _) = area_occlusion(&[big, twin]);
        assert!(!o.occludes(0, 1) && !o.occludes(1, 0));
    }

    #[test]
    fn depthmap_examples() {
        // Two instances on a 4-pixel strip.
        let a = block(4, 1, 0, 0, 2, 1);
        let b = block(4, 1, 2, 0, 4, 1);
        let map = [1.0, 3.0, 2.0, 5.0];
        let (m, _) = depth_from_depthmap(&map, &[a.clone(), b.clone()], DepthStatistic::Minmax, 0.0).unwrap();
        assert_eq!(m.get(0, 1), OVERLAP);

        let map = [2.0, 2.0, 5.0, 5.0];
        let (m, _) = depth_from_depthmap(&map, &[a.clone(), b.clone()], DepthStatistic::Mean, 0.0).unwrap();
        assert_eq!(m.get(0, 1), FRONT);
        let (m, _) = depth_from_depthmap(&map, &[a.clone(), b.clone()], DepthStatistic::Median, 3.0).unwrap();
        assert_eq!(m.get(0, 1), OVERLAP);

        let whole = block(4, 1, 0, 0, 4, 1);
        for s in [DepthStatistic::Minmax, DepthStatistic::Mean, DepthStatistic::Median] {
            let (m, _) = depth_from_depthmap(&map, &[whole.clone(), whole.clone()], s, 0.0).unwrap();
            assert_eq!(m.get(0, 1), OVERLAP);
        }

        let (m, ex) = depth_from_depthmap(&map, &[a, Bitmap::new(4, 1)], DepthStatistic::Mean, 0.0).unwrap();
        assert_eq!((ex, m.get(0, 1)), (vec![1], OVERLAP));
    }
}
