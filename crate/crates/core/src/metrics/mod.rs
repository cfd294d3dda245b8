//! Segment matching and order metrics.
//!
//! Occlusion is scored by recall, precision and F1 over off-diagonal
//! entries. Depth is scored by the weighted human disagreement rate (WHDR):
//! the weighted fraction of unordered pairs whose predicted relation differs
//! from the annotation, split into pairs annotated as distinct (front/behind),
//! as overlapping, and all pairs.

mod hungarian;
pub mod report;

pub use hungarian::{hungarian, Assignment};
pub use report::{Aggregation, MetricsAccumulator, MetricsReport};

use crate::error::{dim_err, Result};
use crate::order::{Bitmap, DepthMatrix, OcclusionMatrix, OVERLAP};

/// Depth entry marking a pair whose prediction is missing; it never agrees
/// with an annotation.
pub const UNMATCHED: i8 = -2;

/// Assignment of predicted to ground-truth segments with cost `1 − IoU`.
pub fn match_segments(pred: &[Bitmap], gt: &[Bitmap]) -> Result<Assignment> {
    let mut cost = Vec::with_capacity(pred.len() * gt.len());
    for p in pred {
        for g in gt {
            if (p.width(), p.height()) != (g.width(), g.height()) {
                return Err(dim_err!(
                    "mask sizes differ: {}×{} vs {}×{}",
                    p.width(),
                    p.height(),
                    g.width(),
                    g.height()
                ));
            }
            cost.push(1.0 - p.iou(g));
        }
    }
    hungarian(&cost, pred.len(), gt.len())
}

/// Per-sample occlusion scores. A ratio with an empty denominator is `None`;
/// F1 is defined only when both precision and recall are.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub tp: usize,
    pub predicted: usize,
    pub actual: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, actual: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let recall = ratio(tp, actual);
        let precision = ratio(tp, predicted);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Prf {
            tp,
            predicted,
            actual,
            recall,
            precision,
            f1,
        }
    }
}

pub fn occlusion_prf(pred: &OcclusionMatrix, gt: &OcclusionMatrix) -> Result<Prf> {
    if pred.n() != gt.n() {
        return Err(dim_err!("prediction has {} instances, ground truth {}", pred.n(), gt.n()));
    }
    let (mut tp, mut predicted, mut actual) = (0, 0, 0);
    for i in 0..gt.n() {
        for j in 0..gt.n() {
            let (p, g) = (pred.occludes(i, j), gt.occludes(i, j));
            tp += (p && g) as usize;
            predicted += p as usize;
            actual += g as usize;
        }
    }
    Ok(Prf::from_counts(tp, predicted, actual))
}

/// Weighted disagreement sums per category.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WhdrSums {
    pub wrong: [f64; 3],
    pub total: [f64; 3],
}

/// Category indices into [`WhdrSums`] and [`Whdr`].
pub const DISTINCT: usize = 0;
pub const OVERLAPPING: usize = 1;
pub const ALL: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Whdr {
    pub sums: WhdrSums,
    /// `[distinct, overlap, all]`; `None` for an empty category.
    pub rates: [Option<f64>; 3],
}

impl Whdr {
    pub fn from_sums(sums: WhdrSums) -> Self {
        let rates = std::array::from_fn(|k| (sums.total[k] > 0.0).then(|| sums.wrong[k] / sums.total[k]));
        Whdr { sums, rates }
    }

    pub fn distinct(&self) -> Option<f64> {
        self.rates[DISTINCT]
    }

    pub fn overlap(&self) -> Option<f64> {
        self.rates[OVERLAPPING]
    }

    pub fn all(&self) -> Option<f64> {
        self.rates[ALL]
    }
}

/// WHDR over unordered annotated pairs, weighted by the ground truth's pair
/// weights. A pair disagrees when the predicted ordered pair of entries
/// differs from the annotated one. Unannotated (`0/0`) pairs are skipped.
pub fn whdr(pred: &DepthMatrix, gt: &DepthMatrix) -> Result<Whdr> {
    if pred.n() != gt.n() {
        return Err(dim_err!("prediction has {} instances, ground truth {}", pred.n(), gt.n()));
    }
    let mut sums = WhdrSums::default();
    for i in 0..gt.n() {
        for j in i + 1..gt.n() {
            let g = (gt.get(i, j), gt.get(j, i));
            if g == (0, 0) {
                continue;
            }
            let cat = if g.0 == OVERLAP { OVERLAPPING } else { DISTINCT };
            let w = gt.weight(i, j);
            let wrong = if (pred.get(i, j), pred.get(j, i)) != g { w } else { 0.0 };
            for k in [cat, ALL] {
                sums.total[k] += w;
                sums.wrong[k] += wrong;
            }
        }
    }
    Ok(Whdr::from_sums(sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::annotation::{depth_from_pairs, DepthPair, DepthRelation};

    #[test]
    fn prf_examples() {
        let gt = OcclusionMatrix::from_rows(&[vec![-1, 1, 1], vec![0, -1, 0], vec![0, 0, -1]]).unwrap();
        let p = occlusion_prf(&gt, &gt).unwrap();
        assert_eq!((p.recall, p.precision, p.f1), (Some(1.0), Some(1.0), Some(1.0)));

        let pred = OcclusionMatrix::from_rows(&[vec![-1, 1, 0], vec![1, -1, 0], vec![0, 0, -1]]).unwrap();
        let p = occlusion_prf(&pred, &gt).unwrap();
        assert_eq!((p.recall, p.precision, p.f1), (Some(0.5), Some(0.5), Some(0.5)));

        let p = occlusion_prf(&OcclusionMatrix::empty(3), &gt).unwrap();
        assert_eq!((p.recall, p.precision, p.f1), (Some(0.0), None, None));

        assert!(occlusion_prf(&OcclusionMatrix::empty(2), &gt).is_err());
    }

    fn pair(i: usize, j: usize, rel: DepthRelation, count: u32) -> DepthPair {
        DepthPair { i, j, rel, count }
    }

    #[test]
    fn whdr_hand_example() {
        use DepthRelation::*;
        let gt = depth_from_pairs(&[pair(0, 1, Front, 2), pair(0, 2, Overlap, 4)], 3).unwrap();
        let mut pred = DepthMatrix::empty(3);
        pred.set_front(0, 1);
        pred.set_front(0, 2);
        let w = whdr(&pred, &gt).unwrap();
        assert_eq!(w.all(), Some(0.5 / 1.5));
        assert_eq!(w.distinct(), Some(0.0));
        assert_eq!(w.overlap(), Some(1.0));

        let w = whdr(&gt, &gt).unwrap();
        assert_eq!(w.rates, [Some(0.0), Some(0.0), Some(0.0)]);

        let only_front = depth_from_pairs(&[pair(0, 1, Front, 2)], 2).unwrap();
        assert_eq!(whdr(&only_front, &only_front).unwrap().overlap(), None);
    }

    #[test]
    fn match_segments_examples() {
        let mut a = Bitmap::new(4, 1);
        a.set(0, 0, true);
        a.set(1, 0, true);
        let mut b = Bitmap::new(4, 1);
        b.set(2, 0, true);
        b.set(3, 0, true);
        let m = match_segments(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 0.0);
        let m = match_segments(&[b.clone(), a.clone()], &[a, b]).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }
}
