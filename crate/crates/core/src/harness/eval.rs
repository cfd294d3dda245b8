//! Decoupled evaluation: predicted segments are matched to ground truth by
//! Hungarian assignment on `1 − IoU`, prediction matrices are reordered by
//! the assignment, and only then are order metrics computed.

use rayon::prelude::*;

use super::model::OrderModel;
use crate::backbone::{coarse_masks, oracle_backbone, OracleConfig};
use crate::baselines::{area_depth, area_occlusion, yaxis_depth, yaxis_occlusion, PairwiseNet};
use crate::error::{Error, Result};
use crate::metrics::{match_segments, occlusion_prf, whdr, Aggregation, MetricsAccumulator, MetricsReport, Prf, Whdr, UNMATCHED};
use crate::order::{Bitmap, DepthMatrix, OcclusionMatrix};
use crate::synth::{SceneSample, FEATURE_STRIDE};
use crate::tensor::nn::ParamStore;

/// Orders predicted for one image over its own predicted segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub masks: Vec<Bitmap>,
    pub occlusion: Option<OcclusionMatrix>,
    pub depth: Option<DepthMatrix>,
}

impl ScenePrediction {
    pub fn nothing(masks: Vec<Bitmap>) -> Self {
        ScenePrediction {
            masks,
            occlusion: None,
            depth: None,
        }
    }
}

pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, sample: &SceneSample) -> Result<ScenePrediction>;
}

pub struct HeadPredictor<'a> {
    pub model: &'a OrderModel,
    pub coherent_depth: bool,
}

impl Predictor for HeadPredictor<'_> {
    fn name(&self) -> String {
        "holistic".into()
    }

    fn predict(&self, sample: &SceneSample) -> Result<ScenePrediction> {
        let p = match self.model.predict(sample) {
            Ok(p) => p,
            Err(Error::NothingToOrder(_)) => return Ok(ScenePrediction::nothing(Vec::new())),
            Err(e) => return Err(e),
        };
        let occlusion = p.output.occlusion_logits.is_some().then(|| p.output.occlusion()).transpose()?;
        let depth = match (p.output.depth_logits.is_some(), self.coherent_depth) {
            (false, _) => None,
            (true, false) => Some(p.output.depth()?),
            (true, true) => Some(p.output.coherent_depth()?),
        };
        Ok(ScenePrediction {
            masks: p.masks,
            occlusion,
            depth,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heuristic {
    YAxis,
    Area,
}

/// Mask heuristics on the oracle backbone's decoded masks.
pub struct HeuristicPredictor {
    pub heuristic: Heuristic,
    pub oracle: OracleConfig,
}

fn oracle_masks(sample: &SceneSample, cfg: &OracleConfig) -> Result<Vec<Bitmap>> {
    let out = oracle_backbone(sample, cfg)?;
    let masks = out.masks(0.5)?;
    Ok(masks
        .into_iter()
        .zip(&out.confidences)
        .filter(|(_, &c)| c > crate::head::CONFIDENCE_THRESHOLD)
        .map(|(m, _)| m)
        .collect())
}

impl Predictor for HeuristicPredictor {
    fn name(&self) -> String {
        match self.heuristic {
            Heuristic::YAxis => "y_axis".into(),
            Heuristic::Area => "area".into(),
        }
    }

    fn predict(&self, sample: &SceneSample) -> Result<ScenePrediction> {
        let masks = oracle_masks(sample, &self.oracle)?;
        let (occ, depth) = match self.heuristic {
            Heuristic::YAxis => (yaxis_occlusion(&masks).0, yaxis_depth(&masks).0),
            Heuristic::Area => (area_occlusion(&masks).0, area_depth(&masks).0),
        };
        Ok(ScenePrediction {
            masks,
            occlusion: Some(occ),
            depth: Some(depth),
        })
    }
}

/// Pairwise network on the oracle backbone's masks, upsampled to image
/// resolution.
pub struct PairwisePredictor<'a> {
    pub net: &'a PairwiseNet,
    pub store: &'a ParamStore,
    pub oracle: OracleConfig,
}

impl Predictor for PairwisePredictor<'_> {
    fn name(&self) -> String {
        "pairwise".into()
    }

    fn predict(&self, sample: &SceneSample) -> Result<ScenePrediction> {
        let masks = oracle_masks(sample, &self.oracle)?;
        let full: Vec<Bitmap> = masks.iter().map(|m| m.upsample(FEATURE_STRIDE)).collect();
        let (occ, depth) = self.net.predict(self.store, &sample.image, &full)?;
        Ok(ScenePrediction {
            masks,
            occlusion: Some(occ),
            depth: Some(depth),
        })
    }
}

/// Prediction matrices in ground-truth order. Ground-truth instances without
/// a matched prediction get occlusion 0 and depth [`UNMATCHED`], so their
/// annotated pairs count as errors.
pub fn align_to_ground_truth(pred: &ScenePrediction, gt_masks: &[Bitmap]) -> Result<(Option<OcclusionMatrix>, Option<DepthMatrix>)> {
    let n = gt_masks.len();
    let mut of_gt: Vec<Option<usize>> = vec![None; n];
    if !pred.masks.is_empty() {
        for &(p, g) in &match_segments(&pred.masks, gt_masks)?.pairs {
            of_gt[g] = Some(p);
        }
    }
    let occ = pred.occlusion.as_ref().map(|m| {
        let mut out = OcclusionMatrix::empty(n);
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (of_gt[i], of_gt[j]) {
                    if i != j {
                        out.set(i, j, m.get(a, b));
                    }
                }
            }
        }
        out
    });
    let depth = pred.depth.as_ref().map(|m| {
        let mut out = DepthMatrix::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = match (of_gt[i], of_gt[j]) {
                        (Some(a), Some(b)) => m.get(a, b),
                        _ => UNMATCHED,
                    };
                    out.set(i, j, v);
                }
            }
        }
        out
    });
    Ok((occ, depth))
}

/// Per-sample scores, `None` when the sample has fewer than two instances.
pub fn score_sample(pred: &ScenePrediction, sample: &SceneSample) -> Result<Option<(Prf, Whdr)>> {
    if sample.n() < 2 {
        return Ok(None);
    }
    let gt_masks = coarse_masks(sample);
    let (occ, depth) = align_to_ground_truth(pred, &gt_masks)?;
    let prf = occ.map(|o| occlusion_prf(&o, &sample.occlusion)).transpose()?.unwrap_or_default();
    let w = depth.map(|d| whdr(&d, &sample.depth)).transpose()?.unwrap_or_default();
    Ok(Some((prf, w)))
}

pub fn evaluate(samples: &[SceneSample], predictor: &dyn Predictor, aggregation: Aggregation) -> Result<MetricsReport> {
    let scores: Vec<Result<Option<(Prf, Whdr)>>> = samples
        .par_iter()
        .map(|s| score_sample(&predictor.predict(s)?, s))
        .collect();
    let mut acc = MetricsAccumulator::new(aggregation);
    for s in scores {
        match s? {
            Some((p, w)) => acc.add(p, w),
            None => acc.skip(),
        }
    }
    Ok(acc.finish(predictor.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{FRONT, OVERLAP};
    use crate::synth::{generate_sample, SynthConfig};

    /// Predicts the ground truth itself, optionally over permuted segments.
    struct Cheat {
        perm: Option<Vec<usize>>,
    }

    impl Predictor for Cheat {
        fn name(&self) -> String {
            "cheat".into()
        }
        fn predict(&self, s: &SceneSample) -> Result<ScenePrediction> {
            let s = match &self.perm {
                Some(p) => s.permuted(&p[..s.n()]),
                None => s.clone(),
            };
            Ok(ScenePrediction {
                masks: coarse_masks(&s),
                occlusion: Some(s.occlusion),
                depth: Some(s.depth),
            })
        }
    }

    fn samples() -> Vec<SceneSample> {
        let cfg = SynthConfig {
            n_min: 3,
            n_max: 3,
            ..Default::default()
        };
        (0..12).map(|k| generate_sample(k, &cfg).unwrap()).collect()
    }

    #[test]
    fn perfect_predictions_score_perfectly_in_any_order() {
        let s = samples();
        for perm in [None, Some(vec![2, 0, 1])] {
            let r = evaluate(&s, &Cheat { perm }, Aggregation::Macro).unwrap();
            assert_eq!(r.whdr_all.value, Some(0.0));
            if r.f1.samples > 0 {
                assert_eq!(r.f1.value, Some(1.0));
            }
            assert_eq!(r.samples, 12);
        }
    }

    #[test]
    fn unmatched_instances_count_as_errors() {
        let s = &samples()[0];
        let gt = coarse_masks(s);
        let pred = ScenePrediction {
            masks: gt[..2].to_vec(),
            occlusion: Some(OcclusionMatrix::empty(2)),
            depth: Some({
                let mut d = DepthMatrix::empty(2);
                d.set_front(0, 1);
                d
            }),
        };
        let (o, d) = align_to_ground_truth(&pred, &gt).unwrap();
        let (o, d) = (o.unwrap(), d.unwrap());
        assert_eq!(d.get(0, 1), FRONT);
        assert_eq!((d.get(0, 2), d.get(2, 1)), (UNMATCHED, UNMATCHED));
        assert!(!o.occludes(2, 0));
        let w = whdr(&d, &s.depth).unwrap();
        assert!(w.all().unwrap() >= 2.0 / 3.0 - 1e-12);
        let (_, none) = align_to_ground_truth(&ScenePrediction::nothing(vec![]), &gt).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn all_zero_occlusion_has_zero_recall() {
        struct Zero;
        impl Predictor for Zero {
            fn name(&self) -> String {
                "zero".into()
            }
            fn predict(&self, s: &SceneSample) -> Result<ScenePrediction> {
                let mut d = DepthMatrix::empty(s.n());
                for i in 0..s.n() {
                    for j in i + 1..s.n() {
                        d.set_overlap(i, j);
                    }
                }
                assert_eq!(d.get(0, 1), OVERLAP);
                Ok(ScenePrediction {
                    masks: coarse_masks(s),
                    occlusion: Some(OcclusionMatrix::empty(s.n())),
                    depth: Some(d),
                })
            }
        }
        let r = evaluate(&samples(), &Zero, Aggregation::Macro).unwrap();
        assert_eq!(r.recall.value, Some(0.0));
        assert_eq!(r.precision.value, None);
    }

    #[test]
    fn heuristics_run_through_the_protocol() {
        let s = samples();
        for h in [Heuristic::YAxis, Heuristic::Area] {
            let p = HeuristicPredictor {
                heuristic: h,
                oracle: OracleConfig::default(),
            };
            let r = evaluate(&s, &p, Aggregation::Macro).unwrap();
            let v = r.whdr_all.value.unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
