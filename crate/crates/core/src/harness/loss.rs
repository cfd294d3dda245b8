//! Order losses: weighted BCE on occlusion logits plus weighted
//! cross-entropy on depth logits, each averaged over off-diagonal pairs.

use crate::error::{dim_err, Error, Result};
use crate::head::LayerLogits;
use crate::order::{DepthMatrix, OcclusionMatrix};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub occlusion: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            occlusion: 5.0,
            depth: 5.0,
        }
    }
}

/// Flat targets and pair weights (`1/(n(n−1))` off the diagonal, 0 on it).
fn targets(occ: &OcclusionMatrix, depth: &DepthMatrix) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let n = occ.n();
    if depth.n() != n {
        return Err(dim_err!("occlusion has {n} instances, depth {}", depth.n()));
    }
    if n < 2 {
        return Err(Error::NothingToOrder(n));
    }
    let pair_w = 1.0 / (n * (n - 1)) as f64;
    let mut o = vec![0.0; n * n];
    let mut d = vec![0usize; n * n];
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ov, dv) = (occ.get(i, j), depth.get(i, j));
            if !(0..=1).contains(&ov) || !(0..=2).contains(&dv) {
                return Err(Error::Data(format!(
                    "order target ({i},{j}) is occlusion {ov}, depth {dv}; off-diagonal entries must be labelled"
                )));
            }
            o[i * n + j] = ov as f64;
            d[i * n + j] = dv as usize;
            w[i * n + j] = pair_w;
        }
    }
    Ok((o, d, w))
}

/// `λ_o·BCE + λ_d·CE` summed over every supervised decoder layer. Tasks
/// without logits contribute nothing.
pub fn order_losses<'t>(
    layers: &[LayerLogits<'t>],
    occ: &OcclusionMatrix,
    depth: &DepthMatrix,
    weights: LossWeights,
) -> Result<Var<'t>> {
    let (o, d, w) = targets(occ, depth)?;
    let mut total: Option<Var<'t>> = None;
    let mut push = |v: Var<'t>| -> Result<()> {
        total = Some(match total {
            Some(t) => t.add(&v)?,
            None => v,
        });
        Ok(())
    };
    for l in layers {
        if let Some(x) = l.occlusion {
            push(x.bce_with_logits(&o, &w)?.scale(weights.occlusion))?;
        }
        if let Some(x) = l.depth {
            push(x.cross_entropy(&d, &w)?.scale(weights.depth))?;
        }
    }
    total.ok_or_else(|| Error::Config("no task logits to supervise".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn gt() -> (OcclusionMatrix, DepthMatrix) {
        let occ = OcclusionMatrix::from_rows(&[vec![-1, 1, 0], vec![0, -1, 1], vec![0, 0, -1]]).unwrap();
        let mut depth = DepthMatrix::empty(3);
        depth.set_front(0, 1);
        depth.set_front(1, 2);
        depth.set_overlap(0, 2);
        (occ, depth)
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let (occ, depth) = gt();
        let tape = Tape::inference();
        let o: Vec<f64> = occ.entries().iter().map(|&v| if v == 1 { 50.0 } else { -50.0 }).collect();
        let mut dl = vec![0.0; 27];
        for k in 0..9 {
            let c = depth.entries()[k].max(0) as usize;
            dl[k * 3 + c] = 50.0;
        }
        let layer = LayerLogits {
            occlusion: Some(tape.constant(Tensor::new([9, 1], o).unwrap())),
            depth: Some(tape.constant(Tensor::new([9, 3], dl).unwrap())),
        };
        let loss = order_losses(&[layer], &occ, &depth, LossWeights::default()).unwrap();
        assert!(loss.value().item() < 1e-12);
    }

    #[test]
    fn uniform_depth_logits_cost_ln3() {
        let (occ, depth) = gt();
        let tape = Tape::inference();
        let layer = LayerLogits {
            occlusion: None,
            depth: Some(tape.constant(Tensor::zeros([9, 3]))),
        };
        let w = LossWeights {
            occlusion: 1.0,
            depth: 1.0,
        };
        let loss = order_losses(&[layer, layer], &occ, &depth, w).unwrap();
        assert!((loss.value().item() - 2.0 * 3f64.ln()).abs() < 1e-12);

        // Zero occlusion logits: ln 2 per pair.
        let layer = LayerLogits {
            occlusion: Some(tape.constant(Tensor::zeros([9, 1]))),
            depth: None,
        };
        let loss = order_losses(&[layer], &occ, &depth, w).unwrap();
        assert!((loss.value().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unlabelled_pairs_are_rejected() {
        let (occ, _) = gt();
        let tape = Tape::inference();
        let layer = LayerLogits {
            occlusion: None,
            depth: Some(tape.constant(Tensor::zeros([9, 3]))),
        };
        let mut bad = DepthMatrix::empty(3);
        bad.set(0, 1, -1);
        assert!(matches!(
            order_losses(&[layer], &occ, &bad, LossWeights::default()),
            Err(Error::Data(_))
        ));
    }
}
