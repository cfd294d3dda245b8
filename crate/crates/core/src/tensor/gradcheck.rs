//! Central finite-difference oracle for the tape's analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::nn::{Binder, ParamStore};
use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than
/// relative terms. Central differences of O(10) losses carry roundoff near
/// 1e-9, so the floor sits well above it.
pub const REL_FLOOR: f64 = 1e-4;
/// Entries whose error exceeds this are probed again with a step 100 times
/// smaller. A ReLU kink within one step of the probe point biases the
/// central difference; the smaller step moves it out of range, while a wrong
/// analytic gradient stays wrong at both steps.
pub const REFINE_ABOVE: f64 = 1e-6;
pub const REFINE_FACTOR: f64 = 1e-2;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, flat entry, analytic, numeric) at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Entries that needed the smaller step.
    pub refined: usize,
}

impl GradCheck {
    /// `probe(h)` returns the central difference with step `h`.
    fn record(&mut self, tensor: usize, entry: usize, analytic: f64, step: f64, mut probe: impl FnMut(f64) -> Result<f64>) -> Result<()> {
        let mut numeric = probe(step)?;
        let mut err = relative_error(analytic, numeric);
        if err > REFINE_ABOVE {
            let fine = probe(step * REFINE_FACTOR)?;
            let fine_err = relative_error(analytic, fine);
            self.refined += 1;
            if fine_err < err {
                (numeric, err) = (fine, fine_err);
            }
        }
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((tensor, entry, analytic, numeric));
        }
        Ok(())
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks d f / d inputs for a scalar function of plain tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..work[ti].numel() {
            let orig = work[ti].data()[k];
            report.record(ti, k, grad.data()[k], step, |h| {
                work[ti].data_mut()[k] = orig + h;
                let up = eval(&work);
                work[ti].data_mut()[k] = orig - h;
                let down = eval(&work);
                work[ti].data_mut()[k] = orig;
                Ok((up? - down?) / (2.0 * h))
            })?;
        }
    }
    Ok(report)
}

/// Checks d f / d params for a scalar function of a parameter store. With
/// `per_param = Some((k, rng))` only `k` random entries of each parameter
/// tensor are probed.
pub fn check_params<F, R>(store: &ParamStore, f: F, step: f64, per_param: Option<(usize, &mut R)>) -> Result<GradCheck>
where
    F: for<'t, 's> Fn(&Binder<'t, 's>) -> Result<Var<'t>>,
    R: Rng,
{
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let loss = f(&binder)?;
    tape.backward(loss)?;
    let grads = binder.grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let b = Binder::new(&tape, s);
        Ok(f(&b)?.value().item())
    };

    let mut report = GradCheck::default();
    let mut work = store.clone();
    let mut per_param = per_param;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.param(id).trainable {
            continue;
        }
        let n = store.get(id).numel();
        let entries: Vec<usize> = match per_param.as_mut() {
            Some((k, rng)) if *k < n => sample(*rng, n, *k).into_vec(),
            _ => (0..n).collect(),
        };
        for k in entries {
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let orig = work.get(id).data()[k];
            report.record(id.index(), k, analytic, step, |h| {
                work.get_mut(id).data_mut()[k] = orig + h;
                let up = eval(&work);
                work.get_mut(id).data_mut()[k] = orig - h;
                let down = eval(&work);
                work.get_mut(id).data_mut()[k] = orig;
                Ok((up? - down?) / (2.0 * h))
            })?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_inside_the_step_is_resolved_by_the_finer_probe() {
        let x = Tensor::new([1, 1], vec![3e-6]).unwrap();
        let r = check_inputs(&[x], |_, v| Ok(v[0].relu().sum()), DEFAULT_STEP).unwrap();
        assert_eq!(r.refined, 1);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails_at_both_steps() {
        let mut r = GradCheck::default();
        r.record(0, 0, 1.0, DEFAULT_STEP, |_| Ok(2.0)).unwrap();
        assert!(!r.passes(1e-4));
        assert_eq!(r.refined, 1);
    }

    #[test]
    fn near_zero_gradients_use_the_absolute_floor() {
        assert!(relative_error(0.0, 1e-9) < 1e-4);
        assert!(relative_error(0.0, 1e-7) > 1e-4);
    }
}
