//! Training loop: per-sample gradients in parallel, summed in a fixed order,
//! AdamW with a step schedule, best-by-validation parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, HeadPredictor};
use super::loss::{order_losses, LossWeights};
use super::model::{BackboneKind, OrderModel};
use crate::backbone::coarse_masks;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::order::Bitmap;
use crate::synth::SceneSample;
use crate::tensor::nn::{batch_grads, Binder, ParamStore};
use crate::tensor::optim::AdamW;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean loss over the batch of this step.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub score: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub backbone_losses: Vec<LossRecord>,
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Step whose parameters were kept.
    pub best_step: usize,
}

pub struct TrainOutcome {
    /// Model carrying the best-by-validation parameters.
    pub model: OrderModel,
    pub log: TrainLog,
}

/// Validation score, higher is better: the mean of occlusion F1 and
/// `1 − WHDR(all)` over whichever of the two is defined.
pub fn validation_score(r: &MetricsReport) -> f64 {
    let parts: Vec<f64> = [r.f1.value, r.whdr_all.value.map(|w| 1.0 - w)].into_iter().flatten().collect();
    if parts.is_empty() {
        f64::NEG_INFINITY
    } else {
        parts.iter().sum::<f64>() / parts.len() as f64
    }
}

/// Order loss of one training sample.
pub fn sample_loss<'t>(
    model: &OrderModel,
    b: &Binder<'t, '_>,
    sample: &SceneSample,
    gt_masks: &[Bitmap],
    weights: LossWeights,
) -> Result<Var<'t>> {
    let f = model.features(b, sample, false)?;
    let sel = model.select_for_training(&f, gt_masks)?;
    let out = model.head_forward(b, &sel)?;
    order_losses(&out.layers, &sample.occlusion, &sample.depth, weights)
}

fn sample_batch(rng: &mut ChaCha8Rng, usable: &[usize], size: usize) -> Vec<usize> {
    (0..size).map(|_| usable[rng.gen_range(0..usable.len())]).collect()
}

fn check_finite(step: usize, loss: f64, finite_grads: bool) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    if !finite_grads {
        return Err(Error::Diverged {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains a model from `cfg` and returns it with the best validation
/// parameters. `log` receives one human-readable line per logged event.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut model = OrderModel::new(cfg.model.clone())?;
    let usable: Vec<usize> = (0..train_set.len()).filter(|&k| train_set[k].n() >= 2).collect();
    if usable.is_empty() && (tc.iterations > 0 || tc.backbone_iterations > 0) {
        return Err(Error::NothingToOrder(0));
    }
    let gt_masks: Vec<Vec<Bitmap>> = train_set.iter().map(coarse_masks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut out = TrainLog::default();

    if model.config.backbone.kind == BackboneKind::Tiny && tc.backbone_iterations > 0 {
        model.backbone_only();
        let mut opt = AdamW::new(tc.adamw);
        for step in 0..tc.backbone_iterations {
            let batch = sample_batch(&mut rng, &usable, tc.batch_size);
            let (losses, mut grads) = batch_grads(&model.store, &batch, |b, &k| {
                model
                    .features(b, &train_set[k], true)?
                    .mask_loss
                    .ok_or_else(|| Error::Contract("learned backbone returned no mask loss".into()))
            })?;
            grads.scale(1.0 / batch.len() as f64);
            let loss = mean(&losses);
            check_finite(step, loss, grads.is_finite())?;
            opt.step(&mut model.store, &grads, tc.backbone_lr)?;
            if step % tc.log_every == 0 || step + 1 == tc.backbone_iterations {
                out.backbone_losses.push(LossRecord {
                    step,
                    loss,
                    lr: tc.backbone_lr,
                });
                log(&format!("backbone step {step:>6}  mask loss {loss:.5}"));
            }
        }
    }
    model.freeze_backbone();

    let weights = LossWeights {
        occlusion: tc.lambda_occlusion,
        depth: tc.lambda_depth,
    };
    let mut opt = AdamW::new(tc.adamw);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut validate = |model: &OrderModel, step: usize, out: &mut TrainLog, log: &mut dyn FnMut(&str)| -> Result<()> {
        if val_set.is_empty() {
            best = Some((f64::NEG_INFINITY, step, model.store.clone()));
            return Ok(());
        }
        let predictor = HeadPredictor {
            model,
            coherent_depth: cfg.eval.coherent_depth,
        };
        let report = evaluate(val_set, &predictor, cfg.eval.aggregation)?;
        let score = validation_score(&report);
        log(&format!(
            "validate step {step:>6}  f1 {}  whdr_all {}  score {score:.4}",
            fmt_opt(report.f1.value),
            fmt_opt(report.whdr_all.value)
        ));
        out.validations.push(ValidationRecord { step, score, report });
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, step, model.store.clone()));
        }
        Ok(())
    };

    for step in 0..tc.iterations {
        if tc.eval_every > 0 && step > 0 && step % tc.eval_every == 0 {
            validate(&model, step, &mut out, log)?;
        }
        let lr = tc.schedule.lr_at(step, tc.iterations);
        let batch = sample_batch(&mut rng, &usable, tc.batch_size);
        let (losses, mut grads) = batch_grads(&model.store, &batch, |b, &k| {
            sample_loss(&model, b, &train_set[k], &gt_masks[k], weights)
        })?;
        grads.scale(1.0 / batch.len() as f64);
        let loss = mean(&losses);
        check_finite(step, loss, grads.is_finite())?;
        opt.step(&mut model.store, &grads, lr)?;
        if step % tc.log_every == 0 || step + 1 == tc.iterations {
            out.losses.push(LossRecord { step, loss, lr });
            log(&format!("step {step:>6}  loss {loss:.5}  lr {lr:.2e}"));
        }
    }
    validate(&model, tc.iterations, &mut out, log)?;

    let (_, best_step, store) = best.expect("validated at least once");
    out.best_step = best_step;
    model.store = store;
    Ok(TrainOutcome { model, log: out })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}
