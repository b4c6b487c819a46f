use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{clt_grads, LossComponents};
use super::metrics::{clt_metrics, LayerMetrics};
use super::CltParams;
use crate::activations::ActivationStore;
use crate::error::{bail, Error, Result};
use crate::tinylm::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    pub lambda0: Vec<f64>,
    /// Mean training loss terms since the previous evaluation.
    pub train_loss: Option<LossComponents>,
    pub layers: Vec<LayerMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltTrainReport {
    pub steps: usize,
    pub history: Vec<MetricPoint>,
}

impl CltTrainReport {
    pub fn final_metrics(&self) -> &[LayerMetrics] {
        self.history.last().map_or(&[], |p| &p.layers)
    }
}

/// Per-step multiplicative rate of the sparsity-weight controller.
const LAMBDA0_RATE: f64 = 0.005;
/// Smoothing of the per-layer L0 signal the controller reacts to.
const L0_EMA: f64 = 0.9;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STEPS: usize = 100;

fn mean_components(acc: &[LossComponents]) -> Option<LossComponents> {
    let n = acc.len() as f64;
    let first = acc.first()?;
    let mut out = LossComponents { total: 0.0, mse: 0.0, sparsity: 0.0, dead: 0.0, l0: vec![0.0; first.l0.len()] };
    for c in acc {
        out.total += c.total / n;
        out.mse += c.mse / n;
        out.sparsity += c.sparsity / n;
        out.dead += c.dead / n;
        for (o, v) in out.l0.iter_mut().zip(&c.l0) {
            *o += v / n;
        }
    }
    Some(out)
}

/// AdamW training over token-level batches. Decoder biases are first set to
/// the mean MLP output over the evaluation sample. With `out_dir`, the metric
/// history is written to `clt_history.json` after every evaluation.
pub fn train_clt(
    mut params: CltParams<f32>,
    store: &ActivationStore,
    out_dir: Option<&Path>,
) -> Result<(CltParams<f32>, CltTrainReport)> {
    let cfg = params.config.clone();
    cfg.validate(params.d_model)?;
    if store.n_tokens() == 0 {
        bail!(Validation, "empty activation store");
    }
    let n_eval = store.n_tokens().min(cfg.eval_tokens);
    let warm: Vec<_> = store.m.iter().map(|m| m.slice(ndarray::s![..n_eval, ..]).to_owned()).collect();
    params.warm_start_bias(&warm);

    let mut opt = AdamW::<f32>::new(&params, cfg.beta1, cfg.beta2, 0.0, 0.0);
    let mut report = CltTrainReport { steps: 0, history: Vec::new() };
    let mut acc: Vec<LossComponents> = Vec::new();
    let persist = |report: &CltTrainReport| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("clt_history.json");
            std::fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    let evaluate = |params: &CltParams<f32>, report: &mut CltTrainReport, acc: &mut Vec<LossComponents>| -> Result<()> {
        let layers = clt_metrics(params, store, cfg.eval_tokens)?;
        log::debug!(
            "clt step {}: ev {:?} l0 {:?} lambda0 {:?}",
            report.steps,
            layers.iter().map(|m| m.explained_variance).collect::<Vec<_>>(),
            layers.iter().map(|m| m.mean_l0).collect::<Vec<_>>(),
            params.lambda0
        );
        report.history.push(MetricPoint {
            step: report.steps,
            lambda0: params.lambda0.clone(),
            train_loss: mean_components(acc),
            layers,
        });
        acc.clear();
        persist(report)
    };
    evaluate(&params, &mut report, &mut acc)?;

    let total = cfg.total_steps();
    let mut initial_loss = None;
    let mut diverged_for = 0usize;
    let mut l0_ema: Option<Vec<f64>> = None;
    let mut epoch = 0u64;
    let mut step = 0usize;
    'outer: loop {
        for batch in store.training_pairs(cfg.batch_tokens, cfg.seed, epoch) {
            if step == total {
                break 'outer;
            }
            step += 1;
            let (comps, mut grads) = clt_grads(&params, &batch.h, &batch.m)?;
            let init = *initial_loss.get_or_insert(comps.total);
            if comps.total > DIVERGENCE_FACTOR * init {
                diverged_for += 1;
                if diverged_for >= DIVERGENCE_STEPS {
                    bail!(Numerical, "transcoder training diverged: loss {:.4e} vs initial {:.4e}", comps.total, init);
                }
            } else {
                diverged_for = 0;
            }
            opt.step(&mut params, &mut grads, cfg.lr_at(step))?;
            for t in params.thresh.iter_mut() {
                t.mapv_inplace(|v| v.max(0.0));
            }
            if cfg.adapt_lambda0 {
                // The sparsity weight stays at its initial value until learning-rate
                // warmup ends, so the first evaluations measure reconstruction alone.
                let adapting = step > cfg.warmup_steps;
                let ema = l0_ema.get_or_insert_with(|| comps.l0.clone());
                for ((e, &l0), lam) in ema.iter_mut().zip(&comps.l0).zip(params.lambda0.iter_mut()) {
                    *e = L0_EMA * *e + (1.0 - L0_EMA) * l0;
                    if adapting {
                        let err = ((*e - cfg.target_l0) / cfg.target_l0).clamp(-1.0, 1.0);
                        *lam = (*lam * (LAMBDA0_RATE * err).exp()).clamp(1e-6, 1e4);
                    }
                }
            }
            acc.push(comps);
            report.steps = step;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != total {
                evaluate(&params, &mut report, &mut acc)?;
            }
        }
        epoch += 1;
        if total == 0 {
            break;
        }
    }
    evaluate(&params, &mut report, &mut acc)?;
    Ok((params, report))
}
