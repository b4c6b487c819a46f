use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{batch_loss, loss_and_grads, Batch};
use super::checkpoint::save_checkpoint;
use super::optim::{AdamW, LrSchedule};
use super::{ModelConfig, ModelParams, TrainPlan};
use crate::corpus::{LabeledSequence, LanguageId, Specials};
use crate::error::{bail, Error, Result};
use crate::linalg::Scalar;

/// Training windows and per-language held-out sequences, each a full
/// `BOS … EOS` token list of at most `context_len + 1` ids.
#[derive(Debug, Clone, Default)]
pub struct TrainingStream {
    pub train: Vec<Vec<u32>>,
    pub validation: Vec<(LanguageId, Vec<Vec<u32>>)>,
    pub pad: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub tokens: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub steps: usize,
    pub tokens_seen: usize,
    /// `ln V`, the loss of a uniform predictor.
    pub uniform_loss: f64,
    pub train: Vec<LossPoint>,
    pub validation: Vec<(LanguageId, Vec<LossPoint>)>,
    pub checkpoints: Vec<PathBuf>,
}

impl LmTrainReport {
    pub fn final_validation(&self) -> Vec<(LanguageId, f64)> {
        self.validation
            .iter()
            .map(|(l, pts)| (*l, pts.last().map_or(f64::NAN, |p| p.loss)))
            .collect()
    }
}

/// `BOS tokens… EOS`, truncated to `context_len + 1` ids so that the shifted
/// inputs fit the context window.
pub fn build_lm_windows(
    corpus: &[LabeledSequence],
    specials: Specials,
    context_len: usize,
) -> Vec<(LanguageId, Vec<u32>)> {
    corpus
        .iter()
        .map(|s| {
            let mut w = Vec::with_capacity(s.tokens.len() + 2);
            w.push(specials.bos);
            w.extend_from_slice(&s.tokens);
            w.push(specials.eos);
            w.truncate(context_len + 1);
            (s.language, w)
        })
        .collect()
}

/// Token-weighted mean cross-entropy over `seqs`.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    seqs: &[Vec<u32>],
    pad: u32,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::from_sequences(chunk, pad)?;
        let n = batch.n_targets();
        total += batch_loss(params, &batch)? * n as f64;
        count += n;
    }
    if count == 0 {
        bail!(Validation, "no evaluation targets");
    }
    Ok(total / count as f64)
}

fn mean_targets(seqs: &[Vec<u32>]) -> f64 {
    seqs.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>() as f64 / seqs.len() as f64
}

/// Train from `config.seed` initialization. With `out_dir`, checkpoints are
/// written every `plan.checkpoint_every` steps and at the end, along with a
/// `loss_history.json`.
pub fn train_lm(
    config: &ModelConfig,
    plan: &TrainPlan,
    stream: &TrainingStream,
    out_dir: Option<&Path>,
) -> Result<(ModelParams<f32>, LmTrainReport)> {
    config.validate()?;
    plan.validate()?;
    if stream.train.len() < plan.batch_size {
        bail!(
            Validation,
            "training stream holds {} sequences, fewer than one batch of {}",
            stream.train.len(),
            plan.batch_size
        );
    }
    let mut params = ModelParams::<f32>::init(config)?;
    let budget = plan.token_budget(config);
    let per_step = plan.batch_size as f64 * mean_targets(&stream.train);
    let total_steps = ((budget as f64 / per_step).ceil() as usize).max(1);
    let schedule = LrSchedule {
        peak: plan.lr,
        warmup_steps: plan.warmup_steps.min(total_steps / 2),
        total_steps,
        min_ratio: plan.min_lr_ratio,
    };
    log::info!(
        "training {} params for {total_steps} steps ({budget} tokens)",
        config.param_count()
    );
    let mut opt = AdamW::new(&params, plan.beta1, plan.beta2, plan.weight_decay, plan.grad_clip);
    let mut order_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..stream.train.len()).collect();
    let mut cursor = order.len();

    let mut report = LmTrainReport {
        steps: 0,
        tokens_seen: 0,
        uniform_loss: (config.vocab_size as f64).ln(),
        train: Vec::new(),
        validation: stream.validation.iter().map(|(l, _)| (*l, Vec::new())).collect(),
        checkpoints: Vec::new(),
    };
    let eval = |params: &ModelParams<f32>, report: &mut LmTrainReport| -> Result<()> {
        let (step, tokens) = (report.steps, report.tokens_seen);
        for (i, (_, seqs)) in stream.validation.iter().enumerate() {
            let loss = evaluate_loss(params, seqs, stream.pad, plan.batch_size)?;
            report.validation[i].1.push(LossPoint { step, tokens, loss });
        }
        Ok(())
    };
    eval(&params, &mut report)?;

    let mut seqs: Vec<&[u32]> = Vec::with_capacity(plan.batch_size);
    for step in 1..=total_steps {
        seqs.clear();
        while seqs.len() < plan.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            seqs.push(&stream.train[order[cursor]]);
            cursor += 1;
        }
        let batch = Batch::from_sequences(&seqs, stream.pad)?;
        let rng = (config.dropout > 0.0).then_some(&mut dropout_rng);
        let (loss, mut grads) = loss_and_grads(&params, &batch, rng)?;
        opt.step(&mut params, &mut grads, schedule.at(step))?;
        report.tokens_seen += batch.n_targets();
        report.steps = step;
        report.train.push(LossPoint { step, tokens: report.tokens_seen, loss });
        let last = step == total_steps;
        if plan.eval_every > 0 && (step % plan.eval_every == 0 || last) {
            eval(&params, &mut report)?;
            log::debug!("step {step}: train loss {loss:.4}");
        }
        if let Some(dir) = out_dir {
            if (plan.checkpoint_every > 0 && step % plan.checkpoint_every == 0) || last {
                let path = dir.join(format!("lm_step{step:06}.ckpt"));
                save_checkpoint(&params, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if plan.eval_every == 0 {
        eval(&params, &mut report)?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("loss_history.json");
        let json = serde_json::to_vec_pretty(&report)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok((params, report))
}
