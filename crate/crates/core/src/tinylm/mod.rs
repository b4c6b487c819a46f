//! Minimal decoder-only transformer: pre-LN blocks, GELU MLPs, learned
//! positions and an untied unembedding, with hand-written backpropagation.

mod backward;
mod checkpoint;
mod forward;
mod optim;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use backward::{batch_loss, loss_and_grads, Batch, IGNORE};
pub use checkpoint::{load_checkpoint, model_digest, save_checkpoint, CHECKPOINT_KIND};
pub use forward::{
    capture, forward, forward_cache, forward_with_mlp, mlp_forward, gelu, gelu_grad, layer_norm, BlockCache, ForwardCache, LnCache,
    LN_EPS,
};
pub use optim::{clip_by_global_norm, AdamW, LrSchedule};
pub use params::{Block, ModelParams};
pub use train::{
    build_lm_windows, evaluate_loss, train_lm, LmTrainReport, LossPoint, TrainingStream,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Residual-branch dropout, applied only while training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ffn: 256,
            vocab_size: 1024,
            context_len: 32,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.context_len < 16 {
            bail!(Config, "context_len must be at least 16, got {}", self.context_len);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1), got {}", self.dropout);
        }
        Ok(())
    }

    /// Width of the concatenated attention heads.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, a, f, v, c) = (
            self.d_model,
            self.attn_width(),
            self.d_ffn,
            self.vocab_size,
            self.context_len,
        );
        let block = 2 * d + 3 * (d * a + a) + (a * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + c * d + self.n_layers * block + 2 * d + d * v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` at the end of cosine decay.
    pub min_lr_ratio: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Training tokens; `None` means 20 × parameter count.
    pub total_tokens: Option<usize>,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_steps: 2000,
            min_lr_ratio: 0.1,
            batch_size: 64,
            total_tokens: None,
            eval_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn token_budget(&self, config: &ModelConfig) -> usize {
        self.total_tokens.unwrap_or(20 * config.param_count())
    }
}
