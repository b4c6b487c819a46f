//! Cross-layer transcoder: per-layer sparse encoders over MLP inputs whose
//! decoders jointly reconstruct the MLP outputs of the same and later layers.

mod loss;
mod metrics;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use loss::{clt_grads, clt_loss, decode_batch, encode_batch, CltForward, LossComponents};
pub use metrics::{clt_metrics, LayerMetrics};
pub use params::{clt_digest, load_clt, save_clt, CltParams, CLT_KIND};
pub use train::{train_clt, CltTrainReport, MetricPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `z = pre · 1[pre > θ]` with a learned per-feature θ; the threshold
    /// gradient uses a rectangle kernel of width `bandwidth`.
    JumpRelu { threshold: f64, bandwidth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltConfig {
    pub d_features: usize,
    pub activation: Activation,
    pub lambda0: f64,
    /// Scale inside the tanh sparsity penalty.
    pub c: f64,
    pub target_l0: f64,
    /// Adapt `lambda0` multiplicatively so the running L0 tracks `target_l0`.
    /// Adaptation starts after `warmup_steps`.
    pub adapt_lambda0: bool,
    pub lambda_df: f64,
    /// The dead-feature penalty pushes pre-activations up towards `exp(tau)`.
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub batch_tokens: usize,
    pub eval_every: usize,
    /// Tokens used for explained variance, L0 and dead-feature counts.
    pub eval_tokens: usize,
    pub seed: u64,
}

impl Default for CltConfig {
    fn default() -> Self {
        Self {
            d_features: 512,
            activation: Activation::JumpRelu { threshold: 0.03, bandwidth: 1.0 },
            lambda0: 2.0,
            c: 4.0,
            target_l0: 10.0,
            adapt_lambda0: true,
            lambda_df: 1e-5,
            tau: 0.03f64.ln(),
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 1000,
            decay_steps: 3749,
            batch_tokens: 1024,
            eval_every: 250,
            eval_tokens: 200_000,
            seed: 42,
        }
    }
}

impl CltConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.d_features < d_model {
            bail!(Config, "d_features {} must be at least d_model {d_model}", self.d_features);
        }
        if self.lambda0 < 0.0 || self.lambda_df < 0.0 {
            bail!(Config, "penalty weights must be non-negative");
        }
        if let Activation::JumpRelu { threshold, bandwidth } = self.activation {
            if !(bandwidth > 0.0) || threshold < 0.0 {
                bail!(Config, "JumpReLU needs bandwidth > 0 and threshold >= 0");
            }
        }
        if self.batch_tokens == 0 || !(self.lr > 0.0) {
            bail!(Config, "batch_tokens and lr must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.decay_steps
    }

    /// Linear warmup then linear decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let done = (step - self.warmup_steps) as f64 / self.decay_steps.max(1) as f64;
        self.lr * (1.0 - done).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub layer: usize,
    pub index: usize,
}

impl std::fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}/{}", self.layer, self.index)
    }
}
