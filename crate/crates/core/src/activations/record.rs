use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;

/// Every intermediate of one frozen forward pass, per layer, in 64-bit form.
///
/// Row `k` of each per-position matrix belongs to token position `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub tokens: Vec<u32>,
    pub language: Option<LanguageId>,
    /// Token plus position embedding, `[T × d_model]`.
    pub embed: Array2<f64>,
    /// Residual stream entering each block.
    pub resid_pre: Vec<Array2<f64>>,
    /// Residual stream after attention, before the MLP.
    pub resid_mid: Vec<Array2<f64>>,
    pub resid_post: Vec<Array2<f64>>,
    /// LayerNorm denominators `sqrt(var + eps)` per position.
    pub ln1_sigma: Vec<Array1<f64>>,
    pub ln2_sigma: Vec<Array1<f64>>,
    pub lnf_sigma: Array1<f64>,
    /// `attn[layer][head]` is a causal `[T × T]` pattern.
    pub attn: Vec<Vec<Array2<f64>>>,
    /// MLP inputs (post-LN2), `[T × d_model]` per layer.
    pub h: Vec<Array2<f64>>,
    /// MLP outputs, `[T × d_model]` per layer.
    pub m: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ActivationRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.h.len()
    }

    pub fn is_finite(&self) -> bool {
        let all = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        all(&self.embed)
            && all(&self.logits)
            && self.h.iter().all(all)
            && self.m.iter().all(all)
            && self.resid_post.iter().all(all)
    }
}
