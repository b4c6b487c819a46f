//! Feature-space interventions on a replacement forward pass: each MLP
//! output becomes the transcoder reconstruction from (edited) feature
//! activations plus the error term of the unedited pass.

mod replace;
mod swap;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::clt::FeatureKey;
use crate::error::{bail, Result};

pub use replace::{replacement_forward, run_with_interventions, ReplacementPass};
pub use swap::{
    coefficient_sweep, default_down_range, default_late_layers, default_up_range, language_swap, write_sweep_csv, SweepCell, SweepReport, SwapOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum EditMode {
    Zero,
    Set(f64),
    Add(f64),
    Scale(f64),
}

impl EditMode {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            EditMode::Zero => 0.0,
            EditMode::Set(v) => v,
            EditMode::Add(v) => z + v,
            EditMode::Scale(c) => z * c,
        }
    }

    fn coefficient(self) -> Option<f64> {
        match self {
            EditMode::Zero => None,
            EditMode::Set(v) | EditMode::Add(v) | EditMode::Scale(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEdit {
    pub feature: FeatureKey,
    /// `None` edits every position.
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
    /// Written inline: `"mode": "zero"` or `"mode": "add", "value": 1.5`.
    #[serde(flatten)]
    pub mode: EditMode,
}

impl FeatureEdit {
    pub fn everywhere(feature: FeatureKey, mode: EditMode) -> Self {
        Self { feature, positions: None, mode }
    }

    pub fn at(feature: FeatureKey, positions: Range<usize>, mode: EditMode) -> Self {
        Self { feature, positions: Some(positions.collect()), mode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// Applied in order at each layer, after encoding.
    pub edits: Vec<FeatureEdit>,
    /// Token whose rank is reported before and after.
    #[serde(default)]
    pub target_token: Option<u32>,
    /// Position whose next-token logits are compared; defaults to the last.
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    5
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self { edits: Vec::new(), target_token: None, position: None, top_k: default_top_k() }
    }
}

impl InterventionSpec {
    pub fn validate(&self, n_layers: usize, d_features: usize, len: usize) -> Result<()> {
        if self.top_k == 0 {
            bail!(Validation, "top_k must be at least 1");
        }
        if let Some(p) = self.position.filter(|&p| p >= len) {
            bail!(Validation, "readout position {p} outside a {len}-token prompt");
        }
        for e in &self.edits {
            if e.feature.layer >= n_layers || e.feature.index >= d_features {
                bail!(
                    Validation,
                    "edit targets feature {} but the transcoder has {n_layers} layers × {d_features} features",
                    e.feature
                );
            }
            if let Some(c) = e.mode.coefficient().filter(|c| !c.is_finite()) {
                bail!(Validation, "edit on {} has non-finite coefficient {c}", e.feature);
            }
            if let Some(p) = e.positions.iter().flatten().find(|&&p| p >= len) {
                bail!(Validation, "edit on {} targets position {p} outside a {len}-token prompt", e.feature);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub position: usize,
    /// `(token, logit)` pairs, best first.
    pub baseline_top: Vec<(u32, f64)>,
    pub edited_top: Vec<(u32, f64)>,
    pub target_token: Option<u32>,
    pub rank_before: Option<usize>,
    pub rank_after: Option<usize>,
    pub edits: Vec<FeatureEdit>,
    /// Full logit rows at `position`; kept out of serialized reports.
    #[serde(skip)]
    pub baseline_logits: Vec<f64>,
    #[serde(skip)]
    pub edited_logits: Vec<f64>,
}

impl InterventionResult {
    /// Whether the target token moved strictly closer to rank 1.
    pub fn improved(&self) -> Option<bool> {
        Some(self.rank_after? < self.rank_before?)
    }
}
