//! Multilingual feature statistics over a transcoder and an activation
//! store: per-language activity, entropy scores, layer profiles, language
//! features, unembedding alignment and cluster diagnostics.

mod activity;
mod probes;

use serde::{Deserialize, Serialize};

use crate::clt::FeatureKey;
use crate::error::{bail, Result};

pub use activity::{
    annotate_graph, feature_activity, feature_overlap, feature_profiles, identify_language_features,
    layerwise_entropy_profile, token_activation_frequency, write_layer_profile_csv, write_profiles_jsonl,
    ActivityTable, FeatureActivity, LanguageFeature, LayerProfileRow, TOP_SEQUENCES,
};
pub use probes::{
    cluster_activation_strength, cluster_direction, embedding_edge_strength, feature_token_alignment, Alignment, Cluster,
    TokenAlignment,
};

/// Which sequences count towards a feature's per-language tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Every sequence in the store.
    General,
    /// Only the feature's 100 most strongly activating sequences.
    Top100,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::General => "general",
            Variant::Top100 => "top100",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilingualProfile {
    pub feature: FeatureKey,
    pub variant: Variant,
    /// Active sequences per language.
    pub counts: Vec<usize>,
    /// `None` when the feature never fires on the counted sequences.
    pub distribution: Option<Vec<f64>>,
    pub entropy: Option<f64>,
    /// Fraction of all tokens on which the feature is active.
    pub activation_rate: f64,
    /// Fraction of sequences with at least one active token.
    pub sequence_rate: f64,
    /// Strongest sequences as `(sequence id, max activation)`.
    pub top_sequences: Vec<(usize, f32)>,
}

/// Normalize per-language counts; `None` when every count is zero.
pub fn language_distribution(counts: &[usize]) -> Option<Vec<f64>> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
///
/// The result is clamped to `[0, ln L]`; rounding in the sum can otherwise
/// land one ulp outside the exact bounds.
pub fn multilingual_score(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        bail!(Validation, "empty distribution");
    }
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        bail!(Validation, "distribution entry {bad} is not a probability");
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        bail!(Validation, "distribution sums to {sum}, expected 1");
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}
