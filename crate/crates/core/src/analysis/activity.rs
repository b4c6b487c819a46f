use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{language_distribution, multilingual_score, MultilingualProfile, Variant};
use crate::activations::ActivationStore;
use crate::attribution::{AttributionGraph, MultilingualBadge, NodeKind};
use crate::clt::{encode_batch, CltParams, FeatureKey};
use crate::corpus::LanguageId;
use crate::error::{bail, Error, Result};
use crate::linalg::argsort_desc;

/// Strongest sequences kept per exported profile.
pub const TOP_SEQUENCES: usize = 10;
const TOP100: usize = 100;
const SEQ_CHUNK: usize = 256;

/// Per-sequence and per-token activity of one feature over a store.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureActivity {
    pub active: Vec<bool>,
    /// `[n_sequences × seq_len]`.
    pub activations: Array2<f32>,
}

/// Activity of every feature, summarized in one pass over the store.
#[derive(Debug, Clone)]
pub struct ActivityTable {
    pub n_layers: usize,
    pub d_features: usize,
    pub n_languages: usize,
    pub languages: Vec<LanguageId>,
    /// `seq_max[l]`: `[n_sequences × F]` largest activation in each sequence
    /// (zero when the feature never fires there).
    pub seq_max: Vec<Array2<f32>>,
    /// `token_counts[l]`: `[n_languages × F]` active tokens per language.
    pub token_counts: Vec<Array2<u32>>,
    pub tokens_per_language: Vec<usize>,
}

fn check_dims(store: &ActivationStore, clt: &CltParams<f32>) -> Result<()> {
    if store.n_layers() != clt.n_layers || store.manifest.d_model != clt.d_model {
        bail!(
            Validation,
            "store is {} layers × {} dims but the transcoder is {} × {}",
            store.n_layers(),
            store.manifest.d_model,
            clt.n_layers,
            clt.d_model
        );
    }
    Ok(())
}

impl ActivityTable {
    pub fn compute(store: &ActivationStore, clt: &CltParams<f32>) -> Result<Self> {
        check_dims(store, clt)?;
        let n_languages = store.manifest.per_language_counts.len();
        let (n_seq, t, f) = (store.n_sequences(), store.seq_len(), clt.d_features());
        if let Some(bad) = store.languages.iter().find(|l| l.0 >= n_languages) {
            bail!(Validation, "sequence labelled {bad} but the store declares {n_languages} languages");
        }
        let mut tokens_per_language = vec![0; n_languages];
        for l in &store.languages {
            tokens_per_language[l.0] += t;
        }
        let mut seq_max = Vec::with_capacity(clt.n_layers);
        let mut token_counts = Vec::with_capacity(clt.n_layers);
        for layer in 0..clt.n_layers {
            let mut mx = Array2::<f32>::zeros((n_seq, f));
            let mut counts = Array2::<u32>::zeros((n_languages, f));
            for start in (0..n_seq).step_by(SEQ_CHUNK) {
                let end = (start + SEQ_CHUNK).min(n_seq);
                let (_, z) = encode_batch(clt, store.h[layer].slice(s![start * t..end * t, ..]), layer);
                for seq in start..end {
                    let lang = store.languages[seq].0;
                    let mut mrow = mx.row_mut(seq);
                    for row in z.slice(s![(seq - start) * t..(seq - start + 1) * t, ..]).outer_iter() {
                        for (n, &v) in row.iter().enumerate() {
                            if v > 0.0 {
                                counts[[lang, n]] += 1;
                                if v > mrow[n] {
                                    mrow[n] = v;
                                }
                            }
                        }
                    }
                }
            }
            seq_max.push(mx);
            token_counts.push(counts);
        }
        Ok(Self {
            n_layers: clt.n_layers,
            d_features: f,
            n_languages,
            languages: store.languages.clone(),
            seq_max,
            token_counts,
            tokens_per_language,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.languages.len()
    }

    pub fn check(&self, key: FeatureKey) -> Result<()> {
        if key.layer >= self.n_layers || key.index >= self.d_features {
            bail!(Validation, "feature {key} is out of range");
        }
        Ok(())
    }

    /// Active sequences, strongest first, ties by ascending sequence id.
    pub fn top_sequences(&self, key: FeatureKey, k: usize) -> Vec<(usize, f32)> {
        let col = self.seq_max[key.layer].column(key.index);
        let vals: Vec<f64> = col.iter().map(|&v| v as f64).collect();
        argsort_desc(&vals).into_iter().filter(|&i| col[i] > 0.0).take(k).map(|i| (i, col[i])).collect()
    }

    /// Active-sequence counts per language (the tallies behind `p_l`).
    pub fn sequence_counts(&self, key: FeatureKey, variant: Variant) -> Vec<usize> {
        let mut counts = vec![0; self.n_languages];
        match variant {
            Variant::General => {
                for (seq, &v) in self.seq_max[key.layer].column(key.index).iter().enumerate() {
                    if v > 0.0 {
                        counts[self.languages[seq].0] += 1;
                    }
                }
            }
            Variant::Top100 => {
                for (seq, _) in self.top_sequences(key, TOP100) {
                    counts[self.languages[seq].0] += 1;
                }
            }
        }
        counts
    }

    /// Fraction of all stored tokens on which the feature fires.
    pub fn activation_rate(&self, key: FeatureKey) -> f64 {
        let total: usize = self.tokens_per_language.iter().sum();
        let active: u64 = self.token_counts[key.layer].column(key.index).iter().map(|&c| c as u64).sum();
        if total == 0 {
            0.0
        } else {
            active as f64 / total as f64
        }
    }

    pub fn sequence_rate(&self, key: FeatureKey) -> f64 {
        let n = self.n_sequences();
        let active = self.seq_max[key.layer].column(key.index).iter().filter(|&&v| v > 0.0).count();
        if n == 0 {
            0.0
        } else {
            active as f64 / n as f64
        }
    }

    pub fn profile(&self, key: FeatureKey, variant: Variant) -> MultilingualProfile {
        let counts = self.sequence_counts(key, variant);
        let distribution = language_distribution(&counts);
        let entropy = distribution.as_ref().map(|p| multilingual_score(p).expect("normalized counts"));
        MultilingualProfile {
            feature: key,
            variant,
            counts,
            distribution,
            entropy,
            activation_rate: self.activation_rate(key),
            sequence_rate: self.sequence_rate(key),
            top_sequences: self.top_sequences(key, TOP_SEQUENCES),
        }
    }

    fn keys(&self) -> impl Iterator<Item = FeatureKey> + '_ {
        (0..self.n_layers).flat_map(move |layer| (0..self.d_features).map(move |index| FeatureKey { layer, index }))
    }
}

/// Per-token activations of a single feature, computed directly from the store.
pub fn feature_activity(store: &ActivationStore, clt: &CltParams<f32>, key: FeatureKey) -> Result<FeatureActivity> {
    check_dims(store, clt)?;
    if key.layer >= clt.n_layers || key.index >= clt.d_features() {
        bail!(Validation, "feature {key} is out of range");
    }
    let (n_seq, t) = (store.n_sequences(), store.seq_len());
    let w = clt.enc_w[key.layer].row(key.index);
    let b = clt.enc_b[key.layer][key.index];
    let floor = clt.thresh.get(key.layer).map_or(0.0, |th| th[key.index]);
    let pre = store.h[key.layer].dot(&w) + b;
    let acts = pre.mapv(|p| if p > floor { p } else { 0.0 });
    let activations = acts.into_shape_with_order((n_seq, t)).expect("token-major store");
    let active = activations.outer_iter().map(|r| r.iter().any(|&v| v > 0.0)).collect();
    Ok(FeatureActivity { active, activations })
}

/// Fraction of `language`'s tokens on which the feature fires.
pub fn token_activation_frequency(table: &ActivityTable, key: FeatureKey, language: LanguageId) -> Result<f64> {
    table.check(key)?;
    let Some(&tokens) = table.tokens_per_language.get(language.0) else {
        bail!(Validation, "language {language} is not in the store");
    };
    Ok(if tokens == 0 {
        0.0
    } else {
        table.token_counts[key.layer][[language.0, key.index]] as f64 / tokens as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFeature {
    pub feature: FeatureKey,
    pub top_language: LanguageId,
    /// Share of the top language in the normalized per-language token rates.
    pub top_probability: f64,
    /// Token activation rate within the top language.
    pub language_frequency: f64,
    /// Token activation rate over all tokens.
    pub frequency: f64,
}

/// Features whose token activation rate within their dominant language is
/// at least `freq_threshold`. Dominance is measured on per-language token
/// rates (active tokens over that language's tokens), normalized to sum to
/// one, so a feature firing on most tokens of one language and rarely
/// elsewhere gets a top probability near one.
pub fn identify_language_features(table: &ActivityTable, freq_threshold: f64) -> Vec<LanguageFeature> {
    table
        .keys()
        .filter_map(|key| {
            let rates: Vec<f64> = (0..table.n_languages)
                .map(|l| match table.tokens_per_language[l] {
                    0 => 0.0,
                    n => table.token_counts[key.layer][[l, key.index]] as f64 / n as f64,
                })
                .collect();
            let total: f64 = rates.iter().sum();
            if total == 0.0 {
                return None;
            }
            let top = (0..rates.len()).fold(0, |best, i| if rates[i] > rates[best] { i } else { best });
            if rates[top] < freq_threshold {
                return None;
            }
            Some(LanguageFeature {
                feature: key,
                top_language: LanguageId(top),
                top_probability: rates[top] / total,
                language_frequency: rates[top],
                frequency: table.activation_rate(key),
            })
        })
        .collect()
}

/// Share of the features active in `a` that are also active in `b`;
/// `None` when nothing fires in `a`.
pub fn feature_overlap(table: &ActivityTable, a: LanguageId, b: LanguageId) -> Option<f64> {
    let active = |lang: LanguageId, key: FeatureKey| {
        table.token_counts[key.layer].get([lang.0, key.index]).is_some_and(|&c| c > 0)
    };
    let in_a: Vec<FeatureKey> = table.keys().filter(|&k| active(a, k)).collect();
    if in_a.is_empty() {
        return None;
    }
    let both = in_a.iter().filter(|&&k| active(b, k)).count();
    Some(both as f64 / in_a.len() as f64)
}

pub fn feature_profiles(table: &ActivityTable, variant: Variant) -> Vec<MultilingualProfile> {
    table.keys().map(|k| table.profile(k, variant)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileRow {
    pub layer: usize,
    pub variant: Variant,
    /// Mean of `H(f) × activation_rate(f)` over live features.
    pub weighted: Option<f64>,
    /// Plain mean of `H(f)` over live features.
    pub unweighted: Option<f64>,
    pub live_features: usize,
}

/// Per-layer entropy summary. Features that never fire have no distribution
/// and are left out; a layer without live features reports `None`.
pub fn layerwise_entropy_profile(table: &ActivityTable, variant: Variant) -> Vec<LayerProfileRow> {
    (0..table.n_layers)
        .map(|layer| {
            let (mut w, mut u, mut live) = (0.0, 0.0, 0usize);
            for index in 0..table.d_features {
                let p = table.profile(FeatureKey { layer, index }, variant);
                if let Some(h) = p.entropy {
                    w += h * p.activation_rate;
                    u += h;
                    live += 1;
                }
            }
            let mean = |s: f64| (live > 0).then(|| s / live as f64);
            if live == 0 {
                log::warn!("layer {layer} has no live features for the {} profile", variant.name());
            }
            LayerProfileRow { layer, variant, weighted: mean(w), unweighted: mean(u), live_features: live }
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// CSV with columns `layer,variant,weighted,unweighted,live_features`;
/// undefined means are left empty.
pub fn write_layer_profile_csv(rows: &[LayerProfileRow], path: &Path) -> Result<()> {
    create_parent(path)?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["layer", "variant", "weighted", "unweighted", "live_features"]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.variant.name().to_string(),
            opt(r.weighted),
            opt(r.unweighted),
            r.live_features.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line, in (layer, index) order.
pub fn write_profiles_jsonl(profiles: &[MultilingualProfile], path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut out = String::new();
    for p in profiles {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Attach each feature node's general language distribution and entropy.
pub fn annotate_graph(graph: &mut AttributionGraph, table: &ActivityTable) {
    for node in graph.nodes.iter_mut().filter(|n| n.kind == NodeKind::Feature) {
        let (Some(layer), Some(index)) = (node.layer, node.feature_index) else { continue };
        let key = FeatureKey { layer, index };
        if table.check(key).is_err() {
            continue;
        }
        let p = table.profile(key, Variant::General);
        if let (Some(distribution), Some(entropy)) = (p.distribution, p.entropy) {
            node.multilingual = Some(MultilingualBadge { distribution, entropy });
        }
    }
}
