use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ActivationRecord;
use crate::container;
use crate::corpus::{LabeledSequence, LanguageId};
use crate::error::{bail, Error, Result};
use crate::linalg::Scalar;
use crate::tinylm::{capture, forward_cache, model_digest, ModelParams};

pub const SHARD_KIND: &str = "activation-shard";
pub const MANIFEST_FILE: &str = "manifest.json";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Windows per shard file.
    pub shard_size: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { n_sequences: 5000, seq_len: 16, seed: 0, shard_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub first_sequence: usize,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub model_digest: String,
    pub seq_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub per_language_counts: Vec<usize>,
    pub shards: Vec<ShardInfo>,
}

/// Fixed-length windows with their per-layer MLP inputs and outputs.
///
/// Activations are token-major: row `seq · seq_len + pos` of `h[ℓ]` and
/// `m[ℓ]` belongs to position `pos` of window `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub manifest: StoreManifest,
    pub tokens: Vec<Vec<u32>>,
    pub languages: Vec<LanguageId>,
    pub h: Vec<Array2<f32>>,
    pub m: Vec<Array2<f32>>,
}

/// Per-language token streams cut into `BOS + (seq_len − 1)` windows.
pub fn language_windows(
    corpus: &[LabeledSequence],
    n_languages: usize,
    seq_len: usize,
    bos: u32,
    eos: u32,
) -> Vec<Vec<Vec<u32>>> {
    let body = seq_len - 1;
    let mut streams: Vec<Vec<u32>> = vec![Vec::new(); n_languages];
    for s in corpus {
        if s.language.0 < n_languages {
            streams[s.language.0].extend_from_slice(&s.tokens);
            streams[s.language.0].push(eos);
        }
    }
    streams
        .iter()
        .map(|st| {
            st.chunks_exact(body)
                .map(|c| {
                    let mut w = Vec::with_capacity(seq_len);
                    w.push(bos);
                    w.extend_from_slice(c);
                    w
                })
                .collect()
        })
        .collect()
}

/// Capture `config.n_sequences` windows split evenly over `n_languages`
/// (the first `n mod L` languages receive one extra).
pub fn build_activation_store<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &[LabeledSequence],
    n_languages: usize,
    specials: crate::corpus::Specials,
    config: &StoreConfig,
) -> Result<ActivationStore> {
    let mc = &params.config;
    if config.seq_len < 2 || config.seq_len > mc.context_len {
        bail!(Config, "seq_len {} must lie in [2, {}]", config.seq_len, mc.context_len);
    }
    if n_languages == 0 || config.n_sequences == 0 {
        bail!(Config, "store needs at least one language and one sequence");
    }
    let wanted: Vec<usize> = (0..n_languages)
        .map(|l| config.n_sequences / n_languages + usize::from(l < config.n_sequences % n_languages))
        .collect();
    let mut windows = language_windows(corpus, n_languages, config.seq_len, specials.bos, specials.eos);
    let shortfall: Vec<String> = windows
        .iter()
        .zip(&wanted)
        .enumerate()
        .filter(|(_, (w, &n))| w.len() < n)
        .map(|(l, (w, &n))| format!("L{l}: need {n}, have {} (short by {})", w.len(), n - w.len()))
        .collect();
    if !shortfall.is_empty() {
        bail!(Validation, "corpus too small for the activation store: {}", shortfall.join("; "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tokens = Vec::with_capacity(config.n_sequences);
    let mut languages = Vec::with_capacity(config.n_sequences);
    for (l, w) in windows.iter_mut().enumerate() {
        w.shuffle(&mut rng);
        for win in w.drain(..).take(wanted[l]) {
            tokens.push(win);
            languages.push(LanguageId(l));
        }
    }

    // Capture in 64-bit so stored pairs satisfy FFN(h) = m tightly.
    let p64 = params.cast::<f64>();
    let n_tok = tokens.len() * config.seq_len;
    let mut h = vec![Array2::<f32>::zeros((n_tok, mc.d_model)); mc.n_layers];
    let mut m = h.clone();
    const CHUNK: usize = 64;
    for (c, chunk) in tokens.chunks(CHUNK).enumerate() {
        let flat: Vec<u32> = chunk.concat();
        let fc = forward_cache(&p64, &flat, chunk.len(), None)?;
        let row0 = c * CHUNK * config.seq_len;
        let rows = row0..row0 + flat.len();
        for (l, blk) in fc.blocks.iter().enumerate() {
            h[l].slice_mut(s![rows.clone(), ..]).assign(&blk.h.mapv(|v| v as f32));
            m[l].slice_mut(s![rows.clone(), ..]).assign(&blk.m.mapv(|v| v as f32));
        }
    }
    if h.iter().chain(&m).any(|a| a.iter().any(|v| !v.is_finite())) {
        bail!(Numerical, "non-finite activation captured");
    }

    let shards = (0..tokens.len())
        .step_by(config.shard_size.max(1))
        .enumerate()
        .map(|(i, first)| ShardInfo {
            file: format!("shard_{i:05}.bin"),
            first_sequence: first,
            n_sequences: config.shard_size.max(1).min(tokens.len() - first),
        })
        .collect();
    Ok(ActivationStore {
        manifest: StoreManifest {
            version: STORE_VERSION,
            model_digest: model_digest(params),
            seq_len: config.seq_len,
            n_layers: mc.n_layers,
            d_model: mc.d_model,
            per_language_counts: wanted,
            shards,
        },
        tokens,
        languages,
        h,
        m,
    })
}

impl ActivationStore {
    pub fn n_sequences(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len() * self.manifest.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.h.len()
    }

    pub fn seq_len(&self) -> usize {
        self.manifest.seq_len
    }

    /// Sequence ids labelled with `lang`.
    pub fn indices_for(&self, lang: LanguageId) -> Vec<usize> {
        (0..self.languages.len()).filter(|&i| self.languages[i] == lang).collect()
    }

    /// Token rows `[seq_len × d]` of one window at one layer.
    pub fn h_seq(&self, layer: usize, seq: usize) -> ndarray::ArrayView2<'_, f32> {
        let t = self.seq_len();
        self.h[layer].slice(s![seq * t..(seq + 1) * t, ..])
    }

    pub fn m_seq(&self, layer: usize, seq: usize) -> ndarray::ArrayView2<'_, f32> {
        let t = self.seq_len();
        self.m[layer].slice(s![seq * t..(seq + 1) * t, ..])
    }

    /// Full activation record for one stored window, recomputed from the model.
    pub fn record<T: Scalar>(&self, params: &ModelParams<T>, seq: usize) -> Result<ActivationRecord> {
        capture(params, &self.tokens[seq], Some(self.languages[seq]))
    }

    /// SHA-256 over tokens, labels and activations.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.manifest.seq_len.to_le_bytes());
        for (t, l) in self.tokens.iter().zip(&self.languages) {
            hasher.update((l.0 as u32).to_le_bytes());
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        for a in self.h.iter().chain(&self.m) {
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = self.seq_len();
        let d = self.manifest.d_model;
        for shard in &self.manifest.shards {
            let seqs = shard.first_sequence..shard.first_sequence + shard.n_sequences;
            let rows = seqs.start * t..seqs.end * t;
            let mut entries: container::Entries = vec![
                (
                    "tokens".into(),
                    vec![shard.n_sequences, t],
                    self.tokens[seqs.clone()].iter().flatten().map(|&v| v as f32).collect(),
                ),
                (
                    "language".into(),
                    vec![shard.n_sequences],
                    self.languages[seqs.clone()].iter().map(|l| l.0 as f32).collect(),
                ),
            ];
            for (l, (h, m)) in self.h.iter().zip(&self.m).enumerate() {
                let hs = h.slice(s![rows.clone(), ..]);
                let ms = m.slice(s![rows.clone(), ..]);
                entries.push((format!("h.{l}"), vec![rows.len(), d], hs.iter().copied().collect()));
                entries.push((format!("m.{l}"), vec![rows.len(), d], ms.iter().copied().collect()));
            }
            let header = serde_json::json!({ "first_sequence": shard.first_sequence });
            container::write(&dir.join(&shard.file), SHARD_KIND, &header, &entries)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest = serde_json::from_slice(&bytes)?;
        if manifest.version != STORE_VERSION {
            bail!(Format, "store version {} unsupported (expected {STORE_VERSION})", manifest.version);
        }
        let (t, d, nl) = (manifest.seq_len, manifest.d_model, manifest.n_layers);
        let total: usize = manifest.shards.iter().map(|s| s.n_sequences).sum();
        let mut tokens = Vec::with_capacity(total);
        let mut languages = Vec::with_capacity(total);
        let mut h = vec![Array2::<f32>::zeros((total * t, d)); nl];
        let mut m = h.clone();
        for shard in &manifest.shards {
            let spath = dir.join(&shard.file);
            let (_, entries) = container::read(&spath, SHARD_KIND)?;
            let get = |name: &str, len: usize| -> Result<&Vec<f32>> {
                match entries.iter().find(|e| e.0 == name) {
                    Some(e) if e.2.len() == len => Ok(&e.2),
                    _ => bail!(Format, "{}: tensor `{name}` missing or mis-sized", spath.display()),
                }
            };
            let n = shard.n_sequences;
            for w in get("tokens", n * t)?.chunks(t) {
                tokens.push(w.iter().map(|&v| v as u32).collect());
            }
            languages.extend(get("language", n)?.iter().map(|&v| LanguageId(v as usize)));
            let rows = shard.first_sequence * t..(shard.first_sequence + n) * t;
            for l in 0..nl {
                let hv = Array2::from_shape_vec((n * t, d), get(&format!("h.{l}"), n * t * d)?.clone())
                    .expect("shape checked");
                let mv = Array2::from_shape_vec((n * t, d), get(&format!("m.{l}"), n * t * d)?.clone())
                    .expect("shape checked");
                h[l].slice_mut(s![rows.clone(), ..]).assign(&hv);
                m[l].slice_mut(s![rows.clone(), ..]).assign(&mv);
            }
        }
        Ok(Self { manifest, tokens, languages, h, m })
    }

    /// One epoch of token-level batches in a seeded random order.
    pub fn training_pairs(&self, batch_tokens: usize, seed: u64, epoch: u64) -> PairStream<'_> {
        let n = self.n_tokens();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
        order.shuffle(&mut rng);
        if batch_tokens > n {
            log::warn!("batch of {batch_tokens} tokens exceeds the store's {n}; epoch truncated to one batch");
        }
        PairStream { store: self, order, batch_tokens: batch_tokens.max(1), cursor: 0 }
    }
}

/// Per-layer MLP inputs and outputs for a set of token rows.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub rows: Vec<usize>,
    pub h: Vec<Array2<f32>>,
    pub m: Vec<Array2<f32>>,
}

pub struct PairStream<'a> {
    store: &'a ActivationStore,
    order: Vec<usize>,
    batch_tokens: usize,
    cursor: usize,
}

impl ActivationStore {
    pub fn gather(&self, rows: &[usize]) -> PairBatch {
        let pick = |a: &Array2<f32>| a.select(ndarray::Axis(0), rows);
        PairBatch { rows: rows.to_vec(), h: self.h.iter().map(pick).collect(), m: self.m.iter().map(pick).collect() }
    }
}

impl Iterator for PairStream<'_> {
    type Item = PairBatch;

    fn next(&mut self) -> Option<PairBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_tokens).min(self.order.len());
        let rows = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.store.gather(rows))
    }
}
