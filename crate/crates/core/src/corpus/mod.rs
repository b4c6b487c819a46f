//! Labeled multilingual corpora and the balanced subword tokenizer.

mod ingest;
mod synth;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use ingest::{ingest_corpus, ingest_corpus_dir, write_corpus_dir};
pub use synth::{generate_synthetic_corpus, Realization, SyntheticLanguages};
pub use tokenizer::{
    pre_tokenize, rebalance_by_char_mass, train_tokenizer, BalanceReport, Specials, Tokenizer,
};

/// Dense language index `0..L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub usize);

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Language {
    pub id: LanguageId,
    pub name: String,
}

pub fn default_languages(n: usize) -> Vec<Language> {
    (0..n)
        .map(|i| Language {
            id: LanguageId(i),
            name: format!("L{i}"),
        })
        .collect()
}

/// Checks that ids are dense `0..L` and `L ≥ 2`.
pub fn validate_languages(languages: &[Language]) -> Result<()> {
    if languages.len() < 2 {
        bail!(Config, "at least two languages are required, got {}", languages.len());
    }
    for (i, l) in languages.iter().enumerate() {
        if l.id.0 != i {
            bail!(Config, "language ids must be dense 0..L; position {i} holds {}", l.id);
        }
        if l.name.is_empty() || l.name.contains(['/', '\\']) {
            bail!(Config, "invalid language name {:?}", l.name);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub languages: Vec<Language>,
    /// Per-language fraction of sequences; must sum to 1.
    pub mixture: Vec<f64>,
    /// Number of shared semantic templates.
    pub templates: usize,
    /// Words per language.
    pub lexicon_size: usize,
    pub fragmenting_language: Option<LanguageId>,
    pub n_sequences: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            languages: default_languages(5),
            mixture: vec![0.2; 5],
            templates: 24,
            lexicon_size: 160,
            fragmenting_language: Some(LanguageId(4)),
            n_sequences: 20_000,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// Mixture with `dominant` of the data in language 0 and the rest split evenly.
    pub fn dominant_mixture(n_languages: usize, dominant: f64) -> Vec<f64> {
        let rest = (1.0 - dominant) / (n_languages - 1) as f64;
        std::iter::once(dominant)
            .chain(std::iter::repeat_n(rest, n_languages - 1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_languages(&self.languages)?;
        if self.mixture.len() != self.languages.len() {
            bail!(
                Config,
                "mixture has {} entries for {} languages",
                self.mixture.len(),
                self.languages.len()
            );
        }
        if let Some(bad) = self.mixture.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            bail!(Config, "mixture fraction {bad} outside [0, 1]");
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail!(Config, "mixture fractions sum to {sum}, expected 1");
        }
        if self.templates == 0 {
            bail!(Config, "at least one template is required");
        }
        if let Some(f) = self.fragmenting_language {
            if f.0 >= self.languages.len() {
                bail!(Config, "fragmenting language {f} is not declared");
            }
        }
        synth::check_lexicon_demand(self.lexicon_size)?;
        Ok(())
    }

    /// Per-language sequence counts by largest remainder; each count is
    /// within one sequence of `fraction × n`.
    pub fn sequence_counts(&self) -> Vec<usize> {
        let n = self.n_sequences as f64;
        let exact: Vec<f64> = self.mixture.iter().map(|f| f * n).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.n_sequences.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub text: String,
    pub language: LanguageId,
    /// Filled by [`Tokenizer::encode_corpus`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<u32>,
}

pub fn count_by_language(corpus: &[LabeledSequence], n_languages: usize) -> Vec<usize> {
    let mut counts = vec![0; n_languages];
    for s in corpus {
        if s.language.0 < n_languages {
            counts[s.language.0] += 1;
        }
    }
    counts
}
