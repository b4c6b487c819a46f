use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activations::StoreConfig;
use crate::clt::CltConfig;
use crate::container::json_digest;
use crate::corpus::CorpusSpec;
use crate::error::{bail, Error, Result};
use crate::intervene::SwapOptions;
use crate::tinylm::{ModelConfig, TrainPlan};

/// The bundled two-layer demo run.
pub const DEMO_CONFIG: &str = include_str!("../../configs/demo.toml");

/// A run small enough to train end to end in well under a second.
pub const SMOKE_CONFIG: &str = include_str!("../../configs/smoke.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Vocabulary size including the four special tokens.
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 1024 }
    }
}

/// Held-out sequences for per-language validation loss. They are parallel
/// renderings of the same sentences, so every language gets the same count
/// whatever the training mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub sequences_per_language: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { sequences_per_language: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Demo prompts: one parallel sentence per prompt, cycling over languages.
    pub prompts: usize,
    /// Words of each sentence kept in the prompt.
    pub prompt_words: usize,
    pub top_logits: usize,
    pub node_keep: f64,
    pub edge_keep: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { prompts: 5, prompt_words: 6, top_logits: 5, node_keep: 0.8, edge_keep: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Minimum activation rate of a language feature on tokens of its own language.
    pub language_threshold: f64,
    /// Minimum share of the dominant language for a feature to be used in swaps.
    pub min_top_probability: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { language_threshold: 0.05, min_top_probability: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapSuiteConfig {
    pub prompts: usize,
    pub options: SwapOptions,
}

impl Default for SwapSuiteConfig {
    fn default() -> Self {
        Self { prompts: 20, options: SwapOptions::default() }
    }
}

/// Reduced budgets for the dominant-language mixture runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// Share of language 0 in each run.
    pub dominant: Vec<f64>,
    pub n_sequences: usize,
    pub lm_tokens: usize,
    pub store_sequences: usize,
    pub clt_steps: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            dominant: vec![0.9, 0.7, 0.5, 0.2],
            n_sequences: 12_000,
            lm_tokens: 300_000,
            store_sequences: 2000,
            clt_steps: 800,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed, copied into every stochastic stage.
    pub seed: u64,
    pub artifact_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub validation: ValidationConfig,
    pub store: StoreConfig,
    pub clt: CltConfig,
    pub attribution: AttributionConfig,
    pub analysis: AnalysisConfig,
    pub swap: SwapSuiteConfig,
    pub mixture: MixtureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            artifact_dir: PathBuf::from("artifacts"),
            corpus: CorpusSpec::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainPlan::default(),
            validation: ValidationConfig::default(),
            store: StoreConfig::default(),
            clt: CltConfig::default(),
            attribution: AttributionConfig::default(),
            analysis: AnalysisConfig::default(),
            swap: SwapSuiteConfig::default(),
            mixture: MixtureConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn demo() -> Self {
        Self::from_toml(DEMO_CONFIG).expect("bundled demo config parses")
    }

    pub fn smoke() -> Self {
        Self::from_toml(SMOKE_CONFIG).expect("bundled smoke config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replace the global seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Copies the global seed into each stage and ties the model vocabulary
    /// to the tokenizer.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = c.seed;
        c.model.seed = c.seed;
        c.train.seed = c.seed;
        c.store.seed = c.seed;
        c.clt.seed = c.seed;
        c.model.vocab_size = c.tokenizer.vocab_size;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.corpus.validate()?;
        c.model.validate()?;
        c.train.validate()?;
        c.clt.validate(c.model.d_model)?;
        if c.tokenizer.vocab_size < 4 + 1 {
            bail!(Config, "tokenizer.vocab_size must exceed the four special tokens");
        }
        if c.store.seq_len > c.model.context_len {
            bail!(Config, "store.seq_len {} exceeds model.context_len {}", c.store.seq_len, c.model.context_len);
        }
        for (name, v) in [("attribution.node_keep", c.attribution.node_keep), ("attribution.edge_keep", c.attribution.edge_keep)] {
            if !(v > 0.0 && v <= 1.0) {
                bail!(Config, "{name} must lie in (0, 1], got {v}");
            }
        }
        if c.attribution.top_logits == 0 || c.attribution.prompt_words == 0 {
            bail!(Config, "attribution.top_logits and attribution.prompt_words must be positive");
        }
        if !(0.0..=1.0).contains(&c.analysis.language_threshold) {
            bail!(Config, "analysis.language_threshold must lie in [0, 1]");
        }
        if c.validation.sequences_per_language == 0 {
            bail!(Config, "validation.sequences_per_language must be positive");
        }
        if let Some(d) = c.mixture.dominant.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            bail!(Config, "mixture.dominant entries must lie in (0, 1), got {d}");
        }
        Ok(())
    }

    /// Digest of the resolved configuration.
    pub fn digest(&self) -> String {
        json_digest(&self.resolved())
    }

    /// The configuration of one dominant-language mixture run, rooted in a
    /// subdirectory of this run's artifacts.
    pub fn mixture_run(&self, dominant: f64) -> Self {
        let mut c = self.clone();
        let n = c.corpus.languages.len();
        c.corpus.mixture = CorpusSpec::dominant_mixture(n, dominant);
        c.corpus.n_sequences = self.mixture.n_sequences;
        c.train.total_tokens = Some(self.mixture.lm_tokens);
        c.store.n_sequences = self.mixture.store_sequences;
        let steps = self.mixture.clt_steps.max(2);
        c.clt.warmup_steps = steps / 10;
        c.clt.decay_steps = steps - steps / 10;
        c.clt.eval_every = (steps / 8).max(1);
        c.artifact_dir = self.artifact_dir.join("mixture").join(mixture_label(dominant));
        c
    }
}

/// Directory label of a mixture run, e.g. `dom90`.
pub fn mixture_label(dominant: f64) -> String {
    format!("dom{:02}", (dominant * 100.0).round() as u32)
}
