//! End-to-end workflow: corpus, tokenizer, language model, activation store,
//! transcoder, metrics, scores, graphs and interventions, each stage backed by
//! files in an artifact directory and skipped when its inputs are unchanged.

mod config;
mod experiments;
mod registry;
mod stages;

use crate::activations::ActivationRecord;
use crate::analysis::{annotate_graph, ActivityTable};
use crate::attribution::{build_attribution_graph, prune_graph, AttributionGraph, GraphOptions};
use crate::clt::CltParams;
use crate::corpus::{LanguageId, Realization, SyntheticLanguages, Tokenizer};
use crate::error::{bail, Result};
use crate::tinylm::{capture, ModelParams};

pub use config::{
    mixture_label, AnalysisConfig, AttributionConfig, MixtureConfig, RunConfig, SwapSuiteConfig, TokenizerConfig,
    ValidationConfig, DEMO_CONFIG, SMOKE_CONFIG,
};
pub use experiments::{
    language_swap_suite, mixture_matrix, preflight_disk, swap_prompts, MixtureReport, MixtureRun, SwapCase,
    SwapPrompt, SwapSuiteReport,
};
pub use registry::{ArtifactRecord, Registry, RunManifest, StageRecord, REGISTRY_FILE};
pub use stages::{DemoReport, Pipeline, TokenizerSummary};

/// `BOS` followed by the encoded text; errors when the result does not fit
/// `max_len` tokens.
pub fn encode_prompt(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        bail!(Validation, "prompt is empty");
    }
    let mut tokens = vec![tokenizer.specials().bos];
    tokens.extend(tokenizer.encode(text));
    if tokens.len() > max_len {
        bail!(Validation, "prompt encodes to {} tokens, above the limit of {max_len}", tokens.len());
    }
    Ok(tokens)
}

/// The first `words` words of a realization rendered in `lang`.
pub fn prompt_text(langs: &SyntheticLanguages, r: &Realization, lang: LanguageId, words: usize) -> String {
    let text = langs.render(r, lang);
    text.split(' ').take(words).collect::<Vec<_>>().join(" ")
}

/// Build, prune and (given a table) annotate the graph for one prompt.
pub fn attribute_prompt(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    table: Option<&ActivityTable>,
    tokens: &[u32],
    prompt: &str,
    config: &AttributionConfig,
) -> Result<AttributionGraph> {
    let record: ActivationRecord = capture(params, tokens, None)?;
    let opts = GraphOptions { top_logits: config.top_logits, target_position: None };
    let full = build_attribution_graph(params, clt, &record, prompt, &opts)?;
    let mut graph = prune_graph(&full, config.node_keep, config.edge_keep);
    if let Some(t) = table {
        annotate_graph(&mut graph, t);
    }
    Ok(graph)
}
