use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{mixture_label, RunConfig};
use super::stages::Pipeline;
use super::{encode_prompt, prompt_text};
use crate::analysis::{LayerProfileRow, Variant};
use crate::corpus::{LanguageId, SyntheticLanguages, Tokenizer};
use crate::error::{bail, Error, Result};
use crate::intervene::{language_swap, run_with_interventions, InterventionSpec};
use crate::tinylm::model_digest;

const SWAP_SALT: u64 = 0x5a4b_9e7d;

/// Bytes a run of `config` writes, rounded up generously.
fn estimated_run_bytes(config: &RunConfig) -> u64 {
    let c = config.resolved();
    let m = &c.model;
    let store = c.store.n_sequences * c.store.seq_len * m.d_model * m.n_layers * 2 * 4;
    let clt_params = m.n_layers * c.clt.d_features * m.d_model * (1 + m.n_layers) * 4;
    let corpus = c.corpus.n_sequences * 2 * 200;
    ((store + clt_params + m.param_count() * 4 + corpus) as u64) * 2
}

fn available_bytes(path: &Path) -> Result<u64> {
    let mut probe = path.to_path_buf();
    while !probe.exists() {
        match probe.parent() {
            Some(p) if !p.as_os_str().is_empty() => probe = p.to_path_buf(),
            _ => {
                probe = std::env::current_dir().map_err(|e| Error::io(path, e))?;
                break;
            }
        }
    }
    fs4::available_space(&probe).map_err(|e| Error::io(&probe, e))
}

/// Fails before any training when the artifact volume cannot hold `needed`
/// bytes.
pub fn preflight_disk(dir: &Path, needed: u64) -> Result<()> {
    let free = available_bytes(dir)?;
    if free < needed {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::StorageFull,
                format!("pre-flight check: {needed} bytes needed, {free} available"),
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRun {
    pub label: String,
    pub dominant: f64,
    /// Mixture fractions read back from the run's corpus manifest.
    pub mixture: Vec<f64>,
    pub checkpoint: String,
    pub model_digest: String,
    pub uniform_loss: f64,
    /// Final validation loss per language.
    pub validation: Vec<f64>,
    pub dominant_loss: f64,
    pub minority_mean_loss: f64,
    pub entropy_profile: Vec<LayerProfileRow>,
    /// Whether the weighted profile dips in the middle layers; needs at
    /// least three layers.
    pub u_shape: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub runs: Vec<MixtureRun>,
}

fn u_shape(rows: &[LayerProfileRow]) -> Option<bool> {
    let w: Vec<f64> = rows.iter().map(|r| r.weighted).collect::<Option<_>>()?;
    if w.len() < 3 {
        return None;
    }
    let inner = w[1..w.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min);
    Some(inner < w[0] && inner < w[w.len() - 1])
}

/// Train one model and transcoder per dominant-language share and collect
/// validation curves and entropy profiles under `artifact_dir/mixture`.
pub fn mixture_matrix(config: &RunConfig) -> Result<MixtureReport> {
    config.validate()?;
    let needed: u64 = config.mixture.dominant.iter().map(|&d| estimated_run_bytes(&config.mixture_run(d))).sum();
    preflight_disk(&config.artifact_dir, needed)?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for &dominant in &config.mixture.dominant {
        let run_config = config.mixture_run(dominant);
        let mut p = Pipeline::open(&run_config)?;
        let params = p.language_model()?;
        let lm = p.lm_report()?;
        let (_, rows) = p.score(Variant::General)?;
        p.metrics()?;
        let corpus_rec = p.registry().stage("corpus").expect("corpus ran");
        let mixture: Vec<f64> = serde_json::from_value(corpus_rec.summary["mixture"].clone())?;
        let validation: Vec<f64> = lm.final_validation().iter().map(|(_, l)| *l).collect();
        let minority = &validation[1..];
        for (lang, pts) in &lm.validation {
            for pt in pts {
                curves.push((mixture_label(dominant), lang.0, pt.step, pt.tokens, pt.loss));
            }
        }
        runs.push(MixtureRun {
            label: mixture_label(dominant),
            dominant,
            mixture,
            checkpoint: format!("mixture/{}/lm/model.ckpt", mixture_label(dominant)),
            model_digest: model_digest(&params),
            uniform_loss: lm.uniform_loss,
            dominant_loss: validation[0],
            minority_mean_loss: minority.iter().sum::<f64>() / minority.len() as f64,
            validation,
            u_shape: u_shape(&rows),
            entropy_profile: rows,
        });
    }
    let dir = config.artifact_dir.join("mixture");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let path = dir.join("validation_curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(fmt)?;
    w.write_record(["model", "language", "step", "tokens", "loss"]).map_err(fmt)?;
    for (m, l, s, t, loss) in &curves {
        w.write_record([m.clone(), l.to_string(), s.to_string(), t.to_string(), loss.to_string()]).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("entropy_profiles.csv");
    let mut w = csv::Writer::from_path(&path).map_err(fmt)?;
    w.write_record(["model", "layer", "weighted", "unweighted", "live_features"]).map_err(fmt)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &runs {
        for row in &r.entropy_profile {
            w.write_record([r.label.clone(), row.layer.to_string(), opt(row.weighted), opt(row.unweighted), row.live_features.to_string()])
                .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let report = MixtureReport { runs };
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// A source-language prefix, its translation, and the next target-language
/// token at the same point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPrompt {
    pub source: LanguageId,
    pub target: LanguageId,
    pub prompt_text: String,
    pub translated_text: String,
    pub prompt: Vec<u32>,
    pub translated: Vec<u32>,
    pub target_token: u32,
}

/// `n` parallel prompts cycling over ordered language pairs. Each cut point
/// is the first word at or after a varying offset whose continuation is a
/// content word in both languages.
pub fn swap_prompts(
    langs: &SyntheticLanguages,
    tok: &Tokenizer,
    n: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<SwapPrompt>> {
    let n_lang = langs.n_languages();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut rng_seed = seed ^ SWAP_SALT;
    while out.len() < n {
        if i > 100 * n.max(1) {
            bail!(Validation, "could not construct {n} language-swap prompts");
        }
        let source = LanguageId(i % n_lang);
        let target = LanguageId((source.0 + 1 + (i / n_lang) % (n_lang - 1)) % n_lang);
        let r = &langs.parallel_set(1, rng_seed)[0];
        rng_seed = rng_seed.wrapping_add(1);
        let src_words: Vec<String> = langs.render(r, source).split(' ').map(String::from).collect();
        let tgt_words: Vec<String> = langs.render(r, target).split(' ').map(String::from).collect();
        let start = 2 + i % 4;
        i += 1;
        let Some(k) = (start.min(src_words.len())..src_words.len()).find(|&k| tgt_words[k] != "." && src_words[k] != ".")
        else {
            continue;
        };
        let src_text = prompt_text(langs, r, source, k);
        let tgt_text = prompt_text(langs, r, target, k);
        let prompt = encode_prompt(tok, &src_text, max_len)?;
        let translated = encode_prompt(tok, &tgt_text, max_len)?;
        let full = encode_prompt(tok, &format!("{tgt_text} {}", tgt_words[k]), max_len + 8)?;
        if full.len() <= translated.len() || full[..translated.len()] != translated[..] {
            continue;
        }
        let target_token = full[translated.len()];
        out.push(SwapPrompt { source, target, prompt_text: src_text, translated_text: tgt_text, prompt, translated, target_token });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapCase {
    pub source: LanguageId,
    pub target: LanguageId,
    pub prompt_text: String,
    pub target_token: u32,
    pub rank_before: usize,
    pub rank_after: usize,
    pub improved: bool,
    /// An empty intervention reproduced the baseline logits bit for bit.
    pub no_op_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSuiteReport {
    pub cases: Vec<SwapCase>,
    pub improved: usize,
    pub improved_rate: f64,
    pub no_op_exact: bool,
}

/// Zero source-language features and add target-language ones on each
/// parallel prompt; writes `swap/results.csv` and `swap/summary.json`.
pub fn language_swap_suite(p: &mut Pipeline) -> Result<SwapSuiteReport> {
    let features = p.swap_features()?;
    let tok = p.tokenizer()?;
    let params = p.language_model()?.cast::<f64>();
    let clt = p.transcoder()?.cast::<f64>();
    let cfg = p.config().clone();
    let prompts = swap_prompts(p.languages(), &tok, cfg.swap.prompts, cfg.seed, cfg.model.context_len)?;
    let section = serde_json::to_value((&cfg.swap, &cfg.analysis, &cfg.corpus))?;
    p.record_stage("swap", &section, &["tokenizer", "lm", "clt", "language-features"], &["swap"], |p| {
        let mut cases = Vec::with_capacity(prompts.len());
        for sp in &prompts {
            let r = language_swap(
                &params,
                &clt,
                &sp.prompt,
                &sp.translated,
                sp.source,
                sp.target,
                &features,
                sp.target_token,
                &cfg.swap.options,
            )?;
            let noop = run_with_interventions(&params, &clt, &sp.prompt, &InterventionSpec::default())?;
            let no_op_exact = noop
                .baseline_logits
                .iter()
                .zip(&noop.edited_logits)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            let (before, after) = (r.rank_before.expect("target set"), r.rank_after.expect("target set"));
            cases.push(SwapCase {
                source: sp.source,
                target: sp.target,
                prompt_text: sp.prompt_text.clone(),
                target_token: sp.target_token,
                rank_before: before,
                rank_after: after,
                improved: after < before,
                no_op_exact,
            });
        }
        let improved = cases.iter().filter(|c| c.improved).count();
        let report = SwapSuiteReport {
            improved,
            improved_rate: improved as f64 / cases.len().max(1) as f64,
            no_op_exact: cases.iter().all(|c| c.no_op_exact),
            cases,
        };
        let dir = p.path("swap");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("results.csv");
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(&path).map_err(fmt)?;
        w.write_record(["source", "target", "target_token", "rank_before", "rank_after", "improved", "no_op_exact"]).map_err(fmt)?;
        for c in &report.cases {
            w.write_record([
                c.source.0.to_string(),
                c.target.0.to_string(),
                c.target_token.to_string(),
                c.rank_before.to_string(),
                c.rank_after.to_string(),
                c.improved.to_string(),
                c.no_op_exact.to_string(),
            ])
            .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::Value::Null)
    })?;
    let path = p.path("swap/summary.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
