use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{AttributionConfig, RunConfig};
use super::registry::Registry;
use super::{attribute_prompt, encode_prompt, prompt_text};
use crate::activations::{build_activation_store, ActivationStore};
use crate::analysis::{
    feature_overlap, feature_profiles, identify_language_features, layerwise_entropy_profile,
    write_layer_profile_csv, write_profiles_jsonl, ActivityTable, LanguageFeature, LayerProfileRow, Variant,
};
use crate::attribution::AttributionGraph;
use crate::clt::{load_clt, save_clt, train_clt, CltParams, CltTrainReport};
use crate::container::json_digest;
use crate::corpus::{
    generate_synthetic_corpus, train_tokenizer, BalanceReport, CorpusSpec, LabeledSequence, LanguageId,
    SyntheticLanguages, Tokenizer,
};
use crate::error::{bail, Error, Result};
use crate::tinylm::{build_lm_windows, load_checkpoint, save_checkpoint, train_lm, LmTrainReport, ModelParams, TrainingStream};

const VALIDATION_SALT: u64 = 0x7a11_da7e;
const PROMPT_SALT: u64 = 0x9a0f_7e11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub balance: BalanceReport,
    pub relative_spread: f64,
    /// Mean subword tokens per content word, per language.
    pub subtokens_per_word: Vec<f64>,
}

/// Paths and headline numbers of a completed demo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub graphs: Vec<PathBuf>,
    pub metric_csvs: Vec<PathBuf>,
    pub final_explained_variance: Vec<f64>,
    pub final_mean_l0: Vec<f64>,
}

fn write_jsonl(path: &Path, rows: &[LabeledSequence]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl(path: &Path) -> Result<Vec<LabeledSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(w)
}

fn csv_row(w: &mut csv::Writer<std::fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// A run rooted at `config.artifact_dir`. Stage methods bring their stage
/// and everything upstream up to date, then load the result from disk, so
/// a skipped stage yields exactly what a fresh one would.
pub struct Pipeline {
    config: RunConfig,
    registry: Registry,
    langs: SyntheticLanguages,
    activity: Option<ActivityTable>,
    executed: Vec<String>,
}

impl Pipeline {
    pub fn open(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let registry = Registry::open(&config.artifact_dir, &config.digest())?;
        write_json(&registry.path("run_config.json"), &config)?;
        let langs = SyntheticLanguages::new(&config.corpus)?;
        Ok(Self { config, registry, langs, activity: None, executed: Vec::new() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn root(&self) -> &Path {
        self.registry.root()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.registry.path(rel)
    }

    pub fn languages(&self) -> &SyntheticLanguages {
        &self.langs
    }

    /// Stages that ran (rather than being skipped) since this pipeline was opened.
    pub fn executed(&self) -> &[String] {
        &self.executed
    }

    /// Run `produce` unless `name` is already current for this section and
    /// these upstream stages.
    fn stage<S: Serialize>(
        &mut self,
        name: &str,
        section: &S,
        deps: &[&str],
        outputs: &[&str],
        produce: impl FnOnce(&mut Self) -> Result<serde_json::Value>,
    ) -> Result<()> {
        let config_digest = json_digest(section);
        let inputs = deps
            .iter()
            .map(|d| match self.registry.stage(d) {
                Some(r) => Ok(r.output_digest()),
                None => bail!(Validation, "stage `{name}` needs `{d}`, which has not run"),
            })
            .collect::<Result<Vec<_>>>()?;
        let stage_digest = json_digest(&(name, &config_digest, &inputs));
        if self.registry.is_current(name, &stage_digest) {
            log::info!("{name}: up to date");
            return Ok(());
        }
        log::info!("{name}: running");
        for o in outputs {
            let p = self.registry.path(o);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            } else if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let summary = produce(self)?;
        self.registry.record(name, config_digest, stage_digest, inputs, outputs, summary)?;
        self.executed.push(name.to_string());
        Ok(())
    }

    // Corpus ---------------------------------------------------------------

    /// Uniform-mixture counterpart of the training corpus spec. It shares the
    /// seed, hence the lexicons.
    fn analysis_spec(&self) -> CorpusSpec {
        let n = self.config.corpus.languages.len();
        CorpusSpec { mixture: vec![1.0 / n as f64; n], ..self.config.corpus.clone() }
    }

    pub fn ensure_corpus(&mut self) -> Result<()> {
        let section = (&self.config.corpus, &self.config.validation);
        let section = serde_json::to_value(section)?;
        self.stage("corpus", &section, &[], &["corpus"], |p| {
            let dir = p.path("corpus");
            mkdir(&dir)?;
            let train = generate_synthetic_corpus(&p.config.corpus)?;
            write_jsonl(&dir.join("train.jsonl"), &train)?;
            let analysis = generate_synthetic_corpus(&p.analysis_spec())?;
            write_jsonl(&dir.join("analysis.jsonl"), &analysis)?;
            let n_val = p.config.validation.sequences_per_language;
            let reals = p.langs.parallel_set(n_val, p.config.seed ^ VALIDATION_SALT);
            let validation: Vec<LabeledSequence> = (0..p.langs.n_languages())
                .flat_map(|l| {
                    reals.iter().map(move |r| (l, r))
                })
                .map(|(l, r)| LabeledSequence { text: p.langs.render(r, LanguageId(l)), language: LanguageId(l), tokens: vec![] })
                .collect();
            write_jsonl(&dir.join("validation.jsonl"), &validation)?;
            let counts = crate::corpus::count_by_language(&train, p.langs.n_languages());
            Ok(serde_json::json!({ "mixture": p.config.corpus.mixture, "train_counts": counts }))
        })
    }

    /// `(train, analysis, validation)` sequences, untokenized.
    pub fn corpus(&mut self) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>, Vec<LabeledSequence>)> {
        self.ensure_corpus()?;
        let dir = self.path("corpus");
        Ok((read_jsonl(&dir.join("train.jsonl"))?, read_jsonl(&dir.join("analysis.jsonl"))?, read_jsonl(&dir.join("validation.jsonl"))?))
    }

    // Tokenizer ------------------------------------------------------------

    pub fn ensure_tokenizer(&mut self) -> Result<()> {
        self.ensure_corpus()?;
        let section = self.config.tokenizer.clone();
        self.stage("tokenizer", &section, &["corpus"], &["tokenizer"], |p| {
            let dir = p.path("tokenizer");
            mkdir(&dir)?;
            let train = read_jsonl(&p.path("corpus/train.jsonl"))?;
            let (tok, balance) = train_tokenizer(&train, &p.config.corpus.languages, section.vocab_size)?;
            tok.save(&dir.join("tokenizer.json"))?;
            let subtokens_per_word = (0..p.langs.n_languages())
                .map(|l| tok.mean_subtokens_per_word(p.langs.content_words(LanguageId(l))))
                .collect();
            let summary =
                TokenizerSummary { relative_spread: balance.relative_spread(), balance, subtokens_per_word };
            write_json(&dir.join("balance.json"), &summary)?;
            Ok(serde_json::to_value(&summary)?)
        })
    }

    pub fn tokenizer(&mut self) -> Result<Tokenizer> {
        self.ensure_tokenizer()?;
        Tokenizer::load(&self.path("tokenizer/tokenizer.json"))
    }

    pub fn tokenizer_summary(&mut self) -> Result<TokenizerSummary> {
        self.ensure_tokenizer()?;
        read_json(&self.path("tokenizer/balance.json"))
    }

    // Language model -------------------------------------------------------

    pub fn ensure_lm(&mut self) -> Result<()> {
        self.ensure_tokenizer()?;
        let section = (&self.config.model, &self.config.train);
        let section = serde_json::to_value(section)?;
        self.stage("lm", &section, &["corpus", "tokenizer"], &["lm"], |p| {
            let dir = p.path("lm");
            mkdir(&dir)?;
            let tok = Tokenizer::load(&p.path("tokenizer/tokenizer.json"))?;
            let specials = tok.specials();
            let ctx = p.config.model.context_len;
            let mut train = read_jsonl(&p.path("corpus/train.jsonl"))?;
            tok.encode_corpus(&mut train);
            let mut val = read_jsonl(&p.path("corpus/validation.jsonl"))?;
            tok.encode_corpus(&mut val);
            let val_windows = build_lm_windows(&val, specials, ctx);
            let validation = (0..p.langs.n_languages())
                .map(|l| {
                    let seqs = val_windows.iter().filter(|(g, _)| g.0 == l).map(|(_, w)| w.clone()).collect();
                    (LanguageId(l), seqs)
                })
                .collect();
            let stream = TrainingStream {
                train: build_lm_windows(&train, specials, ctx).into_iter().map(|(_, w)| w).collect(),
                validation,
                pad: specials.pad,
            };
            let (params, report) = train_lm(&p.config.model, &p.config.train, &stream, None)?;
            save_checkpoint(&params, &dir.join("model.ckpt"))?;
            write_json(&dir.join("loss_history.json"), &report)?;
            let finals: Vec<f64> = report.final_validation().iter().map(|(_, l)| *l).collect();
            Ok(serde_json::json!({
                "steps": report.steps,
                "tokens_seen": report.tokens_seen,
                "uniform_loss": report.uniform_loss,
                "final_validation": finals,
            }))
        })
    }

    pub fn language_model(&mut self) -> Result<ModelParams<f32>> {
        self.ensure_lm()?;
        load_checkpoint(&self.path("lm/model.ckpt"))
    }

    pub fn lm_report(&mut self) -> Result<LmTrainReport> {
        self.ensure_lm()?;
        read_json(&self.path("lm/loss_history.json"))
    }

    // Activations ----------------------------------------------------------

    pub fn ensure_capture(&mut self) -> Result<()> {
        self.ensure_lm()?;
        let section = self.config.store.clone();
        self.stage("capture", &section, &["corpus", "tokenizer", "lm"], &["store"], |p| {
            let tok = Tokenizer::load(&p.path("tokenizer/tokenizer.json"))?;
            let params = load_checkpoint(&p.path("lm/model.ckpt"))?;
            let mut analysis = read_jsonl(&p.path("corpus/analysis.jsonl"))?;
            tok.encode_corpus(&mut analysis);
            let store = build_activation_store(&params, &analysis, p.langs.n_languages(), tok.specials(), &section)?;
            store.save(&p.path("store"))?;
            Ok(serde_json::json!({ "n_sequences": store.n_sequences(), "digest": store.digest() }))
        })
    }

    pub fn activations(&mut self) -> Result<ActivationStore> {
        self.ensure_capture()?;
        ActivationStore::load(&self.path("store"))
    }

    // Transcoder -----------------------------------------------------------

    pub fn ensure_clt(&mut self) -> Result<()> {
        self.ensure_capture()?;
        let section = self.config.clt.clone();
        let before = self.executed.len();
        self.stage("clt", &section, &["capture"], &["clt"], |p| {
            let dir = p.path("clt");
            mkdir(&dir)?;
            let store = ActivationStore::load(&p.path("store"))?;
            let init = CltParams::<f32>::init(&section, store.n_layers(), store.manifest.d_model)?;
            let (clt, report) = train_clt(init, &store, None)?;
            save_clt(&clt, &dir.join("clt.ckpt"))?;
            write_json(&dir.join("history.json"), &report)?;
            let last = report.final_metrics();
            Ok(serde_json::json!({
                "steps": report.steps,
                "explained_variance": last.iter().map(|m| m.explained_variance).collect::<Vec<_>>(),
                "mean_l0": last.iter().map(|m| m.mean_l0).collect::<Vec<_>>(),
            }))
        })?;
        if self.executed.len() != before {
            self.activity = None;
        }
        Ok(())
    }

    pub fn transcoder(&mut self) -> Result<CltParams<f32>> {
        self.ensure_clt()?;
        load_clt(&self.path("clt/clt.ckpt"))
    }

    pub fn clt_report(&mut self) -> Result<CltTrainReport> {
        self.ensure_clt()?;
        read_json(&self.path("clt/history.json"))
    }

    /// Per-feature activity over the store, computed once per pipeline.
    pub fn activity(&mut self) -> Result<&ActivityTable> {
        self.ensure_clt()?;
        if self.activity.is_none() {
            let store = ActivationStore::load(&self.path("store"))?;
            let clt = load_clt(&self.path("clt/clt.ckpt"))?;
            self.activity = Some(ActivityTable::compute(&store, &clt)?);
        }
        Ok(self.activity.as_ref().expect("just computed"))
    }

    // Metrics --------------------------------------------------------------

    pub const METRIC_CSVS: [&'static str; 4] =
        ["metrics/lm_train.csv", "metrics/lm_validation.csv", "metrics/clt_history.csv", "metrics/clt_final.csv"];

    /// Loss curves and transcoder quality as CSV tables.
    pub fn metrics(&mut self) -> Result<Vec<PathBuf>> {
        self.ensure_clt()?;
        self.stage("metrics", &"v1", &["lm", "clt"], &["metrics"], |p| {
            mkdir(&p.path("metrics"))?;
            let lm: LmTrainReport = read_json(&p.path("lm/loss_history.json"))?;
            let clt: CltTrainReport = read_json(&p.path("clt/history.json"))?;

            let path = p.path(Self::METRIC_CSVS[0]);
            let mut w = csv_writer(&path, &["step", "tokens", "loss"])?;
            for pt in &lm.train {
                csv_row(&mut w, &path, &[pt.step.to_string(), pt.tokens.to_string(), pt.loss.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;

            let path = p.path(Self::METRIC_CSVS[1]);
            let mut w = csv_writer(&path, &["language", "step", "tokens", "loss"])?;
            for (lang, pts) in &lm.validation {
                for pt in pts {
                    let row = [lang.0.to_string(), pt.step.to_string(), pt.tokens.to_string(), pt.loss.to_string()];
                    csv_row(&mut w, &path, &row)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;

            let path = p.path(Self::METRIC_CSVS[2]);
            let header = ["step", "layer", "explained_variance", "mean_l0", "dead_features", "lambda0"];
            let mut w = csv_writer(&path, &header)?;
            for pt in &clt.history {
                for m in &pt.layers {
                    let row = [
                        pt.step.to_string(),
                        m.layer.to_string(),
                        m.explained_variance.to_string(),
                        m.mean_l0.to_string(),
                        m.dead_features.to_string(),
                        pt.lambda0.get(m.layer).map(|v| v.to_string()).unwrap_or_default(),
                    ];
                    csv_row(&mut w, &path, &row)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;

            let path = p.path(Self::METRIC_CSVS[3]);
            let mut w = csv_writer(&path, &["layer", "explained_variance", "mean_l0", "dead_features"])?;
            for m in clt.final_metrics() {
                let row = [m.layer.to_string(), m.explained_variance.to_string(), m.mean_l0.to_string(), m.dead_features.to_string()];
                csv_row(&mut w, &path, &row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::Value::Null)
        })?;
        Ok(Self::METRIC_CSVS.iter().map(|r| self.path(r)).collect())
    }

    // Scores ---------------------------------------------------------------

    /// Layerwise entropy profile for one variant; writes the layer CSV and
    /// the per-feature profiles.
    pub fn score(&mut self, variant: Variant) -> Result<(PathBuf, Vec<LayerProfileRow>)> {
        self.ensure_clt()?;
        let name = format!("score-{}", variant.name());
        let csv_rel = format!("analysis/layer_profile_{}.csv", variant.name());
        let jsonl_rel = format!("analysis/profiles_{}.jsonl", variant.name());
        let outputs = [csv_rel.as_str(), jsonl_rel.as_str()];
        self.stage(&name, &variant, &["capture", "clt"], &outputs, |p| {
            p.activity()?;
            let table = p.activity.as_ref().expect("activity computed");
            let rows = layerwise_entropy_profile(table, variant);
            write_layer_profile_csv(&rows, &p.path(&csv_rel))?;
            write_profiles_jsonl(&feature_profiles(table, variant), &p.path(&jsonl_rel))?;
            Ok(serde_json::to_value(&rows)?)
        })?;
        let rec = self.registry.stage(&name).expect("stage recorded");
        let rows: Vec<LayerProfileRow> = serde_json::from_value(rec.summary.clone())?;
        Ok((self.path(&csv_rel), rows))
    }

    // Language features ----------------------------------------------------

    pub fn language_features(&mut self) -> Result<Vec<LanguageFeature>> {
        self.ensure_clt()?;
        let section = self.config.analysis.clone();
        self.stage("language-features", &section, &["capture", "clt"], &["analysis/language_features.json", "analysis/overlap.csv"], |p| {
            p.activity()?;
            let table = p.activity.as_ref().expect("activity computed");
            let feats = identify_language_features(table, section.language_threshold);
            mkdir(&p.path("analysis"))?;
            write_json(&p.path("analysis/language_features.json"), &feats)?;
            let path = p.path("analysis/overlap.csv");
            let mut w = csv_writer(&path, &["a", "b", "overlap"])?;
            let n = table.n_languages;
            for a in 0..n {
                for b in 0..n {
                    let v = feature_overlap(table, LanguageId(a), LanguageId(b));
                    csv_row(&mut w, &path, &[a.to_string(), b.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::json!({ "count": feats.len() }))
        })?;
        read_json(&self.path("analysis/language_features.json"))
    }

    /// Language features concentrated enough to drive swaps.
    pub fn swap_features(&mut self) -> Result<Vec<LanguageFeature>> {
        let min_p = self.config.analysis.min_top_probability;
        Ok(self.language_features()?.into_iter().filter(|f| f.top_probability >= min_p).collect())
    }

    // Graphs ---------------------------------------------------------------

    /// Prompt texts and languages of the demo graphs.
    pub fn demo_prompts(&self) -> Vec<(LanguageId, String)> {
        let a = &self.config.attribution;
        let reals = self.langs.parallel_set(a.prompts, self.config.seed ^ PROMPT_SALT);
        let n = self.langs.n_languages();
        reals
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let lang = LanguageId(i % n);
                (lang, prompt_text(&self.langs, r, lang, a.prompt_words))
            })
            .collect()
    }

    /// Attribute an arbitrary prompt with the run's model and transcoder.
    pub fn attribute(&mut self, prompt: &str) -> Result<AttributionGraph> {
        let cfg = self.config.attribution.clone();
        self.attribute_with(prompt, &cfg)
    }

    /// As [`Pipeline::attribute`] with explicit logit count and pruning thresholds.
    pub fn attribute_with(&mut self, prompt: &str, cfg: &AttributionConfig) -> Result<AttributionGraph> {
        let tok = self.tokenizer()?;
        let params = self.language_model()?.cast::<f64>();
        let clt = self.transcoder()?.cast::<f64>();
        let tokens = encode_prompt(&tok, prompt, self.config.model.context_len)?;
        attribute_prompt(&params, &clt, Some(self.activity()?), &tokens, prompt, cfg)
    }

    pub fn graphs(&mut self) -> Result<Vec<PathBuf>> {
        self.ensure_clt()?;
        let section = serde_json::to_value((&self.config.attribution, &self.config.corpus))?;
        let prompts = self.demo_prompts();
        self.stage("graphs", &section, &["tokenizer", "lm", "clt", "capture"], &["graphs"], |p| {
            mkdir(&p.path("graphs"))?;
            let tok = Tokenizer::load(&p.path("tokenizer/tokenizer.json"))?;
            let params = load_checkpoint(&p.path("lm/model.ckpt"))?.cast::<f64>();
            let clt = load_clt(&p.path("clt/clt.ckpt"))?.cast::<f64>();
            p.activity()?;
            let table = p.activity.as_ref().expect("activity computed");
            let mut index = Vec::new();
            for (i, (lang, text)) in prompts.iter().enumerate() {
                let tokens = encode_prompt(&tok, text, p.config.model.context_len)?;
                let graph = attribute_prompt(&params, &clt, Some(table), &tokens, text, &p.config.attribution)?;
                let file = format!("prompt_{i:02}.json");
                graph.save(&p.path("graphs").join(&file))?;
                index.push(serde_json::json!({
                    "file": file, "language": lang, "prompt": text,
                    "nodes": graph.nodes.len(), "edges": graph.edges.len(),
                }));
            }
            write_json(&p.path("graphs/index.json"), &index)?;
            Ok(serde_json::Value::Array(index))
        })?;
        Ok((0..prompts.len()).map(|i| self.path(&format!("graphs/prompt_{i:02}.json"))).collect())
    }

    /// Everything the demo produces: graphs, metric CSVs, both score
    /// variants and the language features.
    pub fn run_demo(&mut self) -> Result<DemoReport> {
        let mut metric_csvs = self.metrics()?;
        for v in [Variant::General, Variant::Top100] {
            metric_csvs.push(self.score(v)?.0);
        }
        self.language_features()?;
        let graphs = self.graphs()?;
        let report = self.clt_report()?;
        Ok(DemoReport {
            graphs,
            metric_csvs,
            final_explained_variance: report.final_metrics().iter().map(|m| m.explained_variance).collect(),
            final_mean_l0: report.final_metrics().iter().map(|m| m.mean_l0).collect(),
        })
    }

    pub(super) fn record_stage<S: Serialize>(
        &mut self,
        name: &str,
        section: &S,
        deps: &[&str],
        outputs: &[&str],
        produce: impl FnOnce(&mut Self) -> Result<serde_json::Value>,
    ) -> Result<()> {
        self.stage(name, section, deps, outputs, produce)
    }
}
