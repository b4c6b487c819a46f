//! `clt-tracer`: run the pipeline stage by stage from one configuration file.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O or format
//! error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clt_tracer::analysis::{identify_language_features, Cluster, Variant};
use clt_tracer::attribution::AttributionGraph;
use clt_tracer::corpus::write_corpus_dir;
use clt_tracer::intervene::{coefficient_sweep, default_down_range, default_up_range, run_with_interventions, write_sweep_csv, InterventionSpec};
use clt_tracer::pipeline::{encode_prompt, language_swap_suite, mixture_matrix, Pipeline, RunConfig};
use clt_tracer::{Error, Result};
use clt_tracer_service::{resolve_addr, ServiceOptions, SessionState};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "clt-tracer", version, about = "Cross-layer transcoder attribution workflow")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the bundled demo.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    artifacts: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus (optionally also as per-language text files).
    GenCorpus {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the balanced BPE tokenizer.
    TrainTokenizer,
    /// Train the language model.
    TrainLm,
    /// Capture MLP inputs and outputs into the activation store.
    Capture,
    /// Train the cross-layer transcoder.
    TrainClt,
    /// Write loss-curve and transcoder-quality CSVs.
    Metrics,
    /// Build a pruned attribution graph for a prompt.
    Attribute {
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        top_logits: Option<usize>,
        #[arg(long)]
        node_keep: Option<f64>,
        #[arg(long)]
        edge_keep: Option<f64>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Layerwise multilingual-score profile.
    Score {
        #[arg(long, value_enum, default_value_t = VariantArg::General)]
        variant: VariantArg,
        /// Copy the CSV here as well.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// List high-frequency features with their dominant language.
    LanguageFeatures {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run a prompt with feature edits from a JSON intervention spec.
    Intervene {
        #[command(flatten)]
        prompt: PromptArgs,
        /// Intervention spec (JSON); omitted means no edits.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Sweep scaling coefficients of one or two feature clusters.
    Sweep {
        #[command(flatten)]
        prompt: PromptArgs,
        /// Cluster scaled by the positive range (JSON).
        #[arg(long, value_name = "FILE")]
        up: PathBuf,
        /// Cluster scaled by the negative range (JSON).
        #[arg(long, value_name = "FILE")]
        down: Option<PathBuf>,
        #[arg(long)]
        target_token: u32,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Serve graphs, profiles and interventions over HTTP.
    Serve {
        /// Bind address; defaults to $CLT_TRACER_ADDR, then 127.0.0.1:8731.
        #[arg(long)]
        addr: Option<String>,
        #[arg(long, default_value_t = 64)]
        prompt_cap: usize,
        #[arg(long, default_value_t = 128)]
        cache_size: usize,
    },
    /// Write the demo graphs, or re-validate and copy one graph file.
    ExportGraph {
        /// Existing graph to validate and re-emit.
        #[arg(long, value_name = "FILE")]
        graph: Option<PathBuf>,
        /// Demo prompt index to export.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Everything: metrics, scores, language features, graphs and the swap suite.
    Demo,
    /// Train the dominant-language mixture matrix.
    Mixture,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long, value_name = "FILE")]
    prompt_file: Option<PathBuf>,
}

impl PromptArgs {
    fn text(&self) -> Result<String> {
        match (&self.prompt, &self.prompt_file) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(f)) => {
                let s = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                Ok(s.trim_end_matches(['\n', '\r']).to_string())
            }
            (None, None) => Err(Error::Validation("one of --prompt or --prompt-file is required".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    General,
    Top100,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::General => Variant::General,
            VariantArg::Top100 => Variant::Top100,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::demo(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(dir) = &common.artifacts {
        config.artifact_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    if let Command::Mixture = cli.command {
        let report = mixture_matrix(&config)?;
        return print_json(&report);
    }
    let mut p = Pipeline::open(&config)?;
    match cli.command {
        Command::GenCorpus { out } => {
            let (train, _, _) = p.corpus()?;
            if let Some(dir) = out {
                write_corpus_dir(&dir, &config.corpus.languages, &train)?;
            }
            print_json(&p.registry().stage("corpus").map(|r| r.summary.clone()))?;
        }
        Command::TrainTokenizer => print_json(&p.tokenizer_summary()?)?,
        Command::TrainLm => {
            let r = p.lm_report()?;
            print_json(&serde_json::json!({
                "steps": r.steps,
                "uniform_loss": r.uniform_loss,
                "final_validation": r.final_validation(),
            }))?;
        }
        Command::Capture => {
            p.ensure_capture()?;
            print_json(&p.registry().stage("capture").map(|r| r.summary.clone()))?;
        }
        Command::TrainClt => print_json(&p.clt_report()?.final_metrics())?,
        Command::Metrics => {
            for path in p.metrics()? {
                println!("{}", path.display());
            }
        }
        Command::Attribute { prompt, top_logits, node_keep, edge_keep, out } => {
            let text = prompt.text()?;
            let mut cfg = config.clone();
            if let Some(k) = top_logits {
                cfg.attribution.top_logits = k;
            }
            if let Some(k) = node_keep {
                cfg.attribution.node_keep = k;
            }
            if let Some(k) = edge_keep {
                cfg.attribution.edge_keep = k;
            }
            cfg.validate()?;
            let graph = p.attribute_with(&text, &cfg.attribution)?;
            write_out(out.as_deref(), &graph.to_json())?;
        }
        Command::Score { variant, out } => {
            let (path, _) = p.score(variant.into())?;
            if let Some(o) = out {
                std::fs::copy(&path, &o).map_err(|e| Error::io(&o, e))?;
            }
            println!("{}", path.display());
        }
        Command::LanguageFeatures { threshold, out } => {
            let feats = match threshold {
                Some(t) if !(0.0..=1.0).contains(&t) => {
                    return Err(Error::Validation(format!("--threshold must lie in [0, 1], got {t}")))
                }
                Some(t) => identify_language_features(p.activity()?, t),
                None => p.language_features()?,
            };
            write_out(out.as_deref(), &serde_json::to_string_pretty(&feats)?)?;
        }
        Command::Intervene { prompt, spec, out } => {
            let text = prompt.text()?;
            let spec: InterventionSpec = match spec {
                Some(path) => read_json(&path)?,
                None => InterventionSpec::default(),
            };
            let tok = p.tokenizer()?;
            let tokens = encode_prompt(&tok, &text, config.model.context_len)?;
            let params = p.language_model()?.cast::<f64>();
            let clt = p.transcoder()?.cast::<f64>();
            let result = run_with_interventions(&params, &clt, &tokens, &spec)?;
            write_out(out.as_deref(), &serde_json::to_string_pretty(&result)?)?;
        }
        Command::Sweep { prompt, up, down, target_token, out } => {
            let text = prompt.text()?;
            let up: Cluster = read_json(&up)?;
            let down: Option<Cluster> = down.map(|d| read_json(&d)).transpose()?;
            let tok = p.tokenizer()?;
            let tokens = encode_prompt(&tok, &text, config.model.context_len)?;
            let params = p.language_model()?.cast::<f64>();
            let clt = p.transcoder()?.cast::<f64>();
            let report = coefficient_sweep(
                &params,
                &clt,
                &tokens,
                &up,
                down.as_ref(),
                &default_up_range(),
                &default_down_range(),
                target_token,
            )?;
            write_sweep_csv(&report, &out)?;
            let best = &report.cells[report.best];
            println!("baseline rank {}; best rank {} at c_up={} c_down={:?}", report.baseline_rank, best.target_rank, best.c_up, best.c_down);
        }
        Command::Serve { addr, prompt_cap, cache_size } => {
            let options = ServiceOptions { prompt_cap, cache_size, ..Default::default() };
            let state = Arc::new(SessionState::from_pipeline(&mut p, options)?);
            let addr = resolve_addr(addr.as_deref());
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(clt_tracer_service::serve(state, &addr)).map_err(|e| Error::io(addr.as_str(), e))?;
        }
        Command::ExportGraph { graph, index, out } => match graph {
            Some(path) => {
                let g = AttributionGraph::load(&path)?;
                write_out(Some(&out), &g.to_json())?;
            }
            None => {
                let graphs = p.graphs()?;
                match index {
                    Some(i) => {
                        let src = graphs.get(i).ok_or_else(|| {
                            Error::Validation(format!("demo graph {i} does not exist ({} graphs)", graphs.len()))
                        })?;
                        write_out(Some(&out), &AttributionGraph::load(src)?.to_json())?;
                    }
                    None => {
                        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                        for src in graphs {
                            let name = src.file_name().expect("graph file name");
                            write_out(Some(&out.join(name)), &AttributionGraph::load(&src)?.to_json())?;
                        }
                    }
                }
            }
        },
        Command::Demo => {
            let report = p.run_demo()?;
            let swap = language_swap_suite(&mut p)?;
            print_json(&serde_json::json!({
                "demo": report,
                "swap_improved": swap.improved,
                "swap_cases": swap.cases.len(),
                "no_op_exact": swap.no_op_exact,
            }))?;
        }
        Command::Mixture => unreachable!("handled above"),
    }
    let ran = p.executed();
    eprintln!("stages run: {}", if ran.is_empty() { "none".to_string() } else { ran.join(", ") });
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
