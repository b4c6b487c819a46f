use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use clt_tracer::activations::ActivationStore;
use clt_tracer::analysis::ActivityTable;
use clt_tracer::clt::{clt_digest, CltParams};
use clt_tracer::container::sha256_hex;
use clt_tracer::corpus::{Language, Tokenizer};
use clt_tracer::pipeline::{AnalysisConfig, AttributionConfig, Pipeline};
use clt_tracer::tinylm::{model_digest, ModelParams};
use clt_tracer::Result;
use lru::LruCache;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Longest prompt, in tokens including `BOS`, accepted by any endpoint.
    pub prompt_cap: usize,
    /// Graph cache capacity in entries.
    pub cache_size: usize,
    /// Defaults for attribution requests that omit a field.
    pub attribution: AttributionConfig,
    /// Default for `/api/language-features` when no threshold is given.
    pub language_threshold: f64,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            prompt_cap: 64,
            cache_size: 128,
            attribution: AttributionConfig::default(),
            language_threshold: AnalysisConfig::default().language_threshold,
        }
    }
}

/// Everything the service reads. Loaded once and never written.
pub struct Artifacts {
    pub tokenizer: Tokenizer,
    pub params: ModelParams<f32>,
    pub clt: CltParams<f32>,
    pub store: ActivationStore,
    pub languages: Vec<Language>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub model_config: clt_tracer::tinylm::ModelConfig,
    pub model_digest: String,
    pub clt_config: clt_tracer::clt::CltConfig,
    pub clt_digest: String,
    pub n_layers: usize,
    pub d_features: usize,
    pub vocab_size: usize,
    pub languages: Vec<String>,
    pub prompt_cap: usize,
    pub cache_size: usize,
}

/// Immutable artifacts plus the graph cache. Shared across requests behind
/// an `Arc`; only the cache and the failure counter change.
pub struct SessionState {
    pub tokenizer: Tokenizer,
    pub params: ModelParams<f64>,
    pub clt: CltParams<f64>,
    pub clt32: CltParams<f32>,
    pub store: ActivationStore,
    pub table: ActivityTable,
    pub meta: Meta,
    pub options: ServiceOptions,
    cache: Mutex<LruCache<String, Arc<Vec<u8>>>>,
    failures: AtomicU64,
}

impl SessionState {
    pub fn new(a: Artifacts, options: ServiceOptions) -> Result<Self> {
        let table = ActivityTable::compute(&a.store, &a.clt)?;
        let meta = Meta {
            model_config: a.params.config.clone(),
            model_digest: model_digest(&a.params),
            clt_config: a.clt.config.clone(),
            clt_digest: clt_digest(&a.clt),
            n_layers: a.clt.n_layers,
            d_features: a.clt.d_features(),
            vocab_size: a.params.config.vocab_size,
            languages: a.languages.iter().map(|l| l.name.clone()).collect(),
            prompt_cap: options.prompt_cap,
            cache_size: options.cache_size,
        };
        let cap = NonZeroUsize::new(options.cache_size.max(1)).expect("positive");
        Ok(Self {
            tokenizer: a.tokenizer,
            params: a.params.cast::<f64>(),
            clt: a.clt.cast::<f64>(),
            clt32: a.clt,
            store: a.store,
            table,
            meta,
            options,
            cache: Mutex::new(LruCache::new(cap)),
            failures: AtomicU64::new(0),
        })
    }

    /// Bring the run's stages up to date and load their artifacts.
    pub fn from_pipeline(p: &mut Pipeline, mut options: ServiceOptions) -> Result<Self> {
        options.attribution = p.config().attribution.clone();
        options.language_threshold = p.config().analysis.language_threshold;
        let artifacts = Artifacts {
            tokenizer: p.tokenizer()?,
            params: p.language_model()?,
            clt: p.transcoder()?,
            store: p.activations()?,
            languages: p.config().corpus.languages.clone(),
        };
        Self::new(artifacts, options)
    }

    /// Longest accepted prompt: the configured cap or the model context.
    pub fn max_prompt_tokens(&self) -> usize {
        self.options.prompt_cap.min(self.params.config.context_len)
    }

    pub fn cache_key(&self, request: &impl Serialize) -> String {
        let body = serde_json::to_vec(request).expect("serializable request");
        let mut salted = self.meta.model_digest.clone().into_bytes();
        salted.extend_from_slice(self.meta.clt_digest.as_bytes());
        salted.extend_from_slice(&body);
        sha256_hex(&salted)
    }

    pub fn cached(&self, key: &str) -> Option<Arc<Vec<u8>>> {
        self.cache.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, bytes: Arc<Vec<u8>>) {
        self.cache.lock().expect("cache lock").put(key, bytes);
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// Identifier attached to a 500 response and the matching log line.
    pub fn diagnostic_id(&self, context: &str) -> String {
        let n = self.failures.fetch_add(1, Ordering::Relaxed);
        let digest = sha256_hex(format!("{n}:{context}").as_bytes());
        format!("diag-{n}-{}", &digest[..12])
    }
}
