//! HTTP/JSON service over a trained run: attribution graphs, feature
//! profiles, interventions, coefficient sweeps and language features.
//!
//! Every JSON payload carries `version`. Graphs are cached by request digest
//! in a bounded LRU and served as the exact bytes produced the first time.

mod state;

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use clt_tracer::analysis::{
    feature_activity, identify_language_features, Cluster, MultilingualProfile, Variant, TOP_SEQUENCES,
};
use clt_tracer::attribution::GRAPH_VERSION;
use clt_tracer::clt::FeatureKey;
use clt_tracer::intervene::{
    coefficient_sweep, default_down_range, default_up_range, run_with_interventions, InterventionResult,
    InterventionSpec,
};
use clt_tracer::pipeline::{attribute_prompt, encode_prompt, AttributionConfig};
use clt_tracer::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use state::{Artifacts, Meta, ServiceOptions, SessionState};

/// Schema version echoed in every payload; graphs carry the same number.
pub const API_VERSION: u32 = GRAPH_VERSION;
pub const ADDR_ENV: &str = "CLT_TRACER_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8731";

/// An explicit address wins over `CLT_TRACER_ADDR`, which wins over the default.
pub fn resolve_addr(explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| std::env::var(ADDR_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
    diagnostic_id: Option<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>, field: Option<&str>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into(), field: field.map(String::from), diagnostic_id: None }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into(), field: None, diagnostic_id: None }
    }

    fn from_core(state: &SessionState, e: Error, field: Option<&str>) -> Self {
        match e {
            Error::Validation(m) | Error::Config(m) => Self::bad_request(m, field),
            other => {
                let id = state.diagnostic_id(&other.to_string());
                log::error!("{id}: {other}");
                Self {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    message: other.to_string(),
                    field: None,
                    diagnostic_id: Some(id),
                }
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "version": API_VERSION, "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        if let Some(id) = self.diagnostic_id {
            body["diagnostic_id"] = json!(id);
        }
        (self.status, axum::Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parse a JSON body, naming the offending field on failure.
fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        // A missing field fails at its parent, so the path stops one level short.
        let missing = message.strip_prefix("missing field `").and_then(|rest| rest.split('`').next());
        let field = match (path.as_str(), missing) {
            (".", Some(name)) => Some(name.to_string()),
            (_, Some(name)) => Some(format!("{path}.{name}")),
            (".", None) => None,
            _ => Some(path),
        };
        ApiError { status: StatusCode::BAD_REQUEST, message, field, diagnostic_id: None }
    })
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn versioned(mut value: serde_json::Value) -> Response {
    value["version"] = json!(API_VERSION);
    json_bytes(serde_json::to_vec(&value).expect("serializable"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("request task failed: {e}"),
            field: None,
            diagnostic_id: Some("task-join".into()),
        })
    })
}

fn encode(state: &SessionState, prompt: &str) -> ApiResult<Vec<u32>> {
    encode_prompt(&state.tokenizer, prompt, state.max_prompt_tokens())
        .map_err(|e| ApiError::from_core(state, e, Some("prompt")))
}

pub fn router(state: Arc<SessionState>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/attribute", post(attribute))
        .route("/api/feature/{layer}/{index}", get(feature))
        .route("/api/intervene", post(intervene))
        .route("/api/sweep", post(sweep))
        .route("/api/language-features", get(language_features))
        .with_state(state)
}

pub async fn serve(state: Arc<SessionState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn meta(State(state): State<Arc<SessionState>>) -> Response {
    versioned(serde_json::to_value(&state.meta).expect("serializable"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeRequest {
    prompt: String,
    top_logits: Option<usize>,
    node_keep: Option<f64>,
    edge_keep: Option<f64>,
}

#[derive(Serialize)]
struct AttributeKey<'a> {
    prompt: &'a str,
    config: &'a AttributionConfig,
}

async fn attribute(State(state): State<Arc<SessionState>>, body: Bytes) -> ApiResult<Response> {
    let req: AttributeRequest = parse(&body)?;
    let mut cfg = state.options.attribution.clone();
    if let Some(k) = req.top_logits {
        if k == 0 {
            return Err(ApiError::bad_request("top_logits must be at least 1", Some("top_logits")));
        }
        cfg.top_logits = k;
    }
    for (name, v, slot) in [("node_keep", req.node_keep, &mut cfg.node_keep), ("edge_keep", req.edge_keep, &mut cfg.edge_keep)] {
        if let Some(v) = v {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ApiError::bad_request(format!("{name} must lie in (0, 1], got {v}"), Some(name)));
            }
            *slot = v;
        }
    }
    let key = state.cache_key(&AttributeKey { prompt: &req.prompt, config: &cfg });
    if let Some(bytes) = state.cached(&key) {
        return Ok(json_bytes(bytes.as_ref().clone()));
    }
    let st = state.clone();
    let bytes = blocking(move || {
        let tokens = encode(&st, &req.prompt)?;
        let graph = attribute_prompt(&st.params, &st.clt, Some(&st.table), &tokens, &req.prompt, &cfg)
            .map_err(|e| ApiError::from_core(&st, e, None))?;
        Ok(Arc::new(graph.to_json().into_bytes()))
    })
    .await?;
    state.insert(key, bytes.clone());
    Ok(json_bytes(bytes.as_ref().clone()))
}

#[derive(Serialize)]
struct TokenActivation {
    id: u32,
    text: String,
    activation: f32,
}

#[derive(Serialize)]
struct TopSequence {
    sequence: usize,
    language: String,
    max_activation: f32,
    tokens: Vec<TokenActivation>,
}

#[derive(Serialize)]
struct FeatureResponse {
    feature: FeatureKey,
    inactive: bool,
    general: MultilingualProfile,
    top100: MultilingualProfile,
    top_sequences: Vec<TopSequence>,
}

async fn feature(
    State(state): State<Arc<SessionState>>,
    Path((layer, index)): Path<(String, String)>,
) -> ApiResult<Response> {
    let layer: usize = layer.parse().map_err(|_| ApiError::bad_request(format!("layer `{layer}` is not an index"), Some("layer")))?;
    let index: usize = index.parse().map_err(|_| ApiError::bad_request(format!("index `{index}` is not an index"), Some("index")))?;
    let key = FeatureKey { layer, index };
    if state.table.check(key).is_err() {
        return Err(ApiError::not_found(format!(
            "feature {key} does not exist ({} layers × {} features)",
            state.meta.n_layers, state.meta.d_features
        )));
    }
    let st = state.clone();
    blocking(move || {
        let general = st.table.profile(key, Variant::General);
        let top100 = st.table.profile(key, Variant::Top100);
        let activity = feature_activity(&st.store, &st.clt32, key).map_err(|e| ApiError::from_core(&st, e, None))?;
        let top_sequences = st
            .table
            .top_sequences(key, TOP_SEQUENCES)
            .into_iter()
            .map(|(seq, max_activation)| TopSequence {
                sequence: seq,
                language: st.meta.languages.get(st.store.languages[seq].0).cloned().unwrap_or_default(),
                max_activation,
                tokens: st.store.tokens[seq]
                    .iter()
                    .zip(activity.activations.row(seq))
                    .map(|(&id, &activation)| TokenActivation { id, text: st.tokenizer.token_str(id).to_string(), activation })
                    .collect(),
            })
            .collect();
        let inactive = general.distribution.is_none();
        let resp = FeatureResponse { feature: key, inactive, general, top100, top_sequences };
        Ok(versioned(serde_json::to_value(&resp).expect("serializable")))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterveneRequest {
    prompt: String,
    #[serde(default)]
    spec: InterventionSpec,
}

#[derive(Serialize)]
struct InterveneResponse {
    tokens: Vec<u32>,
    result: InterventionResult,
}

async fn intervene(State(state): State<Arc<SessionState>>, body: Bytes) -> ApiResult<Response> {
    let req: InterveneRequest = parse(&body)?;
    blocking(move || {
        let tokens = encode(&state, &req.prompt)?;
        let result =
            run_with_interventions(&state.params, &state.clt, &tokens, &req.spec).map_err(|e| ApiError::from_core(&state, e, Some("spec")))?;
        Ok(versioned(serde_json::to_value(InterveneResponse { tokens, result }).expect("serializable")))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRequest {
    prompt: String,
    up: Cluster,
    #[serde(default)]
    down: Option<Cluster>,
    #[serde(default)]
    up_range: Option<Vec<f64>>,
    #[serde(default)]
    down_range: Option<Vec<f64>>,
    target_token: u32,
}

async fn sweep(State(state): State<Arc<SessionState>>, body: Bytes) -> ApiResult<Response> {
    let req: SweepRequest = parse(&body)?;
    blocking(move || {
        let tokens = encode(&state, &req.prompt)?;
        let up_range = req.up_range.unwrap_or_else(default_up_range);
        let down_range = req.down_range.unwrap_or_else(default_down_range);
        let report = coefficient_sweep(
            &state.params,
            &state.clt,
            &tokens,
            &req.up,
            req.down.as_ref(),
            &up_range,
            &down_range,
            req.target_token,
        )
        .map_err(|e| ApiError::from_core(&state, e, None))?;
        let rows: Vec<serde_json::Value> = report
            .cells
            .iter()
            .map(|c| json!([c.c_up, c.c_down, c.target_rank, c.top_token]))
            .collect();
        Ok(versioned(json!({
            "target_token": report.target_token,
            "baseline_rank": report.baseline_rank,
            "best": report.best,
            "columns": ["c_up", "c_down", "target_rank", "top_token"],
            "rows": rows,
        })))
    })
    .await
}

async fn language_features(
    State(state): State<Arc<SessionState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let threshold = match q.get("threshold") {
        None => state.options.language_threshold,
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|t| (0.0..=1.0).contains(t))
            .ok_or_else(|| ApiError::bad_request(format!("threshold `{s}` must be a number in [0, 1]"), Some("threshold")))?,
    };
    if let Some(other) = q.keys().find(|k| k.as_str() != "threshold") {
        return Err(ApiError::bad_request(format!("unknown query parameter `{other}`"), Some(other)));
    }
    let features = identify_language_features(&state.table, threshold);
    Ok(versioned(json!({ "threshold": threshold, "features": features })))
}
