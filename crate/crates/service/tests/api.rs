//! Endpoint contracts, exercised in-process through the router on a
//! smoke-sized run trained once per test binary.

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use clt_tracer::analysis::identify_language_features;
use clt_tracer::intervene::{run_with_interventions, EditMode, FeatureEdit, InterventionSpec};
use clt_tracer::clt::FeatureKey;
use clt_tracer::pipeline::{attribute_prompt, encode_prompt, Pipeline, RunConfig};
use clt_tracer_service::{resolve_addr, router, Artifacts, ServiceOptions, SessionState, API_VERSION, DEFAULT_ADDR};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    config: RunConfig,
    state: Arc<SessionState>,
    prompts: Vec<String>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::smoke();
        config.artifact_dir = dir.path().join("run");
        let mut p = Pipeline::open(&config).unwrap();
        let state = SessionState::from_pipeline(&mut p, ServiceOptions::default()).unwrap();
        let prompts = p.demo_prompts().into_iter().map(|(_, s)| s).collect();
        Fixture { _dir: dir, config: p.config().clone(), state: Arc::new(state), prompts }
    })
}

async fn call(state: &Arc<SessionState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(serde_json::to_vec(&v).unwrap())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(state: &Arc<SessionState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(state, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).expect("JSON body"))
}

#[tokio::test]
async fn meta_reports_versions_and_shapes() {
    let f = fixture();
    let (status, v) = call_json(&f.state, "GET", "/api/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["version"], json!(API_VERSION));
    assert_eq!(v["n_layers"], json!(f.config.model.n_layers));
    assert_eq!(v["d_features"], json!(f.config.clt.d_features));
    assert_eq!(v["vocab_size"], json!(f.config.tokenizer.vocab_size));
    assert_eq!(v["languages"].as_array().unwrap().len(), f.config.corpus.languages.len());
    assert_eq!(v["model_digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn attribute_matches_library_and_is_byte_stable() {
    let f = fixture();
    let prompt = &f.prompts[0];
    let (s1, first) = call(&f.state, "POST", "/api/attribute", Some(json!({ "prompt": prompt }))).await;
    let (s2, second) = call(&f.state, "POST", "/api/attribute", Some(json!({ "prompt": prompt }))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, second);

    let st = &f.state;
    let tokens = encode_prompt(&st.tokenizer, prompt, st.max_prompt_tokens()).unwrap();
    let direct = attribute_prompt(&st.params, &st.clt, Some(&st.table), &tokens, prompt, &st.options.attribution).unwrap();
    assert_eq!(first, direct.to_json().into_bytes());

    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["version"], json!(API_VERSION));
    assert_eq!(v["tokens"].as_array().unwrap().len(), tokens.len());

    let (s3, loose) = call(&f.state, "POST", "/api/attribute", Some(json!({ "prompt": prompt, "node_keep": 0.5 }))).await;
    assert_eq!(s3, StatusCode::OK);
    let loose: Value = serde_json::from_slice(&loose).unwrap();
    assert!(loose["nodes"].as_array().unwrap().len() <= v["nodes"].as_array().unwrap().len());
}

#[tokio::test]
async fn feature_profile_of_a_live_feature() {
    let f = fixture();
    let d = f.config.clt.d_features;
    let key = (0..d)
        .map(|i| FeatureKey { layer: 0, index: i })
        .find(|&k| f.state.table.profile(k, clt_tracer::analysis::Variant::General).distribution.is_some())
        .expect("some live feature");
    let (status, v) = call_json(&f.state, "GET", &format!("/api/feature/0/{}", key.index), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["version"], json!(API_VERSION));
    assert_eq!(v["inactive"], json!(false));
    let dist: Vec<f64> = serde_json::from_value(v["general"]["distribution"].clone()).unwrap();
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let seqs = v["top_sequences"].as_array().unwrap();
    assert!(!seqs.is_empty());
    for s in seqs {
        assert_eq!(s["tokens"].as_array().unwrap().len(), f.config.store.seq_len);
        let max = s["tokens"].as_array().unwrap().iter().map(|t| t["activation"].as_f64().unwrap()).fold(f64::MIN, f64::max);
        assert!((max - s["max_activation"].as_f64().unwrap()).abs() < 1e-6);
    }
}

#[tokio::test]
async fn dead_feature_is_reported_inactive() {
    let f = fixture();
    let mut p = Pipeline::open(&f.config).unwrap();
    let mut clt = p.transcoder().unwrap();
    clt.enc_w[1].row_mut(3).fill(0.0);
    clt.enc_b[1][3] = -1.0;
    let artifacts = Artifacts {
        tokenizer: p.tokenizer().unwrap(),
        params: p.language_model().unwrap(),
        clt,
        store: p.activations().unwrap(),
        languages: f.config.corpus.languages.clone(),
    };
    let state = Arc::new(SessionState::new(artifacts, ServiceOptions::default()).unwrap());
    let (status, v) = call_json(&state, "GET", "/api/feature/1/3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["inactive"], json!(true));
    assert_eq!(v["general"]["distribution"], Value::Null);
    assert!(v["top_sequences"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn unknown_features_and_bad_paths() {
    let f = fixture();
    let d = f.config.clt.d_features;
    let (s, v) = call_json(&f.state, "GET", &format!("/api/feature/0/{d}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["version"], json!(API_VERSION));
    let (s, _) = call_json(&f.state, "GET", "/api/feature/7/0", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&f.state, "GET", "/api/feature/x/0", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], json!("layer"));
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let f = fixture();
    let cases = [
        ("/api/attribute", json!({ "prompt": 5 }), "prompt"),
        ("/api/attribute", json!({ "prompt": "a", "edge_keep": 2.0 }), "edge_keep"),
        ("/api/attribute", json!({ "prompt": "a", "top_logits": 0 }), "top_logits"),
        ("/api/attribute", json!({ "prompt": "" }), "prompt"),
        ("/api/attribute", json!({ "prompt": "a ".repeat(200) }), "prompt"),
        ("/api/intervene", json!({ "prompt": "a", "spec": { "edits": [{ "feature": { "layer": 0, "index": 0 }, "mode": "grow" }] } }), "spec.edits[0]"),
        ("/api/sweep", json!({ "prompt": "a", "up": { "name": "u", "members": [] } }), "target_token"),
        ("/api/sweep", json!({ "prompt": "a", "up": { "members": [] }, "target_token": 1 }), "up.name"),
    ];
    for (uri, body, field) in cases {
        let (s, v) = call_json(&f.state, "POST", uri, Some(body.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{uri} {body}");
        assert_eq!(v["version"], json!(API_VERSION));
        assert!(v["error"].is_string());
        let got = v["field"].as_str().unwrap_or_else(|| panic!("no field for {body}: {v}"));
        assert!(got.starts_with(field), "{body}: field {got}, expected {field}");
    }
    let (s, v) = call_json(&f.state, "POST", "/api/attribute", Some(json!({ "prompt": "a", "extra": 1 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("extra"));
}

#[tokio::test]
async fn empty_intervention_is_the_identity() {
    let f = fixture();
    let (s, v) = call_json(&f.state, "POST", "/api/intervene", Some(json!({ "prompt": f.prompts[0], "spec": { "edits": [], "target_token": 7 } }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["version"], json!(API_VERSION));
    assert_eq!(v["result"]["baseline_top"], v["result"]["edited_top"]);
    assert_eq!(v["result"]["rank_before"], v["result"]["rank_after"]);

    let spec = InterventionSpec {
        edits: vec![FeatureEdit { feature: FeatureKey { layer: 0, index: 1 }, positions: None, mode: EditMode::Scale(-4.0) }],
        target_token: Some(7),
        ..Default::default()
    };
    let (s, v) = call_json(&f.state, "POST", "/api/intervene", Some(json!({ "prompt": f.prompts[1], "spec": spec }))).await;
    assert_eq!(s, StatusCode::OK);
    let st = &f.state;
    let tokens = encode_prompt(&st.tokenizer, &f.prompts[1], st.max_prompt_tokens()).unwrap();
    let direct = run_with_interventions(&st.params, &st.clt, &tokens, &spec).unwrap();
    assert_eq!(v["result"], serde_json::to_value(&direct).unwrap());
    assert_eq!(v["tokens"], json!(tokens));
}

#[tokio::test]
async fn sweep_grid_shape() {
    let f = fixture();
    let body = json!({
        "prompt": f.prompts[0],
        "up": { "name": "up", "members": [{ "layer": 1, "index": 0 }, { "layer": 1, "index": 2 }] },
        "down": { "name": "down", "members": [{ "layer": 0, "index": 5 }] },
        "up_range": [0.0, 1.0, 2.0],
        "down_range": [-1.0, -3.0],
        "target_token": 9,
    });
    let (s, v) = call_json(&f.state, "POST", "/api/sweep", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["version"], json!(API_VERSION));
    assert_eq!(v["columns"], json!(["c_up", "c_down", "target_rank", "top_token"]));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let vocab = f.config.tokenizer.vocab_size as u64;
    for r in rows {
        let r = r.as_array().unwrap();
        assert_eq!(r.len(), 4);
        assert!(r[2].as_u64().unwrap() >= 1 && r[2].as_u64().unwrap() <= vocab);
        assert!(r[3].as_u64().unwrap() < vocab);
    }
    let best_rank = rows.iter().map(|r| r[2].as_u64().unwrap()).min().unwrap();
    let best = v["best"].as_u64().unwrap() as usize;
    assert_eq!(rows[best][2].as_u64().unwrap(), best_rank);
    assert!(rows[..best].iter().all(|r| r[2].as_u64().unwrap() > best_rank));
}

#[tokio::test]
async fn language_features_endpoint() {
    let f = fixture();
    let (s, v) = call_json(&f.state, "GET", "/api/language-features", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["threshold"], json!(f.config.analysis.language_threshold));
    let expected = identify_language_features(&f.state.table, f.config.analysis.language_threshold);
    assert_eq!(v["features"], serde_json::to_value(&expected).unwrap());

    let (s, strict) = call_json(&f.state, "GET", "/api/language-features?threshold=0.5", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(strict["features"].as_array().unwrap().len() <= v["features"].as_array().unwrap().len());

    for (q, field) in [("threshold=2", "threshold"), ("threshold=abc", "threshold"), ("limit=3", "limit")] {
        let (s, e) = call_json(&f.state, "GET", &format!("/api/language-features?{q}"), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
        assert_eq!(e["field"], json!(field));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    let f = fixture();
    let st = Arc::new(
        SessionState::from_pipeline(&mut Pipeline::open(&f.config).unwrap(), ServiceOptions { cache_size: 2, ..Default::default() })
            .unwrap(),
    );
    let requests: Vec<(&str, Value)> = f
        .prompts
        .iter()
        .flat_map(|p| {
            [
                ("/api/attribute", json!({ "prompt": p })),
                ("/api/attribute", json!({ "prompt": p, "edge_keep": 0.9 })),
                ("/api/intervene", json!({ "prompt": p, "spec": { "edits": [{ "feature": { "layer": 0, "index": 2 }, "mode": "zero" }] } })),
            ]
        })
        .collect();
    let mut serial = Vec::new();
    for (uri, body) in &requests {
        serial.push(call(&st, "POST", uri, Some(body.clone())).await);
    }
    let mut handles = Vec::new();
    for round in 0..3 {
        for (i, (uri, body)) in requests.iter().enumerate() {
            let (st, uri, body) = (st.clone(), uri.to_string(), body.clone());
            handles.push((i, round, tokio::spawn(async move { call(&st, "POST", &uri, Some(body)).await })));
        }
    }
    for (i, round, h) in handles {
        assert_eq!(h.await.unwrap(), serial[i], "request {i} round {round}");
    }
    assert!(st.cache_len() <= 2);
}

#[test]
fn address_resolution_prefers_explicit() {
    assert_eq!(resolve_addr(Some("0.0.0.0:9000")), "0.0.0.0:9000");
    if std::env::var(clt_tracer_service::ADDR_ENV).is_err() {
        assert_eq!(resolve_addr(None), DEFAULT_ADDR);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_over_tcp() {
    use std::io::{Read, Write};
    let f = fixture();
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let server = tokio::spawn(clt_tracer_service::serve(f.state.clone(), Box::leak(addr.clone().into_boxed_str())));
    let response = tokio::task::spawn_blocking(move || {
        for _ in 0..100 {
            if let Ok(mut s) = std::net::TcpStream::connect(&addr) {
                write!(s, "GET /api/meta HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
                let mut out = String::new();
                s.read_to_string(&mut out).unwrap();
                return out;
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        panic!("server never accepted a connection");
    })
    .await
    .unwrap();
    server.abort();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = &response[response.find("\r\n\r\n").unwrap() + 4..];
    let v: Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["version"], json!(API_VERSION));
}
