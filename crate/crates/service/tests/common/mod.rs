#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cfsched::synth::{generate_history, GroundTruthModel};
use cfsched::{AllocationGrid, Forest, TaskRecord};
use cfsched_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct TestServer {
    pub app: Router,
    pub state: Arc<AppState>,
    pub dir: tempfile::TempDir,
}

impl TestServer {
    pub fn new() -> TestServer {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = ServiceConfig {
            model_dir: dir.path().join("models"),
            request_log: false,
            workers: 4,
            ..ServiceConfig::default()
        };
        let state = Arc::new(AppState::new(&config).expect("state"));
        TestServer {
            app: router(state.clone(), false),
            state,
            dir,
        }
    }

    pub fn model_dir(&self) -> &Path {
        self.state.registry.dir()
    }

    /// The persisted forest behind `model_id`, read from disk.
    pub fn load_model(&self, model_id: &str) -> Forest {
        Forest::load(&self.model_dir().join(format!("{model_id}.json"))).expect("model file")
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
        call(&self.app, method, uri, body).await
    }

    pub async fn post_json(&self, uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
        self.call(Method::POST, uri, Some(serde_json::to_vec(body).unwrap())).await
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.call(Method::GET, uri, None).await
    }

    /// Trains and returns the model id.
    pub async fn train(&self, body: &Value) -> String {
        let (status, bytes) = self.post_json("/api/v1/models/train", body).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        v["model_id"].as_str().unwrap().to_string()
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let mut request = Request::builder().method(method).uri(uri);
    if body.is_some() {
        request = request.header("content-type", "application/json");
    }
    let request = request.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub fn history(n: usize, seed: u64) -> Vec<TaskRecord> {
    generate_history(&GroundTruthModel::default(), &AllocationGrid::default(), n, (0.7, 1.5), seed).unwrap()
}

pub fn train_body(n: usize, seed: u64, n_trees: usize) -> Value {
    json!({
        "records": history(n, seed),
        "hyperparams": { "n_trees": n_trees, "seed": seed },
    })
}

pub fn percent_encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}
