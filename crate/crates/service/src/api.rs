//! Request bodies and handlers for `/api/v1`.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cfsched::engine::{enumerate_feasible_actions, write_feasible_csv};
use cfsched::forest::{train_forest_with, FeatureMeta, TaskTypeScope, TrainOptions, TrainingMetrics};
use cfsched::ingest::{assign_deadlines, label_records, parse_trace, DeadlinePolicy, IngestOptions, TraceFormat};
use cfsched::{
    generate_counterfactuals, AllocationGrid, ContainerConfig, Feature, FeaturePolicy, Forest, Hyperparams,
    TaskRecord, TaskSpec, TaskType,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::registry::{valid_model_id, ModelRegistryEntry};
use crate::AppState;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub records: Option<Vec<TaskRecord>>,
    /// Server-side trace file, read with `format`.
    pub dataset_path: Option<PathBuf>,
    pub format: Option<String>,
    pub machine_mem_gib: Option<f64>,
    pub hyperparams: Option<Hyperparams>,
    /// Defaults to keeping the records' own deadlines.
    pub deadline_policy: Option<DeadlinePolicy>,
    /// Restricts training to one task type.
    pub task_type: Option<TaskType>,
    pub grid: Option<AllocationGrid>,
    /// Replaces the model with this id, or registers it under this id.
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_id: String,
    pub metrics: TrainingMetrics,
}

/// Per-request changes to the service's default policy.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    pub mutable_features: Option<Vec<Feature>>,
    pub tau_prox: Option<f64>,
    pub tau_div: Option<f64>,
    pub k_max: Option<usize>,
    pub q: Option<usize>,
}

impl PolicyOverrides {
    /// `k_max` is clamped to the number of mutable features unless set.
    pub fn apply(&self, base: &FeaturePolicy) -> FeaturePolicy {
        let mut policy = base.clone();
        if let Some(m) = &self.mutable_features {
            policy.mutable_features = m.clone();
            policy.k_max = policy.k_max.min(m.len()).max(1);
        }
        policy.tau_prox = self.tau_prox.unwrap_or(policy.tau_prox);
        policy.tau_div = self.tau_div.unwrap_or(policy.tau_div);
        policy.k_max = self.k_max.unwrap_or(policy.k_max);
        policy.q = self.q.unwrap_or(policy.q);
        policy
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub model_id: String,
    pub task: TaskSpec,
    #[serde(default)]
    pub policy: PolicyOverrides,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub model_id: String,
    pub config: ContainerConfig,
    pub deadline_s: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub predicted_label: u8,
    pub vote_fraction: f64,
}

#[derive(Debug, Deserialize)]
pub struct FeasibleQuery {
    pub model_id: String,
    /// JSON-encoded task.
    pub task: String,
    /// Comma-separated feature names.
    pub mutable: Option<String>,
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ServiceError::BadRequest("empty request body".into()));
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

fn model(state: &AppState, model_id: &str) -> Result<Arc<Forest>, ServiceError> {
    state
        .registry
        .get(model_id)
        .ok_or_else(|| ServiceError::UnknownModel(model_id.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

pub async fn healthz() -> impl IntoResponse {
    Json(Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
    })
}

pub async fn list_models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelRegistryEntry>> {
    Json(state.registry.entries())
}

pub async fn train(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<TrainResponse>, ServiceError> {
    let request: TrainRequest = parse_body(&body)?;
    blocking(move || train_blocking(&state, request)).await.map(Json)
}

/// Loads the records named by a train request.
fn request_records(request: &TrainRequest, grid: &AllocationGrid) -> Result<Vec<TaskRecord>, ServiceError> {
    match (&request.records, &request.dataset_path) {
        (Some(records), None) => Ok(records.clone()),
        (None, Some(path)) => {
            let format = TraceFormat::from_str(request.format.as_deref().unwrap_or("ndjson"))?;
            let mut options = IngestOptions {
                grid: grid.clone(),
                ..IngestOptions::default()
            };
            if let Some(m) = request.machine_mem_gib {
                options.machine_mem_gib = m;
            }
            let (records, report) = parse_trace(path, format, &options)?;
            log::info!("read {} records from {} ({} rejected)", report.accepted, path.display(), report.rejected);
            Ok(records)
        }
        _ => Err(ServiceError::BadRequest(
            "exactly one of `records` and `dataset_path` is required".into(),
        )),
    }
}

fn train_blocking(state: &AppState, request: TrainRequest) -> Result<TrainResponse, ServiceError> {
    if let Some(id) = &request.model_id {
        if !valid_model_id(id) {
            return Err(ServiceError::BadRequest(format!(
                "model_id `{id}` must be 1-64 characters from [A-Za-z0-9_-]"
            )));
        }
    }
    let grid = request.grid.clone().unwrap_or_else(|| state.default_grid.clone());
    grid.validate()?;
    let hyperparams = request.hyperparams.clone().unwrap_or_default();
    let mut records = request_records(&request, &grid)?;
    if let Some(policy) = &request.deadline_policy {
        records = assign_deadlines(&records, policy, hyperparams.seed)?;
    }
    let scope = match request.task_type {
        Some(task_type) => {
            records.retain(|r| r.task_type == task_type);
            TaskTypeScope::PerType { task_type }
        }
        None => TaskTypeScope::Global,
    };
    let instances = label_records(&records)?;
    let options = TrainOptions {
        feature_meta: FeatureMeta::with_grid(grid),
        scope,
        workers: state.workers,
    };

    let _writer = state.registry.lock_writer();
    let forest = train_forest_with(&instances, &hyperparams, &options)?;
    let metrics = forest.metrics.clone();
    let entry = state.registry.publish(request.model_id, forest)?;
    log::info!(
        "trained model {} on {} instances (train accuracy {:.4})",
        entry.model_id,
        metrics.n_instances,
        metrics.train_accuracy
    );
    Ok(TrainResponse {
        model_id: entry.model_id,
        metrics,
    })
}

pub async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ServiceError> {
    let request: ExplainRequest = parse_body(&body)?;
    let forest = model(&state, &request.model_id)?;
    let policy = request.policy.apply(&state.default_policy);
    let bytes = blocking(move || {
        let grid = forest.grid();
        let set = generate_counterfactuals(&forest, &request.task, &policy, grid)
            .map_err(|e| ServiceError::with_task(e, &request.task, grid))?;
        serde_json::to_vec(&set).map_err(|e| ServiceError::Internal(e.to_string()))
    })
    .await?;
    Ok(json_bytes(bytes))
}

pub async fn whatif(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<WhatIfResponse>, ServiceError> {
    let request: WhatIfRequest = parse_body(&body)?;
    let forest = model(&state, &request.model_id)?;
    let task = TaskSpec::new("whatif", request.config, request.deadline_s);
    task.validate()?;
    let grid = forest.grid();
    request
        .config
        .check_on_grid(grid)
        .map_err(|e| ServiceError::with_task(e, &task, grid))?;
    let prediction = forest.predict(&task.features())?;
    Ok(Json(WhatIfResponse {
        predicted_label: prediction.label,
        vote_fraction: prediction.vote_fraction,
    }))
}

pub async fn feasible_actions(
    State(state): State<Arc<AppState>>,
    query: Result<Query<FeasibleQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(query) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let forest = model(&state, &query.model_id)?;
    let task: TaskSpec =
        serde_json::from_str(&query.task).map_err(|e| ServiceError::BadRequest(format!("task: {e}")))?;
    let mut policy = state.default_policy.clone();
    if let Some(list) = &query.mutable {
        let features = list
            .split(',')
            .map(|s| Feature::from_str(s.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        policy = PolicyOverrides {
            mutable_features: Some(features),
            ..PolicyOverrides::default()
        }
        .apply(&policy);
    }
    let csv = blocking(move || {
        let grid = forest.grid();
        let rows = enumerate_feasible_actions(&forest, &task, &policy, grid)
            .map_err(|e| ServiceError::with_task(e, &task, grid))?;
        let mut out = Vec::new();
        write_feasible_csv(&mut out, &rows)?;
        Ok(out)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

pub async fn not_found(uri: axum::http::Uri) -> ServiceError {
    ServiceError::NoRoute(uri.path().to_string())
}
