//! HTTP recommendation service: training, counterfactual explanation,
//! what-if prediction, and feasible-action export over a directory-backed
//! model registry.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/healthz` | |
//! | GET | `/api/v1/models` | |
//! | POST | `/api/v1/models/train` | [`api::TrainRequest`] |
//! | POST | `/api/v1/explain` | [`api::ExplainRequest`] |
//! | POST | `/api/v1/whatif` | [`api::WhatIfRequest`] |
//! | GET | `/api/v1/feasible-actions?model_id=&task=&mutable=` | |

pub mod api;
pub mod error;
pub mod registry;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Request};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use cfsched::{AllocationGrid, FeaturePolicy};

pub use error::ServiceError;
pub use registry::{ModelRegistryEntry, Registry};

/// Log target of the per-request JSON lines.
pub const REQUEST_LOG_TARGET: &str = "cfsched_service::request";

const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub model_dir: PathBuf,
    /// Grid for train requests that do not carry one.
    pub default_grid: AllocationGrid,
    /// Base policy that explain requests override.
    pub default_policy: FeaturePolicy,
    pub request_log: bool,
    /// Tree-growing threads per train request.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model_dir: PathBuf::from("models"),
            default_grid: AllocationGrid::default(),
            default_policy: FeaturePolicy::default(),
            request_log: true,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

pub struct AppState {
    pub registry: Registry,
    pub default_grid: AllocationGrid,
    pub default_policy: FeaturePolicy,
    pub workers: usize,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> Result<AppState, ServiceError> {
        config.default_grid.validate()?;
        config.default_policy.validate()?;
        Ok(AppState {
            registry: Registry::open(&config.model_dir)?,
            default_grid: config.default_grid.clone(),
            default_policy: config.default_policy.clone(),
            workers: config.workers.max(1),
        })
    }
}

pub fn router(state: Arc<AppState>, request_log: bool) -> Router {
    let router = Router::new()
        .route("/healthz", get(api::healthz))
        .route("/api/v1/models", get(api::list_models))
        .route("/api/v1/models/train", post(api::train))
        .route("/api/v1/explain", post(api::explain))
        .route("/api/v1/whatif", post(api::whatif))
        .route("/api/v1/feasible-actions", get(api::feasible_actions))
        .fallback(api::not_found)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    if request_log {
        router.layer(middleware::from_fn(log_request))
    } else {
        router
    }
}

async fn log_request(request: Request, next: Next) -> Response {
    let method = request.method().to_string();
    let path = request.uri().path().to_string();
    let started = Instant::now();
    let response = next.run(request).await;
    let line = serde_json::json!({
        "method": method,
        "path": path,
        "status": response.status().as_u16(),
        "latency_ms": started.elapsed().as_secs_f64() * 1e3,
    });
    log::info!(target: REQUEST_LOG_TARGET, "{line}");
    response
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::new(&config)?);
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|e| ServiceError::Internal(format!("bind {}: {e}", config.addr)))?;
    log::info!(
        "listening on {} (models in {})",
        listener.local_addr().map(|a| a.to_string()).unwrap_or_default(),
        config.model_dir.display()
    );
    axum::serve(listener, router(state, config.request_log))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
