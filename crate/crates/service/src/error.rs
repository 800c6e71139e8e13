use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use cfsched::{Error as CoreError, TaskSpec};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed request: {0}")]
    BadRequest(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("no route for `{0}`")]
    NoRoute(String),

    #[error("{source}")]
    OffGrid {
        source: CoreError,
        /// The task with its configuration snapped to the nearest grid point.
        suggestion: Option<Box<TaskSpec>>,
    },

    #[error("failed to persist model: {0}")]
    Persistence(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) | ServiceError::OffGrid { .. } => StatusCode::BAD_REQUEST,
            ServiceError::UnknownModel(_) | ServiceError::NoRoute(_) => StatusCode::NOT_FOUND,
            ServiceError::Persistence(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Core(e) => match e {
                CoreError::SingleClass
                | CoreError::InsufficientData { .. }
                | CoreError::AllRowsRejected { .. }
                | CoreError::MissingDeadline(_) => StatusCode::UNPROCESSABLE_ENTITY,
                CoreError::GridTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
                CoreError::Io(_)
                | CoreError::Json(_)
                | CoreError::CorruptModel(_)
                | CoreError::VersionMismatch { .. }
                | CoreError::UntrainedModel
                | CoreError::EmptyNode => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::UnknownModel(_) => "unknown_model",
            ServiceError::NoRoute(_) => "not_found",
            ServiceError::OffGrid { .. } => "off_grid",
            ServiceError::Persistence(_) => "persistence_failed",
            ServiceError::Internal(_) => "internal",
            ServiceError::Core(e) => match e {
                CoreError::UnknownFeature(_) => "unknown_feature",
                CoreError::ImmutableFeature(_) => "immutable_feature",
                CoreError::FromValueMismatch { .. } => "from_value_mismatch",
                CoreError::OffGrid { .. } => "off_grid",
                CoreError::InvalidValue { .. } => "invalid_value",
                CoreError::InvalidGrid(_) => "invalid_grid",
                CoreError::InvalidPolicy(_) => "invalid_policy",
                CoreError::InvalidTask(_) => "invalid_task",
                CoreError::FileNotFound(_) => "file_not_found",
                CoreError::UnknownFormat(_) => "unknown_format",
                CoreError::AllRowsRejected { .. } => "all_rows_rejected",
                CoreError::MissingDeadline(_) => "missing_deadline",
                CoreError::InvalidDeadlinePolicy(_) => "invalid_deadline_policy",
                CoreError::InvalidFraction(_) => "invalid_fraction",
                CoreError::EmptyNode => "empty_node",
                CoreError::SingleClass => "single_class",
                CoreError::InsufficientData { .. } => "insufficient_data",
                CoreError::InvalidHyperparams(_) => "invalid_hyperparams",
                CoreError::DimensionMismatch { .. } => "dimension_mismatch",
                CoreError::VersionMismatch { .. } => "version_mismatch",
                CoreError::CorruptModel(_) => "corrupt_model",
                CoreError::UntrainedModel => "untrained_model",
                CoreError::GridTooLarge { .. } => "grid_too_large",
                CoreError::Io(_) => "io",
                CoreError::Json(_) => "json",
            },
        }
    }

    /// Attaches a snapped suggestion to off-grid errors about `task`.
    pub fn with_task(err: CoreError, task: &TaskSpec, grid: &cfsched::AllocationGrid) -> ServiceError {
        if matches!(err, CoreError::OffGrid { .. }) {
            let mut snapped = task.clone();
            snapped.config = task.config.snapped(grid);
            ServiceError::OffGrid {
                source: err,
                suggestion: Some(Box::new(snapped)),
            }
        } else {
            err.into()
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let mut body = json!({ "code": self.code(), "message": self.to_string() });
        if let ServiceError::OffGrid { source, suggestion } = &self {
            if let CoreError::OffGrid { feature, value, nearest } = source {
                body["feature"] = json!(feature);
                body["value"] = json!(value);
                body["nearest"] = json!(nearest);
            }
            if let Some(task) = suggestion {
                body["suggestion"] = json!(task);
            }
        }
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, axum::Json(body)).into_response()
    }
}
