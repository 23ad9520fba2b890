use std::path::{Path, PathBuf};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use demandforge::counts::CountsError;
use demandforge::emit::EmitError;
use demandforge::flowcount::FlowError;
use demandforge::netgraph::NetworkError;
use demandforge::qipsolve::SolveError;
use demandforge::refine::RefineError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Counts(#[from] CountsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ApiError + '_ {
        move |source| ApiError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable error code.
    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Config(_) => "config",
            ApiError::Io { .. } => "io",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Network(_) => "network",
            ApiError::Counts(_) => "counts",
            ApiError::Flow(_) => "flowcount",
            ApiError::Solve(SolveError::Infeasible(_)) => "infeasible",
            ApiError::Solve(_) => "solve",
            ApiError::Refine(e) => match e {
                RefineError::Syntactic(_) | RefineError::UnknownLocation(_) => "syntactic",
                RefineError::Infeasible(_) => "infeasible",
                RefineError::SemanticMismatch => "semantic",
                RefineError::InvalidFeedback(_) => "invalid_feedback",
                RefineError::Timeout(_) => "timeout",
                RefineError::Client(_) | RefineError::ScriptExhausted => "client",
                RefineError::AttemptsExhausted { .. } => "rejected",
                RefineError::MissingSolution(_) | RefineError::Solve(_) => "solve",
            },
            ApiError::Emit(_) => "emit",
            ApiError::Json(_) => "json",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.kind() {
            "bad_request" | "invalid_feedback" | "json" => StatusCode::BAD_REQUEST,
            "syntactic" | "infeasible" | "semantic" | "rejected" => StatusCode::UNPROCESSABLE_ENTITY,
            "timeout" => StatusCode::GATEWAY_TIMEOUT,
            "client" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": self.kind(), "detail": self.to_string() })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.to_json())).into_response()
    }
}
