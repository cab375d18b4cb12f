use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use nebula_core::{FeatureError, LayoutError, StoreError, SubgraphError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot open store {path}: {source}")]
    Store { path: PathBuf, source: StoreError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Body of every error response and stream error message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn unknown_dataset(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_dataset", format!("no dataset {id:?}"))
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}"))
    }

    pub fn empty_selection() -> Self {
        Self::new(
            StatusCode::BAD_REQUEST,
            "empty_selection",
            "selection resolved to no nodes",
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.to_owned(),
            message: self.message.clone(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NodeOutOfRange { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_node", e.to_string())
            }
            other => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "store_error",
                other.to_string(),
            ),
        }
    }
}

impl From<FeatureError> for ApiError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Store(s) => s.into(),
            FeatureError::MissingSidecar { .. } | FeatureError::InvalidName(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_feature", e.to_string())
            }
            other => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "feature_error",
                other.to_string(),
            ),
        }
    }
}

impl From<SubgraphError> for ApiError {
    fn from(e: SubgraphError) -> Self {
        let msg = e.to_string();
        match e {
            SubgraphError::Store(s) => s.into(),
            SubgraphError::Feature(f) => f.into(),
            SubgraphError::CapTooSmall { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "cap_too_small", msg)
            }
            SubgraphError::KTooLarge { .. } | SubgraphError::ZeroK => {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_k", msg)
            }
            SubgraphError::UnknownExternalId(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_node", msg)
            }
        }
    }
}

impl From<LayoutError> for ApiError {
    fn from(e: LayoutError) -> Self {
        let msg = e.to_string();
        match e {
            LayoutError::IndexOutOfRange { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_index", msg)
            }
            LayoutError::NonFinite => ApiError::new(StatusCode::BAD_REQUEST, "invalid_position", msg),
            LayoutError::Area(..) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_area", msg),
            LayoutError::Empty => ApiError::empty_selection(),
            LayoutError::SizeMismatch { .. } | LayoutError::BadEdge(..) => ApiError::internal(msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_codes() {
        let cases: Vec<(ApiError, &str, StatusCode)> = vec![
            (SubgraphError::CapTooSmall { cap: 0, seeds: 1 }.into(), "cap_too_small", StatusCode::BAD_REQUEST),
            (SubgraphError::ZeroK.into(), "invalid_k", StatusCode::BAD_REQUEST),
            (SubgraphError::UnknownExternalId("x".into()).into(), "unknown_node", StatusCode::NOT_FOUND),
            (FeatureError::InvalidName("a/b".into()).into(), "unknown_feature", StatusCode::NOT_FOUND),
            (LayoutError::IndexOutOfRange { index: 3, len: 1 }.into(), "invalid_index", StatusCode::BAD_REQUEST),
            (LayoutError::Empty.into(), "empty_selection", StatusCode::BAD_REQUEST),
            (ApiError::unknown_dataset("x"), "unknown_dataset", StatusCode::NOT_FOUND),
        ];
        for (err, code, status) in cases {
            assert_eq!(err.code, code);
            assert_eq!(err.status, status);
        }
    }
}
