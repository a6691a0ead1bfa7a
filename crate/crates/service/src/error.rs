use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{message}")]
    Validation {
        message: String,
        fields: Vec<FieldError>,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        let message = message.into();
        ApiError::Validation {
            fields: vec![FieldError {
                path: path.into(),
                message: message.clone(),
            }],
            message,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError::Validation {
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn locked() -> Self {
        ApiError::Conflict("session is locked; only randomize and test are allowed".into())
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Validation { .. } => "validation",
            ApiError::Conflict(_) => "conflict",
            ApiError::NotFound(_) => "not_found",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn body(&self) -> serde_json::Value {
        let fields = match self {
            ApiError::Validation { fields, .. } => fields.clone(),
            _ => Vec::new(),
        };
        serde_json::json!({
            "error": { "code": self.code(), "message": self.to_string(), "fields": fields }
        })
    }

    /// Attach `path` to a core error raised while handling that field.
    pub fn at(path: &str, e: igr_core::Error) -> Self {
        match ApiError::from(e) {
            ApiError::Validation { message, .. } => ApiError::field(path, message),
            other => other,
        }
    }
}

impl From<igr_core::Error> for ApiError {
    fn from(e: igr_core::Error) -> Self {
        use igr_core::Error as E;
        match e {
            E::AlreadyLocked => ApiError::locked(),
            E::NotLocked => ApiError::Conflict(e.to_string()),
            E::Io(_) | E::Bundle(_) | E::DigestMismatch { .. } => ApiError::Internal(e.to_string()),
            _ => ApiError::invalid(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
