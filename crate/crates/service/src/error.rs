use thiserror::Error;

/// Service-level failures, mapped onto HTTP status codes by the API layer.
#[derive(Debug, Error)]
pub enum ServiceError {
    /// Unknown task, job, or record. HTTP 404.
    #[error("{0}")]
    NotFound(String),
    /// The request is valid JSON but collides with existing state
    /// (duplicate ids, job already running). HTTP 409.
    #[error("{0}")]
    Conflict(String),
    /// The request itself is malformed or inconsistent. HTTP 400.
    #[error("{0}")]
    Invalid(String),
    /// Journal, filesystem, or artifact trouble. HTTP 500.
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    /// Stable machine-readable discriminator used in the error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Internal(_) => "internal",
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
