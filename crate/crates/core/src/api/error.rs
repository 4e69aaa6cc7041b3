use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::directory::ContactError;
use crate::dispatch::DispatchError;
use crate::ping::PingError;
use crate::questionnaire::QuestionnaireError;
use crate::store::StoreError;
use crate::tox::ToxError;

/// Seconds a client should wait before retrying a 503.
const RETRY_AFTER_SECS: u32 = 5;

/// Error body returned by every endpoint: `{"code": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
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

    pub fn unauthenticated() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing or invalid bearer token")
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        }
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<ToxError> for ApiError {
    fn from(e: ToxError) -> Self {
        let msg = e.to_string();
        match e {
            ToxError::EmptyInput => Self::unprocessable("empty_input", msg),
            ToxError::TextTooLong { .. } => Self::unprocessable("text_too_long", msg),
            ToxError::ScorerUnavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "scorer_unavailable", msg),
            ToxError::ProtocolError(_) => Self::new(StatusCode::BAD_GATEWAY, "protocol_error", msg),
            ToxError::ExtractionFailed(_) => Self::new(StatusCode::BAD_GATEWAY, "extraction_failed", msg),
            ToxError::InvalidConfig(_) => Self::internal(msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound { .. } => Self::not_found(msg),
            StoreError::VersionConflict { .. } => Self::new(StatusCode::CONFLICT, "conflict", msg),
            StoreError::Unavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable", msg),
            StoreError::Malformed(_) => Self::internal(msg),
        }
    }
}

impl From<PingError> for ApiError {
    fn from(e: PingError) -> Self {
        let msg = e.to_string();
        match e {
            PingError::IntervalTooShort { .. } => Self::unprocessable("interval_too_short", msg),
            PingError::NoEmergencyContacts => Self::unprocessable("no_emergency_contacts", msg),
            PingError::NotFound(_) | PingError::UnknownUser => Self::not_found(msg),
            PingError::InvalidState { .. } => Self::new(StatusCode::CONFLICT, "invalid_state", msg),
            PingError::InvalidLocation(_) => Self::unprocessable("invalid_location", msg),
            PingError::NoteTooLong(_) => Self::unprocessable("note_too_long", msg),
            PingError::Store(e) => e.into(),
        }
    }
}

impl From<ContactError> for ApiError {
    fn from(e: ContactError) -> Self {
        let msg = e.to_string();
        match e {
            ContactError::TooMany(_) => Self::unprocessable("too_many_contacts", msg),
            ContactError::InvalidEmail(_) => Self::unprocessable("invalid_email", msg),
            ContactError::DuplicatePriority(_) => Self::unprocessable("duplicate_priority", msg),
            ContactError::EmptyName => Self::unprocessable("invalid_contact", msg),
            ContactError::UnknownUser => Self::not_found(msg),
            ContactError::Store(e) => e.into(),
        }
    }
}

impl From<QuestionnaireError> for ApiError {
    fn from(e: QuestionnaireError) -> Self {
        let msg = e.to_string();
        match e {
            QuestionnaireError::NotFound(_) => Self::not_found(msg),
            QuestionnaireError::IncompleteResponses { .. } => Self::unprocessable("incomplete_responses", msg),
            QuestionnaireError::VersionMismatch { .. } => Self::unprocessable("version_mismatch", msg),
            QuestionnaireError::InvalidAnswer { .. } => Self::unprocessable("invalid_answer", msg),
            QuestionnaireError::Io(_) | QuestionnaireError::Parse(_) | QuestionnaireError::Validation(_) => {
                Self::internal(msg)
            }
        }
    }
}

impl From<DispatchError> for ApiError {
    fn from(e: DispatchError) -> Self {
        match e {
            DispatchError::NoEmergencyContacts => Self::unprocessable("no_emergency_contacts", e.to_string()),
            DispatchError::Store(e) => e.into(),
        }
    }
}

/// Every machine code the API can return, with its status. Frozen: clients
/// match on these strings.
pub const ERROR_CODES: &[(&str, u16)] = &[
    ("bad_request", 400),
    ("unauthenticated", 401),
    ("not_found", 404),
    ("conflict", 409),
    ("invalid_state", 409),
    ("payload_too_large", 413),
    ("empty_input", 422),
    ("text_too_long", 422),
    ("interval_too_short", 422),
    ("no_emergency_contacts", 422),
    ("invalid_location", 422),
    ("note_too_long", 422),
    ("too_many_contacts", 422),
    ("invalid_email", 422),
    ("duplicate_priority", 422),
    ("invalid_contact", 422),
    ("incomplete_responses", 422),
    ("version_mismatch", 422),
    ("invalid_answer", 422),
    ("internal", 500),
    ("protocol_error", 502),
    ("extraction_failed", 502),
    ("scorer_unavailable", 503),
    ("storage_unavailable", 503),
];
