use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use cmab_core::{BanditError, EngineError};

/// Machine-readable error codes. Published codes never change meaning.
pub mod codes {
    pub const INVALID_REQUEST: &str = "invalid_request";
    pub const INVALID_RATING: &str = "invalid_rating";
    pub const UNKNOWN_CONTEXT: &str = "unknown_context";
    pub const UNKNOWN_SESSION: &str = "unknown_session";
    pub const UNKNOWN_USER: &str = "unknown_user";
    pub const UNKNOWN_INTERVENTION: &str = "unknown_intervention";
    pub const SESSION_ALREADY_OPEN: &str = "session_already_open";
    pub const CHOICE_NOT_OFFERED: &str = "choice_not_offered";
    pub const CHOICE_ALREADY_MADE: &str = "choice_already_made";
    pub const NO_CHOICE_YET: &str = "no_choice_yet";
    pub const STORAGE_ERROR: &str = "storage_error";
    pub const INTERNAL_ERROR: &str = "internal_error";

    pub const ALL: [&str; 12] = [
        INVALID_REQUEST,
        INVALID_RATING,
        UNKNOWN_CONTEXT,
        UNKNOWN_SESSION,
        UNKNOWN_USER,
        UNKNOWN_INTERVENTION,
        SESSION_ALREADY_OPEN,
        CHOICE_NOT_OFFERED,
        CHOICE_ALREADY_MADE,
        NO_CHOICE_YET,
        STORAGE_ERROR,
        INTERNAL_ERROR,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, codes::INVALID_REQUEST, message)
    }

    pub fn invalid_rating(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, codes::INVALID_RATING, message)
    }

    pub fn unknown_user(user: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, codes::UNKNOWN_USER, format!("unknown user {user:?}"))
    }
}

impl From<EngineError> for ApiError {
    fn from(err: EngineError) -> Self {
        use StatusCode as S;
        let (status, code) = match &err {
            EngineError::UnknownContext(_) => (S::BAD_REQUEST, codes::UNKNOWN_CONTEXT),
            EngineError::SessionAlreadyOpen(_) => (S::CONFLICT, codes::SESSION_ALREADY_OPEN),
            EngineError::UnknownSession(_) => (S::NOT_FOUND, codes::UNKNOWN_SESSION),
            EngineError::ChoiceNotOffered(_) => (S::UNPROCESSABLE_ENTITY, codes::CHOICE_NOT_OFFERED),
            EngineError::ChoiceAlreadyMade => (S::CONFLICT, codes::CHOICE_ALREADY_MADE),
            EngineError::NoChoiceYet => (S::CONFLICT, codes::NO_CHOICE_YET),
            EngineError::Bandit(BanditError::RatingOutOfRange(_)) => (S::UNPROCESSABLE_ENTITY, codes::INVALID_RATING),
            EngineError::Bandit(BanditError::UnknownArm(_)) => (S::UNPROCESSABLE_ENTITY, codes::UNKNOWN_INTERVENTION),
            EngineError::Persist(_) => (S::INTERNAL_SERVER_ERROR, codes::STORAGE_ERROR),
            EngineError::Apply(_) => (S::INTERNAL_SERVER_ERROR, codes::INTERNAL_ERROR),
        };
        Self::new(status, code, err.to_string())
    }
}

impl From<BanditError> for ApiError {
    fn from(err: BanditError) -> Self {
        EngineError::from(err).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        (self.status, Json(Body { code: self.code, message: &self.message })).into_response()
    }
}
