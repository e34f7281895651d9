use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;

use careledger_core::careflow::CareError;
use careledger_core::castore::StoreError;
use careledger_core::contract::{ContractError, DenyReason, IntegrityReport};
use careledger_core::node::NodeError;

use crate::api::canonical_json;
use crate::session::SessionError;

/// An error as the API reports it: a status plus a JSON body with a stable
/// `error` code and the human-readable message from the contract.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub reason: Option<DenyReason>,
    pub integrity: Option<IntegrityReport>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'a DenyReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    integrity: Option<&'a IntegrityReport>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into(), reason: None, integrity: None }
    }

    pub fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn forbidden(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    pub fn internal(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code, message: &self.message, reason: self.reason.as_ref(), integrity: self.integrity.as_ref() };
        canonical_json(self.status, &body)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", e.to_string())
    }
}

fn contract_status(e: &ContractError) -> (StatusCode, &'static str) {
    use ContractError::*;
    match e {
        AlreadyRegistered(_) | DuplicatePending(_) | DuplicateHash(_) | BadStatus(_) => (StatusCode::CONFLICT, "conflict"),
        Unauthenticated => (StatusCode::UNAUTHORIZED, "unauthenticated"),
        NotAdmin | NotOwner | NotPermitted(_) | NoCareRelationship(_) | DeviceOwnerMismatch { .. } => (StatusCode::FORBIDDEN, "forbidden"),
        UnknownPending(_) | UnknownFile(_) | UnknownRequest(_) => (StatusCode::NOT_FOUND, "not_found"),
        UnknownGrantee(_) | InvalidGrantee(_) | NoCap(_) | CapExceeded { .. } | InvalidPayload(_) => (StatusCode::UNPROCESSABLE_ENTITY, "rejected"),
    }
}

impl From<ContractError> for ApiError {
    fn from(e: ContractError) -> Self {
        let (status, code) = contract_status(&e);
        ApiError::new(status, code, e.to_string())
    }
}

impl From<CareError> for ApiError {
    fn from(e: CareError) -> Self {
        let message = e.to_string();
        match e {
            CareError::Contract(c) => c.into(),
            CareError::AccessDenied(reason) => {
                ApiError { status: StatusCode::FORBIDDEN, code: "access_denied", message: reason.to_string(), reason: Some(reason), integrity: None }
            }
            CareError::Integrity(report) => {
                ApiError { status: StatusCode::CONFLICT, code: "integrity", message, reason: None, integrity: Some(report) }
            }
            CareError::Validation(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_motion", message),
            CareError::KeyMismatch(_) => ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", message),
            CareError::NothingToConfirm(_) => ApiError::new(StatusCode::CONFLICT, "conflict", message),
            CareError::NoCap { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected", message),
            CareError::Store(StoreError::NotFound(_)) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            CareError::Store(StoreError::CorruptBlob { .. }) => ApiError::new(StatusCode::CONFLICT, "integrity", message),
            CareError::Node(NodeError::Rejected(_)) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected", message),
            CareError::Store(_) | CareError::Crypto(_) | CareError::Document(_) | CareError::Node(_) => ApiError::internal(message),
        }
    }
}
