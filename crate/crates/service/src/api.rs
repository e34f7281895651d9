//! The `/v1` HTTP API. Request and response bodies are JSON; responses are
//! written in canonical form so clients can hash what they receive.

use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Multipart, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{async_trait, Router};
use serde::{Deserialize, Serialize};

use careledger_core::careflow::motion::MotionCapture;
use careledger_core::careflow::{CareError, Careflow, RequestDocument};
use careledger_core::contract::{Decision, DoseRequestRecord, DoseStatus, FileKind, IntegrityReport, Role, UserRecord};
use careledger_core::crypto::{KeyPair, Signature};
use careledger_core::ledger::TxId;
use careledger_core::{canonical, ContentHash};

use crate::config::NodeConfig;
use crate::error::ApiError;
use crate::session::{Challenge, Session, SessionError, SessionInfo, SessionStore};

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    flow: Careflow,
    sessions: SessionStore,
    config: NodeConfig,
}

impl AppState {
    pub fn new(flow: Careflow, config: NodeConfig) -> AppState {
        let sessions = SessionStore::new(config.session_ttl_ms, config.challenge_ttl_ms);
        AppState(Arc::new(Inner { flow, sessions, config }))
    }

    pub fn flow(&self) -> &Careflow {
        &self.0.flow
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.0.sessions
    }

    pub fn config(&self) -> &NodeConfig {
        &self.0.config
    }

    /// Runs ledger and crypto work off the async executor.
    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Careflow) -> Result<T, CareError> + Send + 'static,
    {
        let st = self.clone();
        tokio::task::spawn_blocking(move || f(st.flow())).await.map_err(|e| ApiError::internal(e.to_string()))?.map_err(ApiError::from)
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_bytes;
    let v1 = Router::new()
        .route("/register", post(register))
        .route("/pending", get(pending))
        .route("/pending/:id/approve", post(approve))
        .route("/login/challenge", post(login_challenge))
        .route("/login/respond", post(login_respond))
        .route("/logout", post(logout))
        .route("/physicians", get(physicians))
        .route("/files", post(upload))
        .route("/files/:hash", get(fetch))
        .route("/files/:hash/share", post(share))
        .route("/files/:hash/revoke", post(revoke))
        .route("/files/:hash/integrity", get(integrity))
        .route("/motion", post(motion))
        .route("/dose-requests", get(list_dose_requests).post(create_dose_request))
        .route("/dose-requests/:id", get(dose_request))
        .route("/dose-requests/:id/prescribe", post(prescribe))
        .route("/emergency", post(emergency))
        .route("/emergency/:id/decide", post(decide))
        .route("/chain/verify", get(chain_verify));
    Router::new().nest("/v1", v1).layer(DefaultBodyLimit::max(limit)).with_state(state)
}

pub fn canonical_json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match canonical::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn ok<T: Serialize>(body: &T) -> Response {
    canonical_json(StatusCode::OK, body)
}

fn created<T: Serialize>(body: &T) -> Response {
    canonical_json(StatusCode::CREATED, body)
}

/// The logged-in caller, from `Authorization: Bearer <token>`.
pub struct Auth(pub Session);

#[async_trait]
impl FromRequestParts<AppState> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(SessionError::MissingToken)?;
        Ok(Auth(state.sessions().get(token.trim())?))
    }
}

impl Auth {
    fn require(&self, role: Role) -> Result<(), ApiError> {
        if self.0.role == role {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("requires a {} session", role.as_str())))
        }
    }

    fn keys(&self) -> KeyPair {
        self.0.keys().clone()
    }
}

fn parse_hash(s: &str) -> Result<ContentHash, ApiError> {
    ContentHash::from_str(s).map_err(|e| ApiError::bad_request(format!("bad content hash: {e}")))
}

fn parse_tx(s: &str) -> Result<TxId, ApiError> {
    TxId::from_str(s).map_err(|e| ApiError::bad_request(format!("bad request id: {e}")))
}

fn json_body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("bad JSON body: {e}")))
}

// ---- registration and login ----

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterBody {
    pub user_id: String,
    pub role: Role,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub bound_patient: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TxReceipt {
    pub tx_id: TxId,
    pub height: u64,
}

async fn register(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let b: RegisterBody = json_body(&body)?;
    let display = b.display_name.clone().unwrap_or_else(|| b.user_id.clone());
    let user_id = b.user_id.clone();
    let r = st.run(move |f| f.request_registration(&b.user_id, b.role, &display, b.bound_patient.as_deref())).await?;
    #[derive(Serialize)]
    struct Out {
        pending_id: String,
        tx_id: TxId,
        height: u64,
    }
    Ok(created(&Out { pending_id: user_id, tx_id: r.tx_id, height: r.height }))
}

async fn pending(State(st): State<AppState>, auth: Auth) -> Result<Response, ApiError> {
    auth.require(Role::Admin)?;
    let state = st.flow().state();
    let list: Vec<&UserRecord> = state.pending();
    Ok(ok(&list))
}

/// The only response that ever carries private keys.
async fn approve(State(st): State<AppState>, auth: Auth, Path(id): Path<String>) -> Result<Response, ApiError> {
    auth.require(Role::Admin)?;
    let admin = auth.keys();
    let keys = st.run(move |f| f.approve_registration(&admin, &id)).await?;
    let mut resp = ok(&keys);
    resp.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    Ok(resp)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChallengeBody {
    pub user_id: String,
}

async fn login_challenge(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let b: ChallengeBody = json_body(&body)?;
    let c: Challenge = st.sessions().challenge(&st.flow().state(), &b.user_id)?;
    Ok(ok(&c))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RespondBody {
    pub user_id: String,
    pub nonce: String,
    pub signature: Signature,
    pub keys: KeyPair,
}

async fn login_respond(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let b: RespondBody = json_body(&body)?;
    let info: SessionInfo = st.sessions().respond(&st.flow().state(), &b.user_id, &b.nonce, &b.signature, b.keys)?;
    Ok(ok(&info))
}

async fn logout(State(st): State<AppState>, auth: Auth) -> Result<Response, ApiError> {
    st.sessions().end(&auth.0.token);
    Ok(StatusCode::NO_CONTENT.into_response())
}

// ---- files ----

#[derive(Debug, Serialize, Deserialize)]
pub struct PhysicianEntry {
    pub user_id: String,
    pub display_name: String,
}

async fn physicians(State(st): State<AppState>, _auth: Auth) -> Result<Response, ApiError> {
    let state = st.flow().state();
    let list: Vec<PhysicianEntry> =
        state.list_physicians().into_iter().map(|u| PhysicianEntry { user_id: u.user_id.clone(), display_name: u.display_name.clone() }).collect();
    Ok(ok(&list))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HashBody {
    pub content_hash: ContentHash,
}

/// Multipart fields: `kind`, optional `owner` (defaults to the caller) and
/// `bytes` (or `file`).
async fn upload(State(st): State<AppState>, auth: Auth, mut mp: Multipart) -> Result<Response, ApiError> {
    let (mut kind, mut owner, mut bytes) = (None, None, None);
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(e.to_string());
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        match field.name() {
            Some("kind") => kind = Some(field.text().await.map_err(bad)?),
            Some("owner") => owner = Some(field.text().await.map_err(bad)?),
            Some("bytes") | Some("file") => bytes = Some(field.bytes().await.map_err(bad)?),
            _ => {}
        }
    }
    let kind = FileKind::from_str(kind.as_deref().ok_or_else(|| ApiError::bad_request("missing field kind"))?.trim())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("missing field bytes"))?;
    let owner = owner.map(|o| o.trim().to_string()).filter(|o| !o.is_empty()).unwrap_or_else(|| auth.0.user_id.clone());
    let keys = auth.keys();
    let h = st.run(move |f| f.upload_file(&keys, &bytes, kind, &owner)).await?;
    Ok(created(&HashBody { content_hash: h }))
}

async fn fetch(State(st): State<AppState>, auth: Auth, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let h = parse_hash(&hash)?;
    let keys = auth.keys();
    let body = st.run(move |f| f.fetch_file(&keys, &h)).await?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "application/octet-stream")], body).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GranteeBody {
    pub grantee: String,
}

async fn share(State(st): State<AppState>, auth: Auth, Path(hash): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let h = parse_hash(&hash)?;
    let b: GranteeBody = json_body(&body)?;
    let keys = auth.keys();
    let r = st.run(move |f| f.share_file(&keys, &h, &b.grantee)).await?;
    Ok(ok(&r))
}

async fn revoke(State(st): State<AppState>, auth: Auth, Path(hash): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let h = parse_hash(&hash)?;
    let b: GranteeBody = json_body(&body)?;
    let keys = auth.keys();
    let r = st.run(move |f| f.revoke_file(&keys, &h, &b.grantee)).await?;
    Ok(ok(&TxReceipt { tx_id: r.tx_id, height: r.height }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IntegrityBody {
    pub content_hash: ContentHash,
    #[serde(flatten)]
    pub report: IntegrityReport,
    pub complete: bool,
    pub message: String,
}

async fn integrity(State(st): State<AppState>, auth: Auth, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let h = parse_hash(&hash)?;
    let keys = auth.keys();
    let report = st.run(move |f| f.check_integrity(&keys, &h)).await?;
    Ok(ok(&IntegrityBody { content_hash: h, report, complete: report.is_complete(), message: report.message().into() }))
}

/// Body: a motion file in the canonical motion format.
async fn motion(State(st): State<AppState>, auth: Auth, body: Bytes) -> Result<Response, ApiError> {
    auth.require(Role::IotDevice)?;
    let mc = MotionCapture::parse(&body).map_err(|e| ApiError::from(CareError::Validation(e)))?;
    let keys = auth.keys();
    let h = st.run(move |f| f.ingest_motion(&keys, &mc)).await?;
    Ok(created(&HashBody { content_hash: h }))
}

// ---- dose requests ----

#[derive(Debug, Deserialize)]
struct PatientQuery {
    patient: Option<String>,
}

/// Patients see their own requests, physicians those of patients in their
/// care, nurses the open emergencies.
async fn list_dose_requests(State(st): State<AppState>, auth: Auth, Query(q): Query<PatientQuery>) -> Result<Response, ApiError> {
    let state = st.flow().state();
    let me = auth.0.user_id.as_str();
    let keep: Box<dyn Fn(&DoseRequestRecord) -> bool> = match auth.0.role {
        Role::Patient => {
            if q.patient.as_deref().is_some_and(|p| p != me) {
                return Err(ApiError::forbidden("patients may only list their own requests"));
            }
            Box::new(|r| r.patient == me)
        }
        Role::Physician => {
            if let Some(p) = q.patient.as_deref() {
                if !state.has_care_relationship(me, p) {
                    return Err(ApiError::forbidden(format!("no care relationship with patient {p}")));
                }
            }
            Box::new(|r| state.has_care_relationship(me, &r.patient))
        }
        Role::Nurse => Box::new(|r| r.status == DoseStatus::EmergencyPending),
        _ => return Err(ApiError::forbidden("no dose-request access for this role")),
    };
    let mut list: Vec<&DoseRequestRecord> =
        state.dose_requests.values().filter(|r| q.patient.as_deref().map_or(true, |p| r.patient == p)).filter(|r| keep(r)).collect();
    list.sort_by_key(|r| (r.created_at_ms, r.request_id));
    Ok(ok(&list))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DoseRequestBody {
    pub motion_file: ContentHash,
}

async fn create_dose_request(State(st): State<AppState>, auth: Auth, body: Bytes) -> Result<Response, ApiError> {
    auth.require(Role::Patient)?;
    let b: DoseRequestBody = json_body(&body)?;
    let keys = auth.keys();
    let ticket = st.run(move |f| f.request_dose(&keys, &b.motion_file)).await?;
    Ok(created(&ticket))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DoseRequestView {
    pub record: DoseRequestRecord,
    pub document: RequestDocument,
}

async fn dose_request(State(st): State<AppState>, auth: Auth, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = parse_tx(&id)?;
    let record = st.flow().state().dose_request(&id)?.clone();
    let keys = auth.keys();
    let rec = record.clone();
    let document = st.run(move |f| f.read_request(&keys, &rec)).await?;
    Ok(ok(&DoseRequestView { record, document }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrescribeBody {
    pub dose_mg: u64,
    pub decision: Decision,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrescriptionOut {
    pub request_id: TxId,
    pub prescription_file: ContentHash,
    pub status: DoseStatus,
}

async fn prescribe(State(st): State<AppState>, auth: Auth, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    auth.require(Role::Physician)?;
    let id = parse_tx(&id)?;
    let b: PrescribeBody = json_body(&body)?;
    let keys = auth.keys();
    let file = st.run(move |f| f.prescribe(&keys, &id, b.dose_mg, b.decision)).await?;
    let status = st.flow().state().dose_request(&id)?.status;
    Ok(created(&PrescriptionOut { request_id: id, prescription_file: file, status }))
}

// ---- emergencies ----

#[derive(Debug, Serialize, Deserialize)]
pub struct EmergencyOut {
    pub request_id: TxId,
    pub status: DoseStatus,
    /// Set when a nurse may decide; absent when routed to the physician.
    pub cap_mg: Option<u64>,
    pub message: String,
}

async fn emergency(State(st): State<AppState>, auth: Auth) -> Result<Response, ApiError> {
    auth.require(Role::Patient)?;
    let keys = auth.keys();
    let st2 = st.clone();
    let res = tokio::task::spawn_blocking(move || st2.flow().emergency_request(&keys)).await.map_err(|e| ApiError::internal(e.to_string()))?;
    match res {
        Ok(t) => Ok(created(&EmergencyOut {
            request_id: t.request_id,
            status: DoseStatus::EmergencyPending,
            cap_mg: Some(t.cap_mg),
            message: format!("emergency request open; nurses may approve up to {} mg", t.cap_mg),
        })),
        // Recorded, but there is nothing to cap a nurse's dose with.
        Err(e @ CareError::NoCap { .. }) => {
            let CareError::NoCap { request } = &e else { unreachable!() };
            let out = EmergencyOut { request_id: *request, status: DoseStatus::PendingPhysician, cap_mg: None, message: e.to_string() };
            Ok(canonical_json(StatusCode::ACCEPTED, &out))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecideBody {
    pub approve: bool,
    #[serde(default)]
    pub dose_mg: u64,
}

async fn decide(State(st): State<AppState>, auth: Auth, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    auth.require(Role::Nurse)?;
    let id = parse_tx(&id)?;
    let b: DecideBody = json_body(&body)?;
    let keys = auth.keys();
    let out = st.run(move |f| f.emergency_decide(&keys, &id, b.approve, b.dose_mg)).await?;
    Ok(ok(&out))
}

// ---- chain ----

async fn chain_verify(State(st): State<AppState>) -> Result<Response, ApiError> {
    let node = st.flow().node().clone();
    let report = tokio::task::spawn_blocking(move || {
        // Re-read what is on disk rather than trusting memory.
        std::fs::read(node.chain_path()).map(|b| careledger_core::ledger::verify_log_bytes(&b))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(ok(&report))
}
