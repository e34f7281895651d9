//! The care contract: a deterministic state machine folded over the ledger.
//!
//! [`ContractState::apply`] is the only way state changes. Each transition
//! validates fully before mutating, so a rejected transaction leaves the
//! state untouched.
//!
//! Read access follows this matrix (a wrapped key is always also required):
//!
//! | role       | may read                                                        |
//! |------------|-----------------------------------------------------------------|
//! | patient    | own files, every kind                                           |
//! | physician  | every kind, for patients in a care relationship                 |
//! | nurse      | dose requests and prescriptions, while the patient has an open emergency |
//! | iot_device | nothing                                                         |
//! | admin      | nothing                                                         |
//!
//! A physician is in a care relationship with a patient while holding an
//! unrevoked key, not self-uploaded, to at least one of the patient's files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::castore::ContentHash;
use crate::crypto::{content_hash, Digest, EncPublicKey, SignPublicKey, WrappedKey};
use crate::ledger::{Transaction, TxId, TxPayload, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Physician,
    Nurse,
    IotDevice,
    Admin,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Patient, Role::Physician, Role::Nurse, Role::IotDevice, Role::Admin];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Physician => "physician",
            Role::Nurse => "nurse",
            Role::IotDevice => "iot_device",
            Role::Admin => "admin",
        }
    }

    /// Roles that may receive a file grant.
    pub fn is_clinical_staff(self) -> bool {
        matches!(self, Role::Physician | Role::Nurse)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    MedicalHistory,
    MotionCapture,
    Prescription,
    DoseRequest,
}

impl FileKind {
    pub const ALL: [FileKind; 4] = [FileKind::MedicalHistory, FileKind::MotionCapture, FileKind::Prescription, FileKind::DoseRequest];

    pub fn as_str(self) -> &'static str {
        match self {
            FileKind::MedicalHistory => "medical_history",
            FileKind::MotionCapture => "motion_capture",
            FileKind::Prescription => "prescription",
            FileKind::DoseRequest => "dose_request",
        }
    }
}

impl fmt::Display for FileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FileKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FileKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown file kind {s:?}"))
    }
}

/// How a prescription came about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Confirmed,
    Overridden,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserStatus {
    Pending,
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub role: Role,
    pub display_name: String,
    pub sign_public: Option<SignPublicKey>,
    pub enc_public: Option<EncPublicKey>,
    pub status: UserStatus,
    pub registered_at_ms: u64,
    pub bound_patient: Option<UserId>,
}

impl UserRecord {
    pub fn is_active(&self) -> bool {
        self.status == UserStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub content_hash: ContentHash,
    pub plaintext_hash: Digest,
    pub owner_patient: UserId,
    pub uploader: UserId,
    pub kind: FileKind,
    pub created_at_ms: u64,
    pub wrapped_keys: BTreeMap<UserId, WrappedKey>,
    pub revoked: BTreeSet<UserId>,
}

impl FileRecord {
    pub fn live_key(&self, user: &str) -> Option<&WrappedKey> {
        if self.revoked.contains(user) {
            return None;
        }
        self.wrapped_keys.get(user)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseStatus {
    PendingPhysician,
    AutoApproved,
    PhysicianConfirmed,
    PhysicianOverridden,
    EmergencyPending,
    EmergencyDecided,
}

impl DoseStatus {
    /// Statuses whose dose counts as approved history.
    pub fn is_approved(self) -> bool {
        matches!(self, DoseStatus::AutoApproved | DoseStatus::PhysicianConfirmed | DoseStatus::PhysicianOverridden)
    }
}

impl fmt::Display for DoseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOrigin {
    DecisionSupport,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseRequestRecord {
    pub request_id: TxId,
    pub patient: UserId,
    pub origin: RequestOrigin,
    pub request_file: ContentHash,
    pub created_at_ms: u64,
    pub status: DoseStatus,
    pub decided_dose_mg: Option<u64>,
    pub decided_by: Option<UserId>,
    pub prescription_file: Option<ContentHash>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractState {
    pub users: BTreeMap<UserId, UserRecord>,
    pub pending_registrations: Vec<UserId>,
    pub files: BTreeMap<ContentHash, FileRecord>,
    pub dose_requests: BTreeMap<TxId, DoseRequestRecord>,
    pub last_approved_dose: BTreeMap<UserId, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContractError {
    #[error("user {0} is already registered")]
    AlreadyRegistered(UserId),
    #[error("user {0} already has a pending registration")]
    DuplicatePending(UserId),
    #[error("only the admin may do this")]
    NotAdmin,
    #[error("no pending registration for {0}")]
    UnknownPending(UserId),
    #[error("User is not authenticated")]
    Unauthenticated,
    #[error("file {0} is already recorded")]
    DuplicateHash(ContentHash),
    #[error("device is bound to {bound}, not {owner}")]
    DeviceOwnerMismatch { bound: UserId, owner: UserId },
    #[error("only the owning patient may do this")]
    NotOwner,
    #[error("unknown file {0}")]
    UnknownFile(ContentHash),
    #[error("unknown or inactive grantee {0}")]
    UnknownGrantee(UserId),
    #[error("{0} cannot hold file keys")]
    InvalidGrantee(UserId),
    #[error("not permitted: {0}")]
    NotPermitted(String),
    #[error("no care relationship with patient {0}")]
    NoCareRelationship(UserId),
    #[error("unknown dose request {0}")]
    UnknownRequest(TxId),
    #[error("dose request is {0}")]
    BadStatus(DoseStatus),
    #[error("patient {0} has no approved dose to cap an emergency dose")]
    NoCap(UserId),
    #[error("dose {requested} mg exceeds the cap of {cap} mg")]
    CapExceeded { requested: u64, cap: u64 },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

/// Why a fetch was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum DenyReason {
    UnknownUser,
    NotAuthenticated,
    UnknownFile,
    AdminHasNoFileAccess,
    DeviceCannotRead,
    NotOwner,
    NoCareRelationship,
    KindNotVisibleToNurse(FileKind),
    NoOpenEmergency,
    NoKey,
    Revoked,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::UnknownUser => f.write_str("User is not valid and cannot access file"),
            DenyReason::NotAuthenticated => f.write_str("User is not authenticated"),
            DenyReason::UnknownFile => f.write_str("unknown file"),
            DenyReason::AdminHasNoFileAccess => f.write_str("admin has no file access"),
            DenyReason::DeviceCannotRead => f.write_str("devices cannot read files"),
            DenyReason::NotOwner => f.write_str("patients may only read their own files"),
            DenyReason::NoCareRelationship => f.write_str("no care relationship with the patient"),
            DenyReason::KindNotVisibleToNurse(kind) => write!(f, "nurse access level excludes {kind} files"),
            DenyReason::NoOpenEmergency => f.write_str("patient has no open emergency request"),
            DenyReason::NoKey => f.write_str("no key was shared with this user"),
            DenyReason::Revoked => f.write_str("access was revoked"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Access {
    Allow { wrapped_key: WrappedKey },
    Deny { reason: DenyReason },
}

impl Access {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Access::Allow { .. })
    }
}

/// The two independent integrity checks run on a fetched file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    /// Fetched ciphertext still hashes to its recorded address.
    pub store_level: bool,
    /// Decrypted plaintext hashes to the recorded plaintext hash, when checked.
    pub end_to_end: Option<bool>,
}

impl IntegrityReport {
    pub fn is_complete(&self) -> bool {
        self.store_level && self.end_to_end.unwrap_or(true)
    }

    pub fn message(&self) -> &'static str {
        if self.is_complete() {
            "Integrity completed"
        } else {
            "Integrity does not complete"
        }
    }
}

fn invalid(msg: impl Into<String>) -> ContractError {
    ContractError::InvalidPayload(msg.into())
}

impl ContractState {
    /// The active record for `user_id`, or `Unauthenticated`.
    pub fn active_user(&self, user_id: &str) -> Result<&UserRecord, ContractError> {
        match self.users.get(user_id) {
            Some(u) if u.is_active() => Ok(u),
            _ => Err(ContractError::Unauthenticated),
        }
    }

    pub fn file(&self, hash: &ContentHash) -> Result<&FileRecord, ContractError> {
        self.files.get(hash).ok_or(ContractError::UnknownFile(*hash))
    }

    pub fn dose_request(&self, id: &TxId) -> Result<&DoseRequestRecord, ContractError> {
        self.dose_requests.get(id).ok_or(ContractError::UnknownRequest(*id))
    }

    /// Active physicians, sorted by id.
    pub fn list_physicians(&self) -> Vec<&UserRecord> {
        self.users.values().filter(|u| u.role == Role::Physician && u.is_active()).collect()
    }

    pub fn pending(&self) -> Vec<&UserRecord> {
        self.pending_registrations.iter().filter_map(|id| self.users.get(id)).collect()
    }

    pub fn has_care_relationship(&self, physician: &str, patient: &str) -> bool {
        self.files
            .values()
            .any(|f| f.owner_patient == patient && f.uploader != physician && f.live_key(physician).is_some())
    }

    /// Physicians currently in a care relationship with `patient`.
    pub fn care_team(&self, patient: &str) -> Vec<&UserRecord> {
        self.list_physicians().into_iter().filter(|p| self.has_care_relationship(&p.user_id, patient)).collect()
    }

    pub fn has_open_emergency(&self, patient: &str) -> bool {
        self.dose_requests.values().any(|r| r.patient == patient && r.status == DoseStatus::EmergencyPending)
    }

    /// Whether `user` may write a file of `kind` owned by `owner`.
    pub fn check_write(&self, user: &str, kind: FileKind, owner: &str) -> Result<&UserRecord, ContractError> {
        let uploader = self.active_user(user)?;
        let owner_rec = self.users.get(owner).filter(|u| u.is_active() && u.role == Role::Patient);
        match uploader.role {
            Role::Patient if owner == user => {}
            Role::Patient => return Err(ContractError::NotOwner),
            Role::Physician => {
                if kind != FileKind::Prescription {
                    return Err(ContractError::NotPermitted(format!("physicians write prescriptions, not {kind}")));
                }
                if !self.has_care_relationship(user, owner) {
                    return Err(ContractError::NoCareRelationship(owner.to_string()));
                }
            }
            Role::IotDevice => {
                let bound = uploader.bound_patient.clone().unwrap_or_default();
                if bound != owner {
                    return Err(ContractError::DeviceOwnerMismatch { bound, owner: owner.to_string() });
                }
                if kind != FileKind::MotionCapture {
                    return Err(ContractError::NotPermitted(format!("devices write motion captures, not {kind}")));
                }
            }
            Role::Nurse => return Err(ContractError::NotPermitted("nurses do not upload files".into())),
            Role::Admin => return Err(ContractError::NotPermitted("admin does not upload files".into())),
        }
        if owner_rec.is_none() {
            return Err(invalid(format!("owner {owner} is not an active patient")));
        }
        Ok(uploader)
    }

    /// Pure access decision for `user` reading `hash`.
    pub fn authorize_fetch(&self, user: &str, hash: &ContentHash) -> Access {
        let deny = |reason| Access::Deny { reason };
        let Some(rec) = self.users.get(user) else {
            return deny(DenyReason::UnknownUser);
        };
        if !rec.is_active() {
            return deny(DenyReason::NotAuthenticated);
        }
        let Some(file) = self.files.get(hash) else {
            return deny(DenyReason::UnknownFile);
        };
        match rec.role {
            Role::Admin => return deny(DenyReason::AdminHasNoFileAccess),
            Role::IotDevice => return deny(DenyReason::DeviceCannotRead),
            Role::Patient if file.owner_patient != user => return deny(DenyReason::NotOwner),
            Role::Patient => {}
            Role::Physician => {
                if file.uploader != user && !self.has_care_relationship(user, &file.owner_patient) {
                    return deny(if file.revoked.contains(user) { DenyReason::Revoked } else { DenyReason::NoCareRelationship });
                }
            }
            Role::Nurse => {
                if !matches!(file.kind, FileKind::DoseRequest | FileKind::Prescription) {
                    return deny(DenyReason::KindNotVisibleToNurse(file.kind));
                }
                if !self.has_open_emergency(&file.owner_patient) {
                    return deny(DenyReason::NoOpenEmergency);
                }
            }
        }
        if file.revoked.contains(user) {
            return deny(DenyReason::Revoked);
        }
        match file.wrapped_keys.get(user) {
            Some(k) => Access::Allow { wrapped_key: k.clone() },
            None => deny(DenyReason::NoKey),
        }
    }

    /// Recomputes hashes of what was fetched (and optionally decrypted) and
    /// compares them with the recorded ones.
    pub fn check_integrity(&self, hash: &ContentHash, fetched_ciphertext: &[u8], decrypted_plaintext: Option<&[u8]>) -> Result<IntegrityReport, ContractError> {
        let file = self.file(hash)?;
        Ok(IntegrityReport {
            store_level: ContentHash::of(fetched_ciphertext) == file.content_hash,
            end_to_end: decrypted_plaintext.map(|p| content_hash(p) == file.plaintext_hash),
        })
    }

    /// Applies one transaction. Signature checks are the ledger's job; this
    /// enforces roles, ownership and workflow state.
    pub fn apply(&mut self, tx: &Transaction) -> Result<(), ContractError> {
        let author = tx.author.as_str();
        let now = tx.timestamp_ms;
        match &tx.payload {
            TxPayload::RequestRegistration { user_id, role, display_name, bound_patient } => {
                if user_id.is_empty() {
                    return Err(invalid("empty user id"));
                }
                match self.users.get(user_id) {
                    Some(u) if u.is_active() => return Err(ContractError::AlreadyRegistered(user_id.clone())),
                    Some(_) => return Err(ContractError::DuplicatePending(user_id.clone())),
                    None => {}
                }
                if *role == Role::Admin {
                    return Err(ContractError::NotPermitted("admin accounts cannot be requested".into()));
                }
                match (role, bound_patient) {
                    (Role::IotDevice, Some(p)) => {
                        if !self.users.get(p).is_some_and(|u| u.is_active() && u.role == Role::Patient) {
                            return Err(invalid(format!("device bound to unknown patient {p}")));
                        }
                    }
                    (Role::IotDevice, None) => return Err(invalid("devices must be bound to a patient")),
                    (_, Some(_)) => return Err(invalid("only devices carry a bound patient")),
                    (_, None) => {}
                }
                self.users.insert(
                    user_id.clone(),
                    UserRecord {
                        user_id: user_id.clone(),
                        role: *role,
                        display_name: display_name.clone(),
                        sign_public: None,
                        enc_public: None,
                        status: UserStatus::Pending,
                        registered_at_ms: now,
                        bound_patient: bound_patient.clone(),
                    },
                );
                self.pending_registrations.push(user_id.clone());
            }

            TxPayload::RegisterUser { user_id, role, display_name, sign_public, enc_public, bound_patient } => {
                if self.users.is_empty() {
                    if *role != Role::Admin || user_id != author || bound_patient.is_some() {
                        return Err(invalid("first registration must be the admin's own"));
                    }
                    self.users.insert(
                        user_id.clone(),
                        UserRecord {
                            user_id: user_id.clone(),
                            role: Role::Admin,
                            display_name: display_name.clone(),
                            sign_public: Some(sign_public.clone()),
                            enc_public: Some(enc_public.clone()),
                            status: UserStatus::Active,
                            registered_at_ms: now,
                            bound_patient: None,
                        },
                    );
                    return Ok(());
                }
                if self.active_user(author)?.role != Role::Admin {
                    return Err(ContractError::NotAdmin);
                }
                let rec = match self.users.get(user_id) {
                    Some(u) if u.is_active() => return Err(ContractError::AlreadyRegistered(user_id.clone())),
                    Some(u) => u,
                    None => return Err(ContractError::UnknownPending(user_id.clone())),
                };
                if rec.role != *role || rec.display_name != *display_name || rec.bound_patient != *bound_patient {
                    return Err(invalid("approval does not match the pending request"));
                }
                let rec = self.users.get_mut(user_id).expect("checked above");
                rec.sign_public = Some(sign_public.clone());
                rec.enc_public = Some(enc_public.clone());
                rec.status = UserStatus::Active;
                self.pending_registrations.retain(|p| p != user_id);
            }

            TxPayload::StoreFileHash { content_hash, plaintext_hash, kind, owner_patient, wrapped_keys } => {
                let uploader = self.check_write(author, *kind, owner_patient)?;
                let is_device = uploader.role == Role::IotDevice;
                if self.files.contains_key(content_hash) {
                    return Err(ContractError::DuplicateHash(*content_hash));
                }
                if content_hash.digest() == plaintext_hash {
                    return Err(invalid("content hash equals plaintext hash; file was not encrypted"));
                }
                let mut keys = BTreeMap::new();
                for wk in wrapped_keys {
                    let recipient = self.users.get(&wk.recipient_id).filter(|u| u.is_active());
                    let Some(recipient) = recipient else {
                        return Err(ContractError::UnknownGrantee(wk.recipient_id.clone()));
                    };
                    let allowed = wk.recipient_id == *owner_patient
                        || (wk.recipient_id == author && !is_device)
                        || recipient.role.is_clinical_staff();
                    if !allowed {
                        return Err(ContractError::InvalidGrantee(wk.recipient_id.clone()));
                    }
                    if keys.insert(wk.recipient_id.clone(), wk.clone()).is_some() {
                        return Err(invalid(format!("duplicate key for {}", wk.recipient_id)));
                    }
                }
                if !keys.contains_key(owner_patient) {
                    return Err(invalid("owner must hold a key"));
                }
                if !is_device && !keys.contains_key(author) {
                    return Err(invalid("uploader must hold a key"));
                }
                self.files.insert(
                    *content_hash,
                    FileRecord {
                        content_hash: *content_hash,
                        plaintext_hash: *plaintext_hash,
                        owner_patient: owner_patient.clone(),
                        uploader: author.to_string(),
                        kind: *kind,
                        created_at_ms: now,
                        wrapped_keys: keys,
                        revoked: BTreeSet::new(),
                    },
                );
            }

            TxPayload::GrantAccess { content_hash, grantee, wrapped_key } => {
                self.active_user(author)?;
                let file = self.file(content_hash)?;
                if file.owner_patient != author {
                    return Err(ContractError::NotOwner);
                }
                let g = self.users.get(grantee).filter(|u| u.is_active()).ok_or_else(|| ContractError::UnknownGrantee(grantee.clone()))?;
                if !g.role.is_clinical_staff() {
                    return Err(ContractError::InvalidGrantee(grantee.clone()));
                }
                if wrapped_key.recipient_id != *grantee {
                    return Err(invalid("wrapped key is addressed to someone else"));
                }
                let file = self.files.get_mut(content_hash).expect("checked above");
                file.wrapped_keys.insert(grantee.clone(), wrapped_key.clone());
                file.revoked.remove(grantee);
            }

            TxPayload::RevokeAccess { content_hash, grantee } => {
                self.active_user(author)?;
                let file = self.file(content_hash)?;
                if file.owner_patient != author {
                    return Err(ContractError::NotOwner);
                }
                if grantee == author {
                    return Err(invalid("owner cannot revoke their own access"));
                }
                if !file.wrapped_keys.contains_key(grantee) {
                    return Err(ContractError::UnknownGrantee(grantee.clone()));
                }
                self.files.get_mut(content_hash).expect("checked above").revoked.insert(grantee.clone());
            }

            TxPayload::SubmitDoseRequest { patient, request_file } | TxPayload::EmergencyDoseRequest { patient, request_file } => {
                let rec = self.active_user(author)?;
                if rec.role != Role::Patient || patient != author {
                    return Err(ContractError::NotPermitted("only the patient opens their dose requests".into()));
                }
                let file = self.file(request_file)?;
                if file.kind != FileKind::DoseRequest || file.owner_patient != *patient {
                    return Err(invalid("request file must be the patient's dose_request file"));
                }
                if self.dose_requests.values().any(|r| r.request_file == *request_file) {
                    return Err(ContractError::DuplicateHash(*request_file));
                }
                let (origin, status) = match &tx.payload {
                    TxPayload::SubmitDoseRequest { .. } => (RequestOrigin::DecisionSupport, DoseStatus::PendingPhysician),
                    // Without an approved dose there is no cap; the physician decides.
                    _ if self.last_approved_dose.contains_key(patient) => (RequestOrigin::Emergency, DoseStatus::EmergencyPending),
                    _ => (RequestOrigin::Emergency, DoseStatus::PendingPhysician),
                };
                self.dose_requests.insert(
                    tx.tx_id,
                    DoseRequestRecord {
                        request_id: tx.tx_id,
                        patient: patient.clone(),
                        origin,
                        request_file: *request_file,
                        created_at_ms: now,
                        status,
                        decided_dose_mg: None,
                        decided_by: None,
                        prescription_file: None,
                    },
                );
            }

            TxPayload::RecordPrescription { patient, request, dose_mg, prescription_file, decision } => {
                let rec = self.active_user(author)?;
                let req = self.dose_request(request)?;
                if req.patient != *patient {
                    return Err(invalid("request belongs to another patient"));
                }
                if req.status != DoseStatus::PendingPhysician {
                    return Err(ContractError::BadStatus(req.status));
                }
                match (rec.role, decision) {
                    (Role::Physician, Decision::Confirmed | Decision::Overridden) => {
                        if !self.has_care_relationship(author, patient) {
                            return Err(ContractError::NoCareRelationship(patient.clone()));
                        }
                    }
                    (Role::Patient, Decision::Auto) if author == patient && req.origin == RequestOrigin::DecisionSupport => {}
                    _ => return Err(ContractError::NotPermitted(format!("{} cannot record a {decision:?} prescription", rec.role))),
                }
                let file = self.file(prescription_file)?;
                if file.kind != FileKind::Prescription || file.owner_patient != *patient || file.uploader != author {
                    return Err(invalid("prescription file must be the author's prescription for this patient"));
                }
                let req = self.dose_requests.get_mut(request).expect("checked above");
                req.status = match decision {
                    Decision::Confirmed => DoseStatus::PhysicianConfirmed,
                    Decision::Overridden => DoseStatus::PhysicianOverridden,
                    Decision::Auto => DoseStatus::AutoApproved,
                };
                req.decided_dose_mg = Some(*dose_mg);
                req.decided_by = Some(author.to_string());
                req.prescription_file = Some(*prescription_file);
                self.last_approved_dose.insert(patient.clone(), *dose_mg);
            }

            TxPayload::EmergencyDecision { request_tx, nurse, approved, dose_mg } => {
                let rec = self.active_user(author)?;
                if rec.role != Role::Nurse || nurse != author {
                    return Err(ContractError::NotPermitted("only the deciding nurse may record an emergency decision".into()));
                }
                let req = self.dose_request(request_tx)?;
                if req.status != DoseStatus::EmergencyPending {
                    return Err(ContractError::BadStatus(req.status));
                }
                let patient = req.patient.clone();
                if *approved {
                    let cap = *self.last_approved_dose.get(&patient).ok_or_else(|| ContractError::NoCap(patient.clone()))?;
                    if *dose_mg > cap {
                        return Err(ContractError::CapExceeded { requested: *dose_mg, cap });
                    }
                } else if *dose_mg != 0 {
                    return Err(invalid("a denial carries no dose"));
                }
                let req = self.dose_requests.get_mut(request_tx).expect("checked above");
                req.status = DoseStatus::EmergencyDecided;
                req.decided_by = Some(author.to_string());
                if *approved {
                    req.decided_dose_mg = Some(*dose_mg);
                    self.last_approved_dose.insert(patient, *dose_mg);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, wrap_file_key, FileKey, KeyPair};

    struct World {
        state: ContractState,
        keys: BTreeMap<String, KeyPair>,
        clock: u64,
    }

    impl World {
        fn new() -> World {
            let admin = generate_keypair("admin").unwrap();
            let mut w = World { state: ContractState::default(), keys: BTreeMap::new(), clock: 1 };
            w.keys.insert("admin".into(), admin.clone());
            let reg = TxPayload::RegisterUser {
                user_id: "admin".into(),
                role: Role::Admin,
                display_name: "Admin".into(),
                sign_public: admin.sign_public.clone(),
                enc_public: admin.enc_public.clone(),
                bound_patient: None,
            };
            w.run("admin", reg).unwrap();
            w
        }

        fn tick(&mut self) -> u64 {
            self.clock += 1;
            self.clock
        }

        fn run(&mut self, who: &str, payload: TxPayload) -> Result<TxId, ContractError> {
            let ts = self.tick();
            let tx = Transaction::signed(&self.keys[who], ts, payload);
            self.state.apply(&tx).map(|_| tx.tx_id)
        }

        fn request(&mut self, id: &str, role: Role, bound: Option<&str>) -> Result<(), ContractError> {
            let ts = self.tick();
            self.state.apply(&Transaction::registration_request(ts, id, role, id, bound))
        }

        fn approve(&mut self, approver: &str, id: &str) -> Result<(), ContractError> {
            let kp = generate_keypair(id).unwrap();
            let (role, bound) = match self.state.users.get(id) {
                Some(u) => (u.role, u.bound_patient.clone()),
                None => (Role::Patient, None),
            };
            let reg = TxPayload::RegisterUser {
                user_id: id.into(),
                role,
                display_name: id.into(),
                sign_public: kp.sign_public.clone(),
                enc_public: kp.enc_public.clone(),
                bound_patient: bound,
            };
            self.keys.insert(id.into(), kp);
            self.run(approver, reg).map(|_| ())
        }

        fn add(&mut self, id: &str, role: Role, bound: Option<&str>) {
            self.request(id, role, bound).unwrap();
            self.approve("admin", id).unwrap();
        }

        fn wrap_for(&self, id: &str) -> WrappedKey {
            wrap_file_key(id, &self.keys[id].enc_public, &FileKey([9; 32])).unwrap()
        }

        fn store(&mut self, uploader: &str, owner: &str, kind: FileKind, body: &[u8]) -> Result<ContentHash, ContractError> {
            let hash = ContentHash::of(&[b"ct:".as_slice(), body].concat());
            let mut wrapped = vec![self.wrap_for(owner)];
            if uploader != owner && self.state.users[uploader].role != Role::IotDevice {
                wrapped.push(self.wrap_for(uploader));
            }
            self.run(
                uploader,
                TxPayload::StoreFileHash {
                    content_hash: hash,
                    plaintext_hash: content_hash(body),
                    kind,
                    owner_patient: owner.into(),
                    wrapped_keys: wrapped,
                },
            )
            .map(|_| hash)
        }

        fn grant(&mut self, owner: &str, hash: ContentHash, grantee: &str) -> Result<(), ContractError> {
            let wk = self.wrap_for(grantee);
            self.run(owner, TxPayload::GrantAccess { content_hash: hash, grantee: grantee.into(), wrapped_key: wk }).map(|_| ())
        }
    }

    #[test]
    fn registration_flow() {
        let mut w = World::new();
        w.request("pat", Role::Patient, None).unwrap();
        assert_eq!(w.state.pending_registrations, vec!["pat".to_string()]);
        assert_eq!(w.request("pat", Role::Patient, None), Err(ContractError::DuplicatePending("pat".into())));
        w.approve("admin", "pat").unwrap();
        assert!(w.state.users["pat"].is_active());
        assert!(w.state.pending_registrations.is_empty());
        assert_eq!(w.request("pat", Role::Patient, None), Err(ContractError::AlreadyRegistered("pat".into())));
    }

    #[test]
    fn only_admin_approves() {
        let mut w = World::new();
        w.add("doc", Role::Physician, None);
        w.request("pat", Role::Patient, None).unwrap();
        assert_eq!(w.approve("doc", "pat"), Err(ContractError::NotAdmin));
        assert_eq!(w.approve("admin", "ghost"), Err(ContractError::UnknownPending("ghost".into())));
        assert!(!w.state.users["pat"].is_active());
    }

    #[test]
    fn physician_listing() {
        let mut w = World::new();
        assert!(w.state.list_physicians().is_empty());
        w.add("doc-b", Role::Physician, None);
        w.add("doc-a", Role::Physician, None);
        w.request("doc-c", Role::Physician, None).unwrap();
        let ids: Vec<_> = w.state.list_physicians().iter().map(|u| u.user_id.clone()).collect();
        assert_eq!(ids, vec!["doc-a", "doc-b"]);
    }

    #[test]
    fn file_recording_rules() {
        let mut w = World::new();
        w.add("pat-a", Role::Patient, None);
        w.add("pat-b", Role::Patient, None);
        w.add("dev", Role::IotDevice, Some("pat-a"));
        w.request("late", Role::Patient, None).unwrap();

        let h = w.store("pat-a", "pat-a", FileKind::MedicalHistory, b"history").unwrap();
        assert_eq!(w.state.files[&h].uploader, "pat-a");
        assert_eq!(w.store("pat-a", "pat-a", FileKind::MedicalHistory, b"history"), Err(ContractError::DuplicateHash(h)));

        // Pending users hold no keys, so they cannot even sign; at the contract level they are unauthenticated.
        let ts = w.tick();
        let pending = Transaction::registration_request(ts, "late", Role::Patient, "late", None);
        let mut forged = pending.clone();
        forged.payload = TxPayload::StoreFileHash {
            content_hash: ContentHash::of(b"c"),
            plaintext_hash: content_hash(b"p"),
            kind: FileKind::MedicalHistory,
            owner_patient: "late".into(),
            wrapped_keys: vec![],
        };
        assert_eq!(w.state.apply(&forged), Err(ContractError::Unauthenticated));

        assert_eq!(
            w.store("dev", "pat-b", FileKind::MotionCapture, b"angles"),
            Err(ContractError::DeviceOwnerMismatch { bound: "pat-a".into(), owner: "pat-b".into() })
        );
        let m = w.store("dev", "pat-a", FileKind::MotionCapture, b"angles").unwrap();
        assert!(w.state.files[&m].wrapped_keys.keys().eq(["pat-a"]));
        assert!(matches!(w.store("dev", "pat-a", FileKind::MedicalHistory, b"x"), Err(ContractError::NotPermitted(_))));
        assert_eq!(w.store("pat-a", "pat-b", FileKind::MedicalHistory, b"y"), Err(ContractError::NotOwner));
    }

    #[test]
    fn failed_apply_leaves_state_unchanged() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        let before = w.state.clone();
        // Fails on the second wrapped key, after the first was already checked.
        let mut ghost = w.wrap_for("pat");
        ghost.recipient_id = "ghost".into();
        let r = w.run(
            "pat",
            TxPayload::StoreFileHash {
                content_hash: ContentHash::of(b"c"),
                plaintext_hash: content_hash(b"p"),
                kind: FileKind::MedicalHistory,
                owner_patient: "pat".into(),
                wrapped_keys: vec![w.wrap_for("pat"), ghost],
            },
        );
        assert_eq!(r, Err(ContractError::UnknownGrantee("ghost".into())));
        assert_eq!(w.state, before);
    }

    #[test]
    fn grant_and_revoke() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        w.add("doc", Role::Physician, None);
        w.add("doc2", Role::Physician, None);
        w.add("admin2-wannabe", Role::Nurse, None);
        let h = w.store("pat", "pat", FileKind::MedicalHistory, b"history").unwrap();

        assert_eq!(w.state.authorize_fetch("doc", &h), Access::Deny { reason: DenyReason::NoCareRelationship });
        w.grant("pat", h, "doc").unwrap();
        assert!(w.state.authorize_fetch("doc", &h).is_allowed());
        assert_eq!(w.grant("doc", h, "doc2"), Err(ContractError::NotOwner));
        assert_eq!(w.grant("pat", ContentHash::of(b"?"), "doc"), Err(ContractError::UnknownFile(ContentHash::of(b"?"))));
        assert_eq!(w.grant("pat", h, "admin"), Err(ContractError::InvalidGrantee("admin".into())));

        w.run("pat", TxPayload::RevokeAccess { content_hash: h, grantee: "doc".into() }).unwrap();
        assert!(!w.state.authorize_fetch("doc", &h).is_allowed());
        assert!(!w.state.has_care_relationship("doc", "pat"));
        w.grant("pat", h, "doc").unwrap();
        assert!(w.state.authorize_fetch("doc", &h).is_allowed());
    }

    #[test]
    fn fetch_denials_carry_reasons() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        w.add("nurse", Role::Nurse, None);
        w.request("late", Role::Patient, None).unwrap();
        let h = w.store("pat", "pat", FileKind::MedicalHistory, b"history").unwrap();
        assert!(w.state.authorize_fetch("pat", &h).is_allowed());

        let Access::Deny { reason } = w.state.authorize_fetch("stranger", &h) else { panic!() };
        assert_eq!(reason.to_string(), "User is not valid and cannot access file");
        let Access::Deny { reason } = w.state.authorize_fetch("late", &h) else { panic!() };
        assert_eq!(reason.to_string(), "User is not authenticated");

        w.grant("pat", h, "nurse").unwrap();
        assert_eq!(
            w.state.authorize_fetch("nurse", &h),
            Access::Deny { reason: DenyReason::KindNotVisibleToNurse(FileKind::MedicalHistory) }
        );
    }

    #[test]
    fn integrity_checks_are_independent() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        let body = b"history".to_vec();
        let ct = [b"ct:".as_slice(), &body].concat();
        let h = w.store("pat", "pat", FileKind::MedicalHistory, &body).unwrap();

        let ok = w.state.check_integrity(&h, &ct, Some(&body)).unwrap();
        assert_eq!(ok, IntegrityReport { store_level: true, end_to_end: Some(true) });
        assert_eq!(ok.message(), "Integrity completed");

        let mut bad = ct.clone();
        bad[0] ^= 1;
        let r = w.state.check_integrity(&h, &bad, None).unwrap();
        assert!(!r.store_level);
        assert_eq!(r.message(), "Integrity does not complete");

        let r = w.state.check_integrity(&h, &ct, Some(b"other")).unwrap();
        assert_eq!(r, IntegrityReport { store_level: true, end_to_end: Some(false) });
        assert!(matches!(w.state.check_integrity(&ContentHash::of(b"?"), &ct, None), Err(ContractError::UnknownFile(_))));
    }

    fn open_request(w: &mut World, patient: &str, emergency: bool) -> TxId {
        let body = format!("request-{}", w.clock);
        let file = w.store(patient, patient, FileKind::DoseRequest, body.as_bytes()).unwrap();
        let payload = if emergency {
            TxPayload::EmergencyDoseRequest { patient: patient.into(), request_file: file }
        } else {
            TxPayload::SubmitDoseRequest { patient: patient.into(), request_file: file }
        };
        w.run(patient, payload).unwrap()
    }

    fn prescribe(w: &mut World, who: &str, patient: &str, req: TxId, dose: u64, decision: Decision) -> Result<TxId, ContractError> {
        let file = w.store(who, patient, FileKind::Prescription, format!("rx-{}", w.clock).as_bytes())?;
        w.run(who, TxPayload::RecordPrescription { patient: patient.into(), request: req, dose_mg: dose, prescription_file: file, decision })
    }

    #[test]
    fn dose_request_lifecycle() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        w.add("doc", Role::Physician, None);
        w.add("nurse", Role::Nurse, None);
        let h = w.store("pat", "pat", FileKind::MedicalHistory, b"history").unwrap();
        w.grant("pat", h, "doc").unwrap();

        // Cold start: emergency routes to the physician.
        let e0 = open_request(&mut w, "pat", true);
        assert_eq!(w.state.dose_requests[&e0].status, DoseStatus::PendingPhysician);

        let r1 = open_request(&mut w, "pat", false);
        prescribe(&mut w, "doc", "pat", r1, 100, Decision::Confirmed).unwrap();
        assert_eq!(w.state.dose_requests[&r1].status, DoseStatus::PhysicianConfirmed);
        assert_eq!(w.state.last_approved_dose["pat"], 100);
        assert_eq!(prescribe(&mut w, "doc", "pat", r1, 90, Decision::Overridden), Err(ContractError::BadStatus(DoseStatus::PhysicianConfirmed)));
        assert!(matches!(prescribe(&mut w, "pat", "pat", e0, 90, Decision::Auto), Err(ContractError::NotPermitted(_))));

        let e1 = open_request(&mut w, "pat", true);
        assert_eq!(w.state.dose_requests[&e1].status, DoseStatus::EmergencyPending);
        assert!(w.state.has_open_emergency("pat"));
        let over = w.run("nurse", TxPayload::EmergencyDecision { request_tx: e1, nurse: "nurse".into(), approved: true, dose_mg: 150 });
        assert_eq!(over, Err(ContractError::CapExceeded { requested: 150, cap: 100 }));
        w.run("nurse", TxPayload::EmergencyDecision { request_tx: e1, nurse: "nurse".into(), approved: true, dose_mg: 100 }).unwrap();
        assert_eq!(w.state.dose_requests[&e1].status, DoseStatus::EmergencyDecided);
        let again = w.run("nurse", TxPayload::EmergencyDecision { request_tx: e1, nurse: "nurse".into(), approved: false, dose_mg: 0 });
        assert_eq!(again, Err(ContractError::BadStatus(DoseStatus::EmergencyDecided)));
    }

    #[test]
    fn physician_without_care_cannot_prescribe() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        w.add("doc", Role::Physician, None);
        let r = open_request(&mut w, "pat", false);
        assert_eq!(prescribe(&mut w, "doc", "pat", r, 10, Decision::Confirmed), Err(ContractError::NoCareRelationship("pat".into())));
    }

    #[test]
    fn patient_records_auto_prescription() {
        let mut w = World::new();
        w.add("pat", Role::Patient, None);
        let r = open_request(&mut w, "pat", false);
        prescribe(&mut w, "pat", "pat", r, 80, Decision::Auto).unwrap();
        assert_eq!(w.state.dose_requests[&r].status, DoseStatus::AutoApproved);
        assert_eq!(w.state.last_approved_dose["pat"], 80);
    }
}
