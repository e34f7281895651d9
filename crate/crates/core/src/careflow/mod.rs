//! End-to-end care workflows on top of a [`Node`].
//!
//! Every operation acts as one user, identified by their [`KeyPair`]: it
//! signs that user's transactions and unwraps file keys addressed to them.
//! Operations return only after their block is sealed.
//!
//! Uploads put ciphertext into the blob store before the ledger sees the
//! file. If the ledger then refuses the transaction the blob stays behind as
//! an unreferenced orphan; the ledger decides which addresses matter.

pub mod decision;
pub mod motion;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::castore::{ContentHash, StoreError};
use crate::contract::{
    Access, ContractError, ContractState, Decision, DenyReason, DoseRequestRecord, DoseStatus, FileKind, IntegrityReport, RequestOrigin, Role, UserRecord,
};
use crate::crypto::{self, aead_open, aead_seal, unwrap_file_key, wrap_file_key, CryptoError, FileKey, KeyPair, SealedBlob, WrappedKey};
use crate::ledger::{Transaction, TxError, TxId, TxPayload};
use crate::node::{now_ms, Node, NodeError, Receipt};

use decision::{suggest_dose, DecisionConfig, DoseSuggestion, HistoryEntry};
use motion::{extract_features, FeatureVector, MotionCapture, MotionError};

#[derive(Debug, thiserror::Error)]
pub enum CareError {
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("access denied: {0}")]
    AccessDenied(DenyReason),
    #[error("{}", .0.message())]
    Integrity(IntegrityReport),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Validation(#[from] MotionError),
    /// The emergency request was recorded but, with no approved dose to cap
    /// it, routed to the physician.
    #[error("no approved dose to cap an emergency dose; request {request} routed to the physician")]
    NoCap { request: TxId },
    #[error("keys presented for {0} do not match the registered keys")]
    KeyMismatch(String),
    #[error("nothing to confirm: {0}")]
    NothingToConfirm(String),
    #[error("unreadable document: {0}")]
    Document(String),
    #[error(transparent)]
    Node(NodeError),
}

impl From<NodeError> for CareError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Rejected(TxError::Contract(c)) => CareError::Contract(c),
            other => CareError::Node(other),
        }
    }
}

pub type Result<T, E = CareError> = std::result::Result<T, E>;

/// Encrypted body of a decision-support dose request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRequestDoc {
    pub patient: String,
    pub motion_file: ContentHash,
    pub features: FeatureVector,
    pub suggestion: DoseSuggestion,
    pub created_at_ms: u64,
}

/// Encrypted body of an emergency request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergencyDoc {
    pub patient: String,
    pub cap_mg: Option<u64>,
    pub created_at_ms: u64,
}

/// Encrypted body of a prescription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescriptionDoc {
    pub patient: String,
    pub request: TxId,
    pub dose_mg: u64,
    pub decision: Decision,
    pub prescriber: String,
    pub suggestion: Option<DoseSuggestion>,
    pub issued_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RequestDocument {
    DecisionSupport(DoseRequestDoc),
    Emergency(EmergencyDoc),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantReceipt {
    pub content_hash: ContentHash,
    pub grantee: String,
    pub tx_id: TxId,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseTicket {
    pub request_id: TxId,
    pub request_file: ContentHash,
    pub suggestion: DoseSuggestion,
    pub status: DoseStatus,
    pub prescription_file: Option<ContentHash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyTicket {
    pub request_id: TxId,
    pub cap_mg: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyOutcome {
    pub request_id: TxId,
    pub approved: bool,
    pub dose_mg: u64,
    pub tx_id: TxId,
}

/// The workflows, bound to one node.
#[derive(Debug, Clone)]
pub struct Careflow {
    node: Arc<Node>,
    config: DecisionConfig,
}

impl Careflow {
    pub fn new(node: Arc<Node>, config: DecisionConfig) -> Careflow {
        Careflow { node, config }
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn config(&self) -> &DecisionConfig {
        &self.config
    }

    pub fn state(&self) -> Arc<ContractState> {
        self.node.state()
    }

    fn sign(&self, actor: &KeyPair, payload: TxPayload) -> Transaction {
        Transaction::signed(actor, now_ms(), payload)
    }

    /// Fails early when `actor` does not hold the registered keys, before
    /// anything touches the blob store.
    fn check_keys<'s>(&self, state: &'s ContractState, actor: &KeyPair) -> Result<&'s UserRecord> {
        let rec = state.active_user(&actor.user_id)?;
        if rec.sign_public.as_ref() != Some(&actor.sign_public) || rec.enc_public.as_ref() != Some(&actor.enc_public) || !actor.is_consistent() {
            return Err(CareError::KeyMismatch(actor.user_id.clone()));
        }
        Ok(rec)
    }

    // ---- registration ----

    pub fn request_registration(&self, user_id: &str, role: Role, display_name: &str, bound_patient: Option<&str>) -> Result<Receipt> {
        let tx = Transaction::registration_request(now_ms(), user_id, role, display_name, bound_patient);
        Ok(self.node.commit(tx)?)
    }

    /// Approves a pending registration and returns the newly generated key
    /// material for delivery to the user. It is not kept anywhere.
    pub fn approve_registration(&self, admin: &KeyPair, pending_id: &str) -> Result<KeyPair> {
        let state = self.state();
        if state.users.get(&admin.user_id).map(|u| u.role) != Some(Role::Admin) {
            return Err(ContractError::NotAdmin.into());
        }
        self.check_keys(&state, admin)?;
        let rec = match state.users.get(pending_id) {
            Some(u) if u.is_active() => return Err(ContractError::AlreadyRegistered(pending_id.to_string()).into()),
            Some(u) => u,
            None => return Err(ContractError::UnknownPending(pending_id.to_string()).into()),
        };
        let keys = crypto::generate_keypair(pending_id)?;
        let tx = self.sign(
            admin,
            TxPayload::RegisterUser {
                user_id: pending_id.to_string(),
                role: rec.role,
                display_name: rec.display_name.clone(),
                sign_public: keys.sign_public.clone(),
                enc_public: keys.enc_public.clone(),
                bound_patient: rec.bound_patient.clone(),
            },
        );
        self.node.commit(tx)?;
        Ok(keys)
    }

    // ---- files ----

    /// Encrypts and stores `plaintext`, returning the transaction that records it.
    /// Keys go to the owner, the uploader (devices excepted) and `extra`.
    fn prepare_upload(&self, state: &ContractState, actor: &KeyPair, plaintext: &[u8], kind: FileKind, owner: &str, extra: &[&UserRecord]) -> Result<(ContentHash, Transaction)> {
        let uploader = state.check_write(&actor.user_id, kind, owner)?;
        self.check_keys(state, actor)?;

        let plaintext_hash = crypto::content_hash(plaintext);
        let file_key = FileKey::generate()?;
        let sealed = aead_seal(&file_key, plaintext, owner.as_bytes())?;
        let content_hash = self.node.store().put(&sealed.to_bytes())?;

        let mut recipients: Vec<&UserRecord> = vec![state.active_user(owner)?];
        if uploader.role != Role::IotDevice && uploader.user_id != owner {
            recipients.push(uploader);
        }
        for r in extra {
            if !recipients.iter().any(|x| x.user_id == r.user_id) {
                recipients.push(r);
            }
        }
        let wrapped_keys = recipients
            .iter()
            .map(|r| wrap_file_key(&r.user_id, r.enc_public.as_ref().expect("active users have keys"), &file_key))
            .collect::<Result<Vec<WrappedKey>, _>>()?;
        let tx = self.sign(actor, TxPayload::StoreFileHash { content_hash, plaintext_hash, kind, owner_patient: owner.to_string(), wrapped_keys });
        Ok((content_hash, tx))
    }

    pub fn upload_file(&self, actor: &KeyPair, plaintext: &[u8], kind: FileKind, owner: &str) -> Result<ContentHash> {
        let state = self.state();
        let (hash, tx) = self.prepare_upload(&state, actor, plaintext, kind, owner, &[])?;
        self.node.commit(tx)?;
        Ok(hash)
    }

    fn file_key_for(&self, state: &ContractState, actor: &KeyPair, hash: &ContentHash) -> Result<FileKey> {
        match state.authorize_fetch(&actor.user_id, hash) {
            Access::Allow { wrapped_key } => Ok(unwrap_file_key(&actor.enc_private, &wrapped_key)?),
            Access::Deny { reason } => Err(CareError::AccessDenied(reason)),
        }
    }

    /// Authorizes, fetches, checks the ciphertext address, decrypts, and
    /// checks the plaintext hash. Plaintext is returned only if all pass.
    pub fn fetch_file(&self, actor: &KeyPair, hash: &ContentHash) -> Result<Vec<u8>> {
        let state = self.state();
        let key = self.file_key_for(&state, actor, hash)?;
        let file = state.file(hash)?;
        let ciphertext = self.node.store().get_unverified(hash)?;
        let report = state.check_integrity(hash, &ciphertext, None)?;
        if !report.store_level {
            return Err(CareError::Integrity(report));
        }
        let plaintext = aead_open(&key, &SealedBlob::from_bytes(&ciphertext)?, file.owner_patient.as_bytes())?;
        let report = state.check_integrity(hash, &ciphertext, Some(&plaintext))?;
        if !report.is_complete() {
            return Err(CareError::Integrity(report));
        }
        Ok(plaintext)
    }

    /// Runs the integrity checks without returning content. The end-to-end
    /// check runs only when `actor` may decrypt the file.
    pub fn check_integrity(&self, actor: &KeyPair, hash: &ContentHash) -> Result<IntegrityReport> {
        let state = self.state();
        state.active_user(&actor.user_id)?;
        let file = state.file(hash)?;
        let ciphertext = self.node.store().get_unverified(hash)?;
        let mut report = state.check_integrity(hash, &ciphertext, None)?;
        if let Ok(key) = self.file_key_for(&state, actor, hash) {
            let plaintext = SealedBlob::from_bytes(&ciphertext)
                .ok()
                .and_then(|blob| aead_open(&key, &blob, file.owner_patient.as_bytes()).ok());
            report.end_to_end = Some(match plaintext {
                Some(p) => state.check_integrity(hash, &ciphertext, Some(&p))?.end_to_end == Some(true),
                None => false,
            });
        }
        Ok(report)
    }

    /// Re-wraps the owner's file key for `grantee` and records the grant.
    pub fn share_file(&self, owner: &KeyPair, hash: &ContentHash, grantee: &str) -> Result<GrantReceipt> {
        let state = self.state();
        self.check_keys(&state, owner)?;
        let file = state.file(hash)?;
        if file.owner_patient != owner.user_id {
            return Err(ContractError::NotOwner.into());
        }
        let g = state.users.get(grantee).filter(|u| u.is_active()).ok_or_else(|| ContractError::UnknownGrantee(grantee.to_string()))?;
        if !g.role.is_clinical_staff() {
            return Err(ContractError::InvalidGrantee(grantee.to_string()).into());
        }
        let key = self.file_key_for(&state, owner, hash)?;
        let wrapped_key = wrap_file_key(grantee, g.enc_public.as_ref().expect("active users have keys"), &key)?;
        let tx = self.sign(owner, TxPayload::GrantAccess { content_hash: *hash, grantee: grantee.to_string(), wrapped_key });
        let r = self.node.commit(tx)?;
        Ok(GrantReceipt { content_hash: *hash, grantee: grantee.to_string(), tx_id: r.tx_id, height: r.height })
    }

    pub fn revoke_file(&self, owner: &KeyPair, hash: &ContentHash, grantee: &str) -> Result<Receipt> {
        let tx = self.sign(owner, TxPayload::RevokeAccess { content_hash: *hash, grantee: grantee.to_string() });
        Ok(self.node.commit(tx)?)
    }

    // ---- motion and decision support ----

    /// Stores a device capture as the bound patient's motion_capture file.
    pub fn ingest_motion(&self, device: &KeyPair, mc: &MotionCapture) -> Result<ContentHash> {
        mc.validate()?;
        let state = self.state();
        let rec = state.active_user(&device.user_id)?;
        if rec.role != Role::IotDevice {
            return Err(ContractError::NotPermitted("only devices ingest motion".into()).into());
        }
        let bound = rec.bound_patient.clone().unwrap_or_default();
        if bound != mc.patient_id {
            return Err(ContractError::DeviceOwnerMismatch { bound, owner: mc.patient_id.clone() }.into());
        }
        if mc.device_id != device.user_id {
            return Err(MotionError::Invalid(format!("capture names device {} but was sent by {}", mc.device_id, device.user_id)).into());
        }
        let bytes = mc.to_canonical()?;
        let (hash, tx) = self.prepare_upload(&state, device, &bytes, FileKind::MotionCapture, &mc.patient_id, &[])?;
        self.node.commit(tx)?;
        Ok(hash)
    }

    pub fn read_motion(&self, actor: &KeyPair, hash: &ContentHash) -> Result<MotionCapture> {
        Ok(MotionCapture::parse(&self.fetch_file(actor, hash)?)?)
    }

    /// Decrypts and parses the document behind a dose request.
    pub fn read_request(&self, actor: &KeyPair, request: &DoseRequestRecord) -> Result<RequestDocument> {
        let bytes = self.fetch_file(actor, &request.request_file)?;
        let doc = match request.origin {
            RequestOrigin::DecisionSupport => serde_json::from_slice(&bytes).map(RequestDocument::DecisionSupport),
            RequestOrigin::Emergency => serde_json::from_slice(&bytes).map(RequestDocument::Emergency),
        };
        doc.map_err(|e| CareError::Document(e.to_string()))
    }

    /// Approved decision-support episodes for `patient`, oldest first.
    pub fn approved_history(&self, patient: &KeyPair) -> Result<Vec<HistoryEntry>> {
        let state = self.state();
        let mut episodes: Vec<&DoseRequestRecord> = state
            .dose_requests
            .values()
            .filter(|r| r.patient == patient.user_id && r.origin == RequestOrigin::DecisionSupport && r.status.is_approved())
            .collect();
        episodes.sort_by_key(|r| (r.created_at_ms, r.request_id));
        episodes
            .into_iter()
            .map(|r| {
                let RequestDocument::DecisionSupport(doc) = self.read_request(patient, r)? else {
                    return Err(CareError::Document("decision-support request holds an emergency document".into()));
                };
                Ok(HistoryEntry {
                    features: doc.features,
                    dose_mg: r.decided_dose_mg.expect("approved requests carry a dose"),
                    approved: true,
                    source: Some(r.request_file),
                })
            })
            .collect()
    }

    fn consecutive_auto(&self, state: &ContractState, patient: &str) -> u32 {
        let mut decided: Vec<&DoseRequestRecord> = state
            .dose_requests
            .values()
            .filter(|r| r.patient == patient && r.origin == RequestOrigin::DecisionSupport && r.status.is_approved())
            .collect();
        decided.sort_by_key(|r| (r.created_at_ms, r.request_id));
        decided.iter().rev().take_while(|r| r.status == DoseStatus::AutoApproved).count() as u32
    }

    /// Compares a motion capture with the patient's previous approved
    /// episode and opens a dose request. A close enough match is approved
    /// automatically with the previous dose; anything else waits for a physician.
    pub fn request_dose(&self, patient: &KeyPair, motion_file: &ContentHash) -> Result<DoseTicket> {
        let mc = self.read_motion(patient, motion_file)?;
        if mc.patient_id != patient.user_id {
            return Err(MotionError::Invalid("capture belongs to another patient".into()).into());
        }
        let features = extract_features(&mc);
        let history = self.approved_history(patient)?;
        let mut suggestion = suggest_dose(&history, &features, self.config.tau);

        let state = self.state();
        if let Some(limit) = self.config.max_consecutive_auto {
            if suggestion.auto && self.consecutive_auto(&state, &patient.user_id) >= limit {
                suggestion.auto = false;
            }
        }

        let now = now_ms();
        let doc = DoseRequestDoc { patient: patient.user_id.clone(), motion_file: *motion_file, features, suggestion: suggestion.clone(), created_at_ms: now };
        let care_team = state.care_team(&patient.user_id);
        let (request_file, store_tx) = self.prepare_upload(&state, patient, &canonical::to_vec(&doc).expect("doc serializes"), FileKind::DoseRequest, &patient.user_id, &care_team)?;
        let submit = self.sign(patient, TxPayload::SubmitDoseRequest { patient: patient.user_id.clone(), request_file });
        let request_id = submit.tx_id;
        let mut batch = vec![store_tx, submit];

        let mut prescription_file = None;
        if suggestion.auto {
            let dose_mg = suggestion.dose_mg.expect("auto suggestions carry a dose");
            let rx = PrescriptionDoc {
                patient: patient.user_id.clone(),
                request: request_id,
                dose_mg,
                decision: Decision::Auto,
                prescriber: patient.user_id.clone(),
                suggestion: Some(suggestion.clone()),
                issued_at_ms: now,
            };
            let (file, tx) = self.prepare_upload(&state, patient, &canonical::to_vec(&rx).expect("doc serializes"), FileKind::Prescription, &patient.user_id, &care_team)?;
            batch.push(tx);
            batch.push(self.sign(
                patient,
                TxPayload::RecordPrescription { patient: patient.user_id.clone(), request: request_id, dose_mg, prescription_file: file, decision: Decision::Auto },
            ));
            prescription_file = Some(file);
        }
        self.node.commit_batch(batch)?;
        let status = self.state().dose_request(&request_id)?.status;
        Ok(DoseTicket { request_id, request_file, suggestion, status, prescription_file })
    }

    /// A physician confirms the suggested dose or overrides it.
    pub fn prescribe(&self, physician: &KeyPair, request_id: &TxId, dose_mg: u64, decision: Decision) -> Result<ContentHash> {
        let state = self.state();
        let req = state.dose_request(request_id)?;
        if req.status != DoseStatus::PendingPhysician {
            return Err(ContractError::BadStatus(req.status).into());
        }
        let rec = state.active_user(&physician.user_id)?;
        if rec.role != Role::Physician || decision == Decision::Auto {
            return Err(ContractError::NotPermitted(format!("{} cannot record a {decision:?} prescription", rec.role)).into());
        }
        if !state.has_care_relationship(&physician.user_id, &req.patient) {
            return Err(ContractError::NoCareRelationship(req.patient.clone()).into());
        }
        let suggestion = match self.read_request(physician, req) {
            Ok(RequestDocument::DecisionSupport(doc)) => Some(doc.suggestion),
            _ => None,
        };
        if decision == Decision::Confirmed {
            match suggestion.as_ref().and_then(|s| s.dose_mg) {
                Some(suggested) if suggested == dose_mg => {}
                Some(suggested) => return Err(CareError::NothingToConfirm(format!("suggested dose is {suggested} mg, not {dose_mg} mg"))),
                None => return Err(CareError::NothingToConfirm("request carries no suggested dose".into())),
            }
        }
        let rx = PrescriptionDoc {
            patient: req.patient.clone(),
            request: *request_id,
            dose_mg,
            decision,
            prescriber: physician.user_id.clone(),
            suggestion,
            issued_at_ms: now_ms(),
        };
        let (file, store_tx) = self.prepare_upload(&state, physician, &canonical::to_vec(&rx).expect("doc serializes"), FileKind::Prescription, &req.patient, &[])?;
        let record = self.sign(
            physician,
            TxPayload::RecordPrescription { patient: req.patient.clone(), request: *request_id, dose_mg, prescription_file: file, decision },
        );
        self.node.commit_batch(vec![store_tx, record])?;
        Ok(file)
    }

    // ---- emergencies ----

    /// Opens an emergency request. Nurses can act on it only when the
    /// patient has an approved dose to cap it; otherwise it is recorded,
    /// routed to the physician, and `NoCap` is returned.
    pub fn emergency_request(&self, patient: &KeyPair) -> Result<EmergencyTicket> {
        let state = self.state();
        let cap = state.last_approved_dose.get(&patient.user_id).copied();
        let doc = EmergencyDoc { patient: patient.user_id.clone(), cap_mg: cap, created_at_ms: now_ms() };
        let mut readers: Vec<&UserRecord> = state.users.values().filter(|u| u.role == Role::Nurse && u.is_active()).collect();
        readers.extend(state.care_team(&patient.user_id));
        let (request_file, store_tx) = self.prepare_upload(&state, patient, &canonical::to_vec(&doc).expect("doc serializes"), FileKind::DoseRequest, &patient.user_id, &readers)?;
        let open = self.sign(patient, TxPayload::EmergencyDoseRequest { patient: patient.user_id.clone(), request_file });
        let request_id = open.tx_id;
        self.node.commit_batch(vec![store_tx, open])?;
        match (self.state().dose_request(&request_id)?.status, cap) {
            (DoseStatus::EmergencyPending, Some(cap_mg)) => Ok(EmergencyTicket { request_id, cap_mg }),
            _ => Err(CareError::NoCap { request: request_id }),
        }
    }

    /// A nurse approves a dose up to the patient's last approved dose, or denies.
    pub fn emergency_decide(&self, nurse: &KeyPair, request_id: &TxId, approve: bool, dose_mg: u64) -> Result<EmergencyOutcome> {
        let dose_mg = if approve { dose_mg } else { 0 };
        let tx = self.sign(nurse, TxPayload::EmergencyDecision { request_tx: *request_id, nurse: nurse.user_id.clone(), approved: approve, dose_mg });
        let r = self.node.commit(tx)?;
        Ok(EmergencyOutcome { request_id: *request_id, approved: approve, dose_mg, tx_id: r.tx_id })
    }

    /// Dose requests for `patient`, oldest first.
    pub fn dose_requests(&self, patient: &str) -> Vec<DoseRequestRecord> {
        let state = self.state();
        let mut out: Vec<DoseRequestRecord> = state.dose_requests.values().filter(|r| r.patient == patient).cloned().collect();
        out.sort_by_key(|r| (r.created_at_ms, r.request_id));
        out
    }
}
