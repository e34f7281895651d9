//! Challenge–response login and bearer sessions.
//!
//! A client asks for a nonce, signs the raw nonce bytes with its registered
//! signing key and presents the signature together with its keyfile. The
//! session keeps the key material in memory so the node can sign and
//! decrypt on the user's behalf until the session expires.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use careledger_core::contract::{ContractState, Role};
use careledger_core::crypto::{self, random_bytes, KeyPair, Signature};
use careledger_core::node::now_ms;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("User is not valid")]
    UnknownUser,
    #[error("User is not authenticated")]
    NotActive,
    #[error("unknown or expired login nonce")]
    UnknownNonce,
    #[error("login nonce was already used")]
    ReplayedNonce,
    #[error("login nonce was issued to another user")]
    WrongUser,
    #[error("signature does not verify against the registered key")]
    BadSignature,
    #[error("presented keys do not match the registered keys")]
    KeyMismatch,
    #[error("missing or malformed bearer token")]
    MissingToken,
    #[error("session expired or unknown")]
    InvalidToken,
}

#[derive(Clone)]
pub struct Session {
    pub token: String,
    pub user_id: String,
    pub role: Role,
    pub expires_at_ms: u64,
    keys: Arc<KeyPair>,
}

impl Session {
    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo { session_token: self.token.clone(), user_id: self.user_id.clone(), role: self.role, expires_at_ms: self.expires_at_ms }
    }
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("user_id", &self.user_id).field("role", &self.role).field("expires_at_ms", &self.expires_at_ms).finish_non_exhaustive()
    }
}

/// What the client gets back from a successful login.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_token: String,
    pub user_id: String,
    pub role: Role,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub user_id: String,
    pub nonce: String,
    pub expires_at_ms: u64,
}

struct Issued {
    user_id: String,
    expires_at_ms: u64,
    spent: bool,
}

#[derive(Default)]
struct Tables {
    nonces: HashMap<String, Issued>,
    sessions: HashMap<String, Session>,
}

pub struct SessionStore {
    ttl_ms: u64,
    challenge_ttl_ms: u64,
    tables: Mutex<Tables>,
}

fn active_role(state: &ContractState, user_id: &str) -> Result<Role, SessionError> {
    match state.users.get(user_id) {
        None => Err(SessionError::UnknownUser),
        Some(u) if !u.is_active() => Err(SessionError::NotActive),
        Some(u) => Ok(u.role),
    }
}

impl SessionStore {
    pub fn new(ttl_ms: u64, challenge_ttl_ms: u64) -> SessionStore {
        SessionStore { ttl_ms, challenge_ttl_ms, tables: Mutex::new(Tables::default()) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Tables> {
        let mut t = self.tables.lock().expect("session lock poisoned");
        let now = now_ms();
        // Spent nonces stay until they expire so a replay is reported as one.
        t.nonces.retain(|_, n| n.expires_at_ms > now);
        t.sessions.retain(|_, s| s.expires_at_ms > now);
        t
    }

    pub fn challenge(&self, state: &ContractState, user_id: &str) -> Result<Challenge, SessionError> {
        active_role(state, user_id)?;
        let nonce = hex::encode(random_bytes::<32>().map_err(|_| SessionError::UnknownNonce)?);
        let expires_at_ms = now_ms() + self.challenge_ttl_ms;
        self.lock().nonces.insert(nonce.clone(), Issued { user_id: user_id.to_string(), expires_at_ms, spent: false });
        Ok(Challenge { user_id: user_id.to_string(), nonce, expires_at_ms })
    }

    /// Checks the signed nonce and the presented keys. A nonce is good for
    /// exactly one attempt, successful or not.
    pub fn respond(&self, state: &ContractState, user_id: &str, nonce: &str, signature: &Signature, keys: KeyPair) -> Result<SessionInfo, SessionError> {
        let role = active_role(state, user_id)?;
        {
            let mut t = self.lock();
            let issued = t.nonces.get_mut(nonce).ok_or(SessionError::UnknownNonce)?;
            if issued.spent {
                return Err(SessionError::ReplayedNonce);
            }
            issued.spent = true;
            if issued.user_id != user_id {
                return Err(SessionError::WrongUser);
            }
        }
        let rec = &state.users[user_id];
        let registered = rec.sign_public.as_ref().ok_or(SessionError::NotActive)?;
        let nonce_bytes = hex::decode(nonce).map_err(|_| SessionError::UnknownNonce)?;
        if !crypto::verify(registered, &nonce_bytes, signature).unwrap_or(false) {
            return Err(SessionError::BadSignature);
        }
        if keys.user_id != user_id || &keys.sign_public != registered || rec.enc_public.as_ref() != Some(&keys.enc_public) || !keys.is_consistent() {
            return Err(SessionError::KeyMismatch);
        }
        let token = hex::encode(random_bytes::<32>().map_err(|_| SessionError::InvalidToken)?);
        let session = Session { token: token.clone(), user_id: user_id.to_string(), role, expires_at_ms: now_ms() + self.ttl_ms, keys: Arc::new(keys) };
        let info = session.info();
        self.lock().sessions.insert(token, session);
        Ok(info)
    }

    pub fn get(&self, token: &str) -> Result<Session, SessionError> {
        self.lock().sessions.get(token).cloned().ok_or(SessionError::InvalidToken)
    }

    pub fn end(&self, token: &str) -> bool {
        self.lock().sessions.remove(token).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use careledger_core::contract::{UserRecord, UserStatus};
    use careledger_core::crypto::generate_keypair;

    fn state_with(keys: &[(&KeyPair, bool)]) -> ContractState {
        let mut s = ContractState::default();
        for (k, active) in keys {
            s.users.insert(
                k.user_id.clone(),
                UserRecord {
                    user_id: k.user_id.clone(),
                    role: Role::Patient,
                    display_name: k.user_id.clone(),
                    sign_public: active.then(|| k.sign_public.clone()),
                    enc_public: active.then(|| k.enc_public.clone()),
                    status: if *active { UserStatus::Active } else { UserStatus::Pending },
                    registered_at_ms: 0,
                    bound_patient: None,
                },
            );
        }
        s
    }

    fn signed(keys: &KeyPair, nonce: &str) -> Signature {
        keys.sign(&hex::decode(nonce).unwrap())
    }

    #[test]
    fn login_flow_and_replay() {
        let alice = generate_keypair("alice").unwrap();
        let state = state_with(&[(&alice, true)]);
        let store = SessionStore::new(10_000, 10_000);
        let c = store.challenge(&state, "alice").unwrap();
        let info = store.respond(&state, "alice", &c.nonce, &signed(&alice, &c.nonce), alice.clone()).unwrap();
        assert_eq!(info.role, Role::Patient);
        assert_eq!(store.get(&info.session_token).unwrap().keys().user_id, "alice");
        assert_eq!(
            store.respond(&state, "alice", &c.nonce, &signed(&alice, &c.nonce), alice.clone()).unwrap_err(),
            SessionError::ReplayedNonce
        );
        assert!(store.end(&info.session_token));
        assert_eq!(store.get(&info.session_token).unwrap_err(), SessionError::InvalidToken);
    }

    #[test]
    fn wrong_key_and_unknown_users() {
        let alice = generate_keypair("alice").unwrap();
        let mallory = generate_keypair("alice").unwrap();
        let pending = generate_keypair("pat").unwrap();
        let state = state_with(&[(&alice, true), (&pending, false)]);
        let store = SessionStore::new(10_000, 10_000);

        let c = store.challenge(&state, "alice").unwrap();
        assert_eq!(store.respond(&state, "alice", &c.nonce, &signed(&mallory, &c.nonce), mallory.clone()).unwrap_err(), SessionError::BadSignature);
        // Right signature, but the keyfile presented belongs to someone else.
        let c = store.challenge(&state, "alice").unwrap();
        assert_eq!(store.respond(&state, "alice", &c.nonce, &signed(&alice, &c.nonce), mallory).unwrap_err(), SessionError::KeyMismatch);

        assert_eq!(store.challenge(&state, "pat").unwrap_err(), SessionError::NotActive);
        assert_eq!(store.challenge(&state, "nobody").unwrap_err(), SessionError::UnknownUser);
        assert_eq!(store.respond(&state, "alice", "00", &signed(&alice, "00"), alice.clone()).unwrap_err(), SessionError::UnknownNonce);
    }

    #[test]
    fn sessions_expire() {
        let alice = generate_keypair("alice").unwrap();
        let state = state_with(&[(&alice, true)]);
        let store = SessionStore::new(30, 10_000);
        let c = store.challenge(&state, "alice").unwrap();
        let info = store.respond(&state, "alice", &c.nonce, &signed(&alice, &c.nonce), alice.clone()).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(60));
        assert_eq!(store.get(&info.session_token).unwrap_err(), SessionError::InvalidToken);
    }
}
