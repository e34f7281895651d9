//! Cryptographic primitives.
//!
//! - content hashing: SHA-256
//! - file sealing: AES-256-GCM, random 96-bit nonce, serialized as `nonce ‖ ciphertext ‖ tag`
//! - signatures: Ed25519 over raw message bytes
//! - key wrapping: an X25519 sealed box. An ephemeral key agrees with the
//!   recipient key, HKDF-SHA256 derives a wrapping key, and AES-256-GCM seals
//!   the 32-byte file key. Wire form is `ephemeral_public ‖ nonce ‖ ciphertext ‖ tag`.

use std::fmt;
use std::str::FromStr;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::hexser;

pub const DIGEST_LEN: usize = 32;
pub const FILE_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const SIGNATURE_LEN: usize = 64;

const WRAP_INFO: &[u8] = b"careledger-wrap-v1";
const WRAPPED_LEN: usize = 32 + NONCE_LEN + FILE_KEY_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error("malformed {what}: {reason}")]
    Decode { what: &'static str, reason: String },
    /// Wrong key, wrong associated data or modified bytes. Callers cannot tell which.
    #[error("authenticated decryption failed")]
    Decrypt,
}

fn decode_err(what: &'static str, reason: impl ToString) -> CryptoError {
    CryptoError::Decode { what, reason: reason.to_string() }
}

fn fill_random(buf: &mut [u8]) -> Result<(), CryptoError> {
    OsRng.try_fill_bytes(buf).map_err(|e| CryptoError::Entropy(e.to_string()))
}

/// Fills a fresh array from the OS entropy source.
pub fn random_bytes<const N: usize>() -> Result<[u8; N], CryptoError> {
    let mut out = [0u8; N];
    fill_random(&mut out)?;
    Ok(out)
}

/// A SHA-256 digest. Canonical text form is 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(#[serde(with = "hexser::array")] pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hexser::decode_array(s).map(Digest).map_err(|e| decode_err("digest", e))
    }
}

/// SHA-256 of `data`.
pub fn content_hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

macro_rules! key_newtype {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(#[serde(with = "hexser::array")] pub [u8; 32]);

        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl FromStr for $name {
            type Err = CryptoError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                hexser::decode_array(s).map($name).map_err(|e| decode_err($what, e))
            }
        }
    };
}

key_newtype!(
    /// Ed25519 verification key.
    SignPublicKey,
    "signing public key"
);
key_newtype!(
    /// Ed25519 secret seed.
    SignPrivateKey,
    "signing private key"
);
key_newtype!(
    /// X25519 public key used as a wrapping target.
    EncPublicKey,
    "encryption public key"
);
key_newtype!(
    /// X25519 static secret.
    EncPrivateKey,
    "encryption private key"
);

impl fmt::Debug for SignPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SignPublicKey({})", self.to_hex())
    }
}

impl fmt::Debug for EncPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncPublicKey({})", self.to_hex())
    }
}

impl fmt::Debug for SignPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SignPrivateKey(..)")
    }
}

impl fmt::Debug for EncPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EncPrivateKey(..)")
    }
}

impl SignPrivateKey {
    pub fn public_key(&self) -> SignPublicKey {
        let sk = ed25519_dalek::SigningKey::from_bytes(&self.0);
        SignPublicKey(sk.verifying_key().to_bytes())
    }
}

impl EncPrivateKey {
    pub fn public_key(&self) -> EncPublicKey {
        let secret = x25519_dalek::StaticSecret::from(self.0);
        EncPublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes())
    }
}

/// An Ed25519 signature, hex on the wire.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(#[serde(with = "hexser::vec")] pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0))
    }
}

impl FromStr for Signature {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hexser::decode_lower(s).map(Signature).map_err(|e| decode_err("signature", e))
    }
}

/// A user's full key material. Only the holder (and, once, the approving
/// admin) ever sees the private halves.
///
/// Serializes to the keyfile layout: `{user_id, sign_private, enc_private, sign_public, enc_public}`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyPair {
    pub user_id: String,
    pub sign_public: SignPublicKey,
    pub sign_private: SignPrivateKey,
    pub enc_public: EncPublicKey,
    pub enc_private: EncPrivateKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("user_id", &self.user_id)
            .field("sign_public", &self.sign_public)
            .field("enc_public", &self.enc_public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// True when both public halves are derived from the private halves.
    pub fn is_consistent(&self) -> bool {
        self.sign_private.public_key() == self.sign_public && self.enc_private.public_key() == self.enc_public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(&self.sign_private, message)
    }
}

/// Generates fresh signing and key-agreement pairs for `user_id`.
pub fn generate_keypair(user_id: &str) -> Result<KeyPair, CryptoError> {
    if user_id.is_empty() {
        return Err(decode_err("user id", "empty"));
    }
    let sign_seed: [u8; 32] = random_bytes()?;
    let enc_seed: [u8; 32] = random_bytes()?;
    let sign_private = SignPrivateKey(sign_seed);
    let enc_private = EncPrivateKey(x25519_dalek::StaticSecret::from(enc_seed).to_bytes());
    Ok(KeyPair {
        user_id: user_id.to_string(),
        sign_public: sign_private.public_key(),
        enc_public: enc_private.public_key(),
        sign_private,
        enc_private,
    })
}

pub fn sign(private: &SignPrivateKey, message: &[u8]) -> Signature {
    let sk = ed25519_dalek::SigningKey::from_bytes(&private.0);
    Signature(sk.sign(message).to_bytes().to_vec())
}

/// Verifies `signature` over `message`.
///
/// A key that is not a valid curve point or a signature of the wrong length
/// is a decode error, not `Ok(false)`.
pub fn verify(public: &SignPublicKey, message: &[u8], signature: &Signature) -> Result<bool, CryptoError> {
    let vk = ed25519_dalek::VerifyingKey::from_bytes(&public.0).map_err(|e| decode_err("signing public key", e))?;
    let bytes: [u8; SIGNATURE_LEN] = signature
        .0
        .as_slice()
        .try_into()
        .map_err(|_| decode_err("signature", format!("expected {SIGNATURE_LEN} bytes, got {}", signature.0.len())))?;
    let sig = ed25519_dalek::Signature::from_bytes(&bytes);
    Ok(vk.verify(message, &sig).is_ok())
}

/// A per-file AES-256 key.
#[derive(Clone, PartialEq, Eq)]
pub struct FileKey(pub [u8; FILE_KEY_LEN]);

impl fmt::Debug for FileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FileKey(..)")
    }
}

impl FileKey {
    pub fn generate() -> Result<FileKey, CryptoError> {
        random_bytes().map(FileKey)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<FileKey, CryptoError> {
        bytes
            .try_into()
            .map(FileKey)
            .map_err(|_| decode_err("file key", format!("expected {FILE_KEY_LEN} bytes, got {}", bytes.len())))
    }
}

/// AES-256-GCM output.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SealedBlob {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedBlob {
    /// `nonce ‖ ciphertext ‖ tag`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SealedBlob, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(decode_err("sealed blob", format!("{} bytes is shorter than nonce and tag", bytes.len())));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(SealedBlob {
            nonce: nonce.try_into().expect("split at NONCE_LEN"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("split at TAG_LEN"),
        })
    }
}

pub fn aead_seal(key: &FileKey, plaintext: &[u8], aad: &[u8]) -> Result<SealedBlob, CryptoError> {
    let nonce: [u8; NONCE_LEN] = random_bytes()?;
    let cipher = Aes256Gcm::new((&key.0).into());
    let mut out = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .map_err(|_| CryptoError::Entropy("aes-gcm refused plaintext length".into()))?;
    let tag_start = out.len() - TAG_LEN;
    let tag: [u8; TAG_LEN] = out[tag_start..].try_into().expect("gcm appends a 16-byte tag");
    out.truncate(tag_start);
    Ok(SealedBlob { nonce, ciphertext: out, tag })
}

pub fn aead_open(key: &FileKey, blob: &SealedBlob, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new((&key.0).into());
    let mut msg = Vec::with_capacity(blob.ciphertext.len() + TAG_LEN);
    msg.extend_from_slice(&blob.ciphertext);
    msg.extend_from_slice(&blob.tag);
    cipher
        .decrypt(Nonce::from_slice(&blob.nonce), Payload { msg: &msg, aad })
        .map_err(|_| CryptoError::Decrypt)
}

/// A file key sealed to one recipient's encryption public key.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct WrappedKey {
    pub recipient_id: String,
    #[serde(with = "hexser::vec")]
    pub wrapped_bytes: Vec<u8>,
}

fn wrapping_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> FileKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; FILE_KEY_LEN];
    hk.expand(WRAP_INFO, &mut okm).expect("32 bytes is a valid HKDF output length");
    FileKey(okm)
}

pub fn wrap_file_key(recipient_id: &str, recipient: &EncPublicKey, file_key: &FileKey) -> Result<WrappedKey, CryptoError> {
    let ephemeral = x25519_dalek::StaticSecret::from(random_bytes::<32>()?);
    let ephemeral_public = x25519_dalek::PublicKey::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    if !shared.was_contributory() {
        return Err(decode_err("encryption public key", "low-order point"));
    }
    let key = wrapping_key(shared.as_bytes(), &ephemeral_public, &recipient.0);
    let mut aad = [0u8; 64];
    aad[..32].copy_from_slice(&ephemeral_public);
    aad[32..].copy_from_slice(&recipient.0);
    let sealed = aead_seal(&key, &file_key.0, &aad)?;

    let mut wrapped_bytes = Vec::with_capacity(WRAPPED_LEN);
    wrapped_bytes.extend_from_slice(&ephemeral_public);
    wrapped_bytes.extend_from_slice(&sealed.to_bytes());
    Ok(WrappedKey { recipient_id: recipient_id.to_string(), wrapped_bytes })
}

pub fn unwrap_file_key(private: &EncPrivateKey, wrapped: &WrappedKey) -> Result<FileKey, CryptoError> {
    let bytes = &wrapped.wrapped_bytes;
    if bytes.len() != WRAPPED_LEN {
        return Err(decode_err("wrapped key", format!("expected {WRAPPED_LEN} bytes, got {}", bytes.len())));
    }
    let ephemeral_public: [u8; 32] = bytes[..32].try_into().expect("length checked");
    let secret = x25519_dalek::StaticSecret::from(private.0);
    let own_public = x25519_dalek::PublicKey::from(&secret).to_bytes();
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(ephemeral_public));
    if !shared.was_contributory() {
        return Err(CryptoError::Decrypt);
    }
    let key = wrapping_key(shared.as_bytes(), &ephemeral_public, &own_public);
    let mut aad = [0u8; 64];
    aad[..32].copy_from_slice(&ephemeral_public);
    aad[32..].copy_from_slice(&own_public);
    let sealed = SealedBlob::from_bytes(&bytes[32..])?;
    let raw = aead_open(&key, &sealed, &aad)?;
    FileKey::from_slice(&raw)
}
