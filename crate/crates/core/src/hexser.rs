//! Strict lowercase-hex serde adapters for byte fields.

use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

pub(crate) fn decode_lower(s: &str) -> Result<Vec<u8>, String> {
    if s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(format!("hex must be lowercase: {s:.16}"));
    }
    hex::decode(s).map_err(|e| e.to_string())
}

pub(crate) fn decode_array<const N: usize>(s: &str) -> Result<[u8; N], String> {
    let bytes = decode_lower(s)?;
    let len = bytes.len();
    bytes.try_into().map_err(|_| format!("expected {N} bytes, got {len}"))
}

pub(crate) mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode_lower(&s).map_err(D::Error::custom)
    }
}

pub(crate) mod array {
    use super::*;

    pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        decode_array(&s).map_err(D::Error::custom)
    }
}
