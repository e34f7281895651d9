//! Canonical JSON: sorted object keys, no insignificant whitespace,
//! integers in base 10 and byte fields as lowercase hex.
//!
//! Everything that is hashed or signed goes through [`to_string`], so two
//! implementations that agree on the data model agree on the bytes.

use serde::Serialize;

pub use serde_json::Error;

/// Serializes `value` to canonical JSON.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String, Error> {
    // Round-tripping through `Value` sorts keys: `serde_json::Map` is a BTreeMap.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

/// Serializes `value` to canonical JSON bytes.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, Error> {
    to_string(value).map(String::into_bytes)
}

/// Returns true when `text` is exactly the canonical encoding of the JSON it contains.
pub fn is_canonical(text: &str) -> bool {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(value) => serde_json::to_string(&value).map(|s| s == text).unwrap_or(false),
        Err(_) => false,
    }
}
