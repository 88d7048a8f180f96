//! Canonical byte encoding shared by signatures and the wire codec.
//!
//! Values are rendered as compact JSON with object keys in lexicographic
//! order, unsigned integers in plain decimal and byte fields as lowercase
//! hex strings (see the `hex::serde` field attributes on the types).

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Encodes `value` canonically. Equal values always yield equal bytes,
/// independent of struct field declaration order.
pub fn to_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // `serde_json::Value` stores objects in a BTreeMap, which sorts keys.
    let tree = serde_json::to_value(value).expect("canonical values are always representable");
    serde_json::to_vec(&tree).expect("serializing a json tree cannot fail")
}

pub fn from_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}
