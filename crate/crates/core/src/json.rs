//! Canonical JSON: lexicographically sorted object keys, no insignificant
//! whitespace, floats rendered as the shortest string that round-trips.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Serializes `value` canonically.
///
/// Going through `serde_json::Value` sorts every object's keys (the map is a
/// `BTreeMap` without the `preserve_order` feature).
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn canonical_value(value: &serde_json::Value) -> String {
    // Value -> String cannot fail.
    serde_json::to_string(value).expect("value serializes")
}

pub fn from_json<T: DeserializeOwned>(s: &str) -> serde_json::Result<T> {
    serde_json::from_str(s)
}

/// Re-renders an arbitrary JSON document canonically.
pub fn canonicalize(s: &str) -> serde_json::Result<String> {
    let v: serde_json::Value = serde_json::from_str(s)?;
    Ok(canonical_value(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_sorted_and_compact() {
        let mut m = HashMap::new();
        m.insert("zeta", 1.5);
        m.insert("alpha", 0.1);
        assert_eq!(canonical_json(&m).unwrap(), r#"{"alpha":0.1,"zeta":1.5}"#);
    }

    #[test]
    fn floats_shortest_round_trip() {
        let x = 0.1 + 0.2;
        let s = canonical_json(&x).unwrap();
        assert_eq!(s, "0.30000000000000004");
        assert_eq!(from_json::<f64>(&s).unwrap(), x);
    }

    #[test]
    fn canonicalize_reorders() {
        assert_eq!(canonicalize("{ \"b\": [1, 2], \"a\": null }").unwrap(), r#"{"a":null,"b":[1,2]}"#);
    }
}
