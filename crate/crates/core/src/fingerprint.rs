//! Canonical config fingerprints.
//!
//! Two runs are comparable only when their full protocol fingerprints
//! match; every fingerprint is the SHA-256 of a type label plus the
//! canonical (sorted-key) JSON encoding of the value.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex fingerprint (first 16 hex chars of the SHA-256).
pub fn fingerprint<T: Serialize>(label: &str, value: &T) -> String {
    let json = serde_json::to_value(value).expect("fingerprint serialization");
    let canon = serde_json::to_string(&json).expect("canonical json");
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(canon.as_bytes());
    let digest = h.finalize();
    hex16(&digest)
}

/// SHA-256 of raw bytes, full hex. Used for integrity checksums.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex16(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Hash of an f64 tensor's exact bit pattern, for shared-view audits.
pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    hex16(&digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct A {
        x: u32,
        y: String,
    }

    #[test]
    fn stable_across_calls() {
        let a = A { x: 3, y: "q".into() };
        assert_eq!(fingerprint("a", &a), fingerprint("a", &a));
    }

    #[test]
    fn label_distinguishes_types() {
        let a = A { x: 3, y: "q".into() };
        assert_ne!(fingerprint("a", &a), fingerprint("b", &a));
    }

    #[test]
    fn value_changes_change_hash() {
        let a = A { x: 3, y: "q".into() };
        let b = A { x: 4, y: "q".into() };
        assert_ne!(fingerprint("a", &a), fingerprint("a", &b));
    }
}
