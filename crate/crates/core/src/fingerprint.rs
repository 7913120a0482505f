//! Short content hashes that chain artifacts together.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

pub fn fingerprint_json<T: serde::Serialize>(value: &T) -> String {
    fingerprint(&serde_json::to_vec(value).expect("serializable"))
}

pub fn check(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Fingerprint {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}
