//! Content fingerprints used to tie artifacts together.
//!
//! A fine-tuned checkpoint is only valid with the discretizer it was trained
//! against, and a report should be traceable to its exact inputs. Fingerprints
//! are hex-encoded SHA-256 digests.

use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Incremental SHA-256 fingerprint builder.
#[derive(Default)]
pub struct Fingerprint {
    hasher: Sha256,
}

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    pub fn update_str(&mut self, s: &str) {
        // Length-prefix so that field boundaries are unambiguous.
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
    }

    pub fn update_u64(&mut self, v: u64) {
        self.hasher.update(v.to_le_bytes());
    }

    pub fn update_f64(&mut self, v: f64) {
        self.hasher.update(v.to_le_bytes());
    }

    pub fn finish(self) -> String {
        hex(&self.hasher.finalize())
    }
}

/// SHA-256 of a byte slice.
pub fn of_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// SHA-256 of a file's contents.
pub fn of_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        // SHA-256("abc")
        assert_eq!(
            of_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn length_prefix_separates_fields() {
        let mut a = Fingerprint::new();
        a.update_str("ab");
        a.update_str("c");
        let mut b = Fingerprint::new();
        b.update_str("a");
        b.update_str("bc");
        assert_ne!(a.finish(), b.finish());
    }
}
