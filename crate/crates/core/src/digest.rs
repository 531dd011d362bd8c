//! SHA-256 fingerprint binding a key to the model it marked.

use alloc::string::String;
use core::fmt;
use sha2::{Digest, Sha256};

use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelDigest(pub [u8; 32]);

impl ModelDigest {
    pub fn to_hex(&self) -> String {
        use core::fmt::Write;
        let mut s = String::with_capacity(64);
        for b in self.0 {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    /// Parses 64 lowercase hex characters.
    pub fn from_hex(hex: &str) -> Option<Self> {
        let bytes = hex.as_bytes();
        if bytes.len() != 64 {
            return None;
        }
        let nibble = |c: u8| match c {
            b'0'..=b'9' => Some(c - b'0'),
            b'a'..=b'f' => Some(c - b'a' + 10),
            _ => None,
        };
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks_exact(2).enumerate() {
            out[i] = (nibble(pair[0])? << 4) | nibble(pair[1])?;
        }
        Some(Self(out))
    }

    /// First 8 hex characters, used for liveness banners.
    pub fn short(&self) -> String {
        let mut s = self.to_hex();
        s.truncate(8);
        s
    }
}

impl fmt::Display for ModelDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash of each layer's `fan_in`, `fan_out` (u64 LE), activation code, then
/// its weights and biases as little-endian f64, in layer order.
pub fn model_digest(model: &Model) -> ModelDigest {
    let mut h = Sha256::new();
    for layer in model.layers() {
        h.update((layer.fan_in() as u64).to_le_bytes());
        h.update((layer.fan_out() as u64).to_le_bytes());
        h.update([layer.activation().code()]);
        for v in layer.weights().data().iter().chain(layer.biases().data()) {
            h.update(v.to_le_bytes());
        }
    }
    ModelDigest(h.finalize().into())
}
