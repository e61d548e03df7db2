//! SHA-256 based MAC and key derivation helpers.

use sha2::{Digest, Sha256};

pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

/// HMAC-SHA256 over `message` under `key` (any key length).
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut block_key = [0u8; 64];
    if key.len() > 64 {
        block_key[..32].copy_from_slice(&sha256(key));
    } else {
        block_key[..key.len()].copy_from_slice(key);
    }
    let mut inner = Sha256::new();
    let ipad: Vec<u8> = block_key.iter().map(|b| b ^ 0x36).collect();
    inner.update(&ipad);
    inner.update(message);
    let inner_hash = inner.finalize();

    let mut outer = Sha256::new();
    let opad: Vec<u8> = block_key.iter().map(|b| b ^ 0x5c).collect();
    outer.update(&opad);
    outer.update(inner_hash);
    outer.finalize().into()
}

/// Derive a 32 byte key from `root` for the given label and context, with
/// domain separation between labels and between context values.
///
/// This is an extract-then-expand construction: the root secret is first
/// bound to a fixed salt, then the label and context are folded in with
/// length framing so that no two distinct (label, context) pairs can collide.
pub fn derive_key(root: &[u8], label: &str, context: &[u8]) -> [u8; 32] {
    let prk = hmac_sha256(b"slick.kdf.v1", root);
    let mut info = Vec::with_capacity(label.len() + context.len() + 9);
    info.extend_from_slice(&(label.len() as u32).to_le_bytes());
    info.extend_from_slice(label.as_bytes());
    info.extend_from_slice(&(context.len() as u32).to_le_bytes());
    info.extend_from_slice(context);
    info.push(0x01);
    hmac_sha256(&prk, &info)
}
