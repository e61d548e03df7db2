//! Cryptographic primitives used by the sealing channel, the persistence
//! layer and the attestation protocol.
//!
//! Everything here is deterministic and side-effect free. Randomness (nonce
//! and key generation) lives with the callers so that tests can drive these
//! primitives with fixed inputs.

mod aes;
mod gcm;
mod hash;

pub use aes::Aes256;
pub use gcm::{AuthError, Gcm256, TAG_LEN};
pub use hash::{derive_key, hmac_sha256, sha256};
