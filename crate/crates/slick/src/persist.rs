//! Sealed persistence of runtime state.
//!
//! Middlebox state (counters, sequence numbers, replay windows) must survive
//! restarts without ever touching disk in the clear. A state file is a
//! single sealed blob:
//!
//! ```text
//! magic "SLKS" | version: u16 LE | nonce: 12 bytes | ciphertext | tag: 16 bytes
//! ```
//!
//! The header is authenticated as associated data and the nonce is drawn
//! fresh from the system RNG for every seal, so rewriting the file never
//! reuses a nonce under the same key. Files are replaced atomically (write
//! to a sibling temporary file, then rename), so a crash mid-write leaves
//! the previous state intact rather than a torn file.

use std::io::Write;
use std::path::Path;

use rand::RngCore;

use crate::crypto::{Gcm256, TAG_LEN};

const MAGIC: &[u8; 4] = b"SLKS";
const VERSION: u16 = 1;
const NONCE_LEN: usize = 12;
const HEADER_LEN: usize = 4 + 2 + NONCE_LEN;
const MIN_LEN: usize = HEADER_LEN + TAG_LEN;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("state file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a sealed state file")]
    Malformed,
    #[error("sealed state version {0} is not supported")]
    VersionMismatch(u16),
    #[error("sealed state failed authentication")]
    AuthFailure,
}

/// Seal `plaintext` under `key` into the on-disk blob format.
pub fn seal_blob(key: &[u8; 32], plaintext: &[u8]) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    seal_blob_with_nonce(key, &nonce, plaintext)
}

fn seal_blob_with_nonce(key: &[u8; 32], nonce: &[u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MIN_LEN + plaintext.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(nonce);
    let aad: [u8; 6] = out[..6].try_into().unwrap();
    let (ct, tag) = Gcm256::new(key).seal(nonce, &aad, plaintext);
    out.extend_from_slice(&ct);
    out.extend_from_slice(&tag);
    out
}

/// Open a sealed blob. Anything that is not an authentic, current-version
/// blob under `key` is refused with the most specific error available.
pub fn unseal_blob(key: &[u8; 32], blob: &[u8]) -> Result<Vec<u8>, PersistError> {
    if blob.len() < MIN_LEN || &blob[..4] != MAGIC {
        return Err(PersistError::Malformed);
    }
    let version = u16::from_le_bytes(blob[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(PersistError::VersionMismatch(version));
    }
    let nonce = &blob[6..HEADER_LEN];
    let aad = &blob[..6];
    let ct = &blob[HEADER_LEN..blob.len() - TAG_LEN];
    let tag: [u8; TAG_LEN] = blob[blob.len() - TAG_LEN..].try_into().unwrap();
    Gcm256::new(key)
        .open(nonce, aad, ct, &tag)
        .map_err(|_| PersistError::AuthFailure)
}

/// Seal `plaintext` and atomically replace the file at `path`.
pub fn seal_to_path(key: &[u8; 32], path: &Path, plaintext: &[u8]) -> Result<(), PersistError> {
    let blob = seal_blob(key, plaintext);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(&blob)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| PersistError::Io(e.error))?;
    Ok(())
}

/// Read and unseal the file at `path`.
pub fn unseal_from_path(key: &[u8; 32], path: &Path) -> Result<Vec<u8>, PersistError> {
    let blob = std::fs::read(path)?;
    unseal_blob(key, &blob)
}
