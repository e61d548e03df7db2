//! The secure data path: copying packets into enclave memory, and sealing
//! and unsealing whole frames between enclaves.
//!
//! A sealed frame looks like:
//!
//! ```text
//! sa_id: u32 LE | seq: u64 LE | ciphertext (same length as the frame) | tag: 16 bytes
//! ```
//!
//! The cipher is AES-256-GCM. The nonce is the sequence number (little
//! endian, zero padded to 12 bytes); the association id and sequence number
//! are authenticated as associated data, so neither can be swapped without
//! failing the tag. Sequence numbers start at 1 and never repeat for an
//! association: when the counter is exhausted the instance stops rather
//! than reuse a nonce. The receiver enforces a 64 entry anti-replay window,
//! committed only after authentication so forged sequence numbers cannot
//! poison it.

use std::sync::Arc;

use crate::crypto::{sha256, Gcm256, TAG_LEN};
use crate::packet::{PacketHandle, PacketPool};

use super::{BuildError, Element, ElementInit, ExecCtx, Ports};

/// Header bytes in front of the ciphertext.
pub const SEAL_HEADER_LEN: usize = 12;
/// Total expansion of a sealed frame over the plaintext.
pub const SEAL_OVERHEAD: usize = SEAL_HEADER_LEN + TAG_LEN;

/// Association ids are the first four bytes of the hash of the name.
pub fn sa_id_for(name: &str) -> u32 {
    let h = sha256(name.as_bytes());
    u32::from_le_bytes([h[0], h[1], h[2], h[3]])
}

fn nonce_for(seq: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..8].copy_from_slice(&seq.to_le_bytes());
    n
}

fn aad_for(sa_id: u32, seq: u64) -> [u8; 12] {
    let mut a = [0u8; 12];
    a[..4].copy_from_slice(&sa_id.to_le_bytes());
    a[4..].copy_from_slice(&seq.to_le_bytes());
    a
}

/// Why the anti-replay window refused a sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayVerdict {
    Ok,
    /// Older than anything the window still tracks.
    Stale,
    /// Already seen.
    Replay,
}

/// Sliding 64 entry anti-replay window over sequence numbers starting at 1.
///
/// `check` is a pure query; `commit` advances the window. Callers must only
/// commit sequence numbers that passed authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayWindow {
    max: u64,
    /// Bit `i` set means `max - i` was seen.
    bitmap: u64,
}

pub const REPLAY_WINDOW: u64 = 64;

impl Default for ReplayWindow {
    fn default() -> Self {
        ReplayWindow { max: 0, bitmap: 0 }
    }
}

impl ReplayWindow {
    pub fn check(&self, seq: u64) -> ReplayVerdict {
        if seq == 0 {
            return ReplayVerdict::Stale;
        }
        if seq > self.max {
            return ReplayVerdict::Ok;
        }
        let diff = self.max - seq;
        if diff >= REPLAY_WINDOW {
            ReplayVerdict::Stale
        } else if self.bitmap & (1 << diff) != 0 {
            ReplayVerdict::Replay
        } else {
            ReplayVerdict::Ok
        }
    }

    pub fn commit(&mut self, seq: u64) {
        debug_assert_eq!(self.check(seq), ReplayVerdict::Ok);
        if seq > self.max {
            let shift = seq - self.max;
            self.bitmap = if shift >= REPLAY_WINDOW {
                0
            } else {
                self.bitmap << shift
            };
            self.bitmap |= 1;
            self.max = seq;
        } else {
            self.bitmap |= 1 << (self.max - seq);
        }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(&self.max.to_le_bytes());
        b[8..].copy_from_slice(&self.bitmap.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != 16 {
            return None;
        }
        Some(ReplayWindow {
            max: u64::from_le_bytes(b[..8].try_into().unwrap()),
            bitmap: u64::from_le_bytes(b[8..].try_into().unwrap()),
        })
    }
}

fn resolve_key(init: &ElementInit, sa_name: &str) -> Result<[u8; 32], BuildError> {
    match init.args.get(1) {
        None => Ok(init.secrets.sa_key(sa_name)),
        Some(arg) => match arg.strip_prefix("hex:") {
            Some(hex_key) => {
                let bytes = hex::decode(hex_key)
                    .map_err(|_| init.err("literal key is not valid hex"))?;
                let key: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| init.err("literal key must be 32 bytes"))?;
                log::warn!(
                    "{}: using a literal key from the configuration; fine for tests, \
                     provision keys through attestation in production",
                    init.name
                );
                Ok(key)
            }
            None => Err(init.err("second argument must be `hex:<64 hex digits>`")),
        },
    }
}

/// Copies packets from host-visible memory into the enclave-private pool.
/// Packets already inside pass through untouched.
struct ToEnclave {
    trusted: Arc<PacketPool>,
}

impl Element for ToEnclave {
    fn class_name(&self) -> &'static str {
        "ToEnclave"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        if packet.pool_id() == self.trusted.id() {
            ctx.emit(0, packet);
            return;
        }
        let Some(src_pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        match self.trusted.alloc_frame(src_pool.data(&packet)) {
            Some(inside) => {
                ctx.release(packet);
                ctx.emit(0, inside);
            }
            None => ctx.drop_packet(packet),
        }
    }
}

pub(super) fn build_to_enclave(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if !init.args.is_empty() {
        return Err(init.err("ToEnclave takes no arguments"));
    }
    Ok(Box::new(ToEnclave {
        trusted: Arc::clone(init.trusted_pool),
    }))
}

/// Seals each frame under its security association and emits the sealed
/// frame in host-visible memory, ready to cross to another process.
struct Seal {
    sa_name: String,
    sa_id: u32,
    gcm: Gcm256,
    next_seq: u64,
    sealed: u64,
    untrusted: Arc<PacketPool>,
}

impl Element for Seal {
    fn class_name(&self) -> &'static str {
        "Seal"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        if self.next_seq == u64::MAX {
            // Continuing would reuse a nonce, which destroys the seal for
            // every packet ever sent; stopping is the only safe option.
            ctx.drop_packet(packet);
            ctx.fail(format!(
                "security association `{}` exhausted its sequence space",
                self.sa_name
            ));
            return;
        }
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let sealed_len = pool.len(&packet) + SEAL_OVERHEAD;
        if sealed_len > self.untrusted.buf_size() as usize {
            ctx.drop_packet(packet);
            return;
        }
        let Some(mut out) = self.untrusted.alloc() else {
            ctx.drop_packet(packet);
            return;
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.sealed += 1;
        let (ct, tag) = self
            .gcm
            .seal(&nonce_for(seq), &aad_for(self.sa_id, seq), pool.data(&packet));
        self.untrusted.set_len(&mut out, sealed_len).expect("checked");
        let buf = self.untrusted.data_mut(&mut out);
        buf[0..4].copy_from_slice(&self.sa_id.to_le_bytes());
        buf[4..12].copy_from_slice(&seq.to_le_bytes());
        buf[12..12 + ct.len()].copy_from_slice(&ct);
        buf[12 + ct.len()..].copy_from_slice(&tag);
        ctx.release(packet);
        ctx.emit(0, out);
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "seq" => Some(self.next_seq.to_string()),
            "sealed" => Some(self.sealed.to_string()),
            "sa_id" => Some(self.sa_id.to_string()),
            _ => None,
        }
    }

    fn write_handler(&mut self, name: &str, value: &str) -> Result<(), String> {
        match name {
            // Test access: position the sequence counter.
            "seq" => {
                self.next_seq = value.parse().map_err(|_| "bad seq".to_string())?;
                Ok(())
            }
            other => Err(format!("no handler `{other}`")),
        }
    }

    fn state_save(&self) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(&self.next_seq.to_le_bytes());
        out.extend_from_slice(&self.sealed.to_le_bytes());
        Some(out)
    }

    fn state_load(&mut self, data: &[u8]) -> Result<(), String> {
        if data.len() != 16 {
            return Err("seal state must be 16 bytes".to_string());
        }
        self.next_seq = u64::from_le_bytes(data[0..8].try_into().unwrap());
        self.sealed = u64::from_le_bytes(data[8..16].try_into().unwrap());
        Ok(())
    }
}

pub(super) fn build_seal(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let Some(sa_name) = init.args.first() else {
        return Err(init.err("Seal needs a security association name"));
    };
    if init.args.len() > 2 {
        return Err(init.err("Seal takes at most two arguments"));
    }
    let key = resolve_key(init, sa_name)?;
    Ok(Box::new(Seal {
        sa_name: sa_name.clone(),
        sa_id: sa_id_for(sa_name),
        gcm: Gcm256::new(&key),
        next_seq: 1,
        sealed: 0,
        untrusted: Arc::clone(init.untrusted_pool),
    }))
}

/// Verifies, replay-checks and decrypts sealed frames into enclave memory.
/// Anything that fails a check is dropped and counted; nothing unverified
/// ever leaves this element.
struct Unseal {
    sa_id: u32,
    gcm: Gcm256,
    window: ReplayWindow,
    trusted: Arc<PacketPool>,
    accepted: u64,
    malformed: u64,
    wrong_sa: u64,
    stale: u64,
    replayed: u64,
    auth_failures: u64,
}

impl Element for Unseal {
    fn class_name(&self) -> &'static str {
        "Unseal"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let verdict = {
            let data = pool.data(&packet);
            self.try_open(data)
        };
        match verdict {
            Ok((seq, plaintext)) => match self.trusted.alloc_frame(&plaintext) {
                Some(inside) => {
                    self.window.commit(seq);
                    self.accepted += 1;
                    ctx.release(packet);
                    ctx.emit(0, inside);
                }
                None => ctx.drop_packet(packet),
            },
            Err(()) => ctx.drop_packet(packet),
        }
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "accepted" => Some(self.accepted.to_string()),
            "malformed" => Some(self.malformed.to_string()),
            "wrong_sa" => Some(self.wrong_sa.to_string()),
            "stale" => Some(self.stale.to_string()),
            "replayed" => Some(self.replayed.to_string()),
            "auth_failures" => Some(self.auth_failures.to_string()),
            _ => None,
        }
    }

    fn state_save(&self) -> Option<Vec<u8>> {
        Some(self.window.to_bytes().to_vec())
    }

    fn state_load(&mut self, data: &[u8]) -> Result<(), String> {
        self.window =
            ReplayWindow::from_bytes(data).ok_or_else(|| "window state must be 16 bytes".to_string())?;
        Ok(())
    }
}

impl Unseal {
    fn try_open(&mut self, data: &[u8]) -> Result<(u64, Vec<u8>), ()> {
        if data.len() < SEAL_OVERHEAD {
            self.malformed += 1;
            return Err(());
        }
        let sa_id = u32::from_le_bytes(data[0..4].try_into().unwrap());
        if sa_id != self.sa_id {
            self.wrong_sa += 1;
            return Err(());
        }
        let seq = u64::from_le_bytes(data[4..12].try_into().unwrap());
        match self.window.check(seq) {
            ReplayVerdict::Stale => {
                self.stale += 1;
                return Err(());
            }
            ReplayVerdict::Replay => {
                self.replayed += 1;
                return Err(());
            }
            ReplayVerdict::Ok => {}
        }
        let ct_end = data.len() - TAG_LEN;
        let tag: [u8; TAG_LEN] = data[ct_end..].try_into().unwrap();
        match self.gcm.open(
            &nonce_for(seq),
            &aad_for(sa_id, seq),
            &data[SEAL_HEADER_LEN..ct_end],
            &tag,
        ) {
            Ok(pt) => Ok((seq, pt)),
            Err(_) => {
                self.auth_failures += 1;
                Err(())
            }
        }
    }
}

pub(super) fn build_unseal(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let Some(sa_name) = init.args.first() else {
        return Err(init.err("Unseal needs a security association name"));
    };
    if init.args.len() > 2 {
        return Err(init.err("Unseal takes at most two arguments"));
    }
    let key = resolve_key(init, sa_name)?;
    Ok(Box::new(Unseal {
        sa_id: sa_id_for(sa_name),
        gcm: Gcm256::new(&key),
        window: ReplayWindow::default(),
        trusted: Arc::clone(init.trusted_pool),
        accepted: 0,
        malformed: 0,
        wrong_sa: 0,
        stale: 0,
        replayed: 0,
        auth_failures: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_accepts_monotonic_and_modest_reordering() {
        let mut w = ReplayWindow::default();
        for seq in [1u64, 2, 3, 7, 5, 6, 4, 100, 90, 37] {
            assert_eq!(w.check(seq), ReplayVerdict::Ok, "seq {seq}");
            w.commit(seq);
        }
        assert_eq!(w.check(100), ReplayVerdict::Replay);
        assert_eq!(w.check(37), ReplayVerdict::Replay);
        assert_eq!(w.check(99), ReplayVerdict::Ok);
    }

    #[test]
    fn window_rejects_replays_and_stale() {
        let mut w = ReplayWindow::default();
        w.commit(1);
        assert_eq!(w.check(1), ReplayVerdict::Replay);
        assert_eq!(w.check(0), ReplayVerdict::Stale);
        w.commit(200);
        // 200 - 64 = 136 is the oldest representable; 136 itself falls off.
        assert_eq!(w.check(137), ReplayVerdict::Ok);
        assert_eq!(w.check(136), ReplayVerdict::Stale);
        assert_eq!(w.check(1), ReplayVerdict::Stale);
        // A huge jump clears the bitmap.
        w.commit(10_000);
        assert_eq!(w.check(9_999), ReplayVerdict::Ok);
        assert_eq!(w.check(10_000), ReplayVerdict::Replay);
    }

    #[test]
    fn window_serialization_round_trips() {
        let mut w = ReplayWindow::default();
        for seq in [3u64, 9, 5, 11] {
            w.commit(seq);
        }
        let restored = ReplayWindow::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(restored, w);
        assert!(ReplayWindow::from_bytes(&[0u8; 15]).is_none());
    }

    #[test]
    fn sa_ids_are_stable_and_distinct() {
        assert_eq!(sa_id_for("sa1"), sa_id_for("sa1"));
        assert_ne!(sa_id_for("sa1"), sa_id_for("sa2"));
    }
}
