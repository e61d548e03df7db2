//! Packet buffers, memory regions and address validation.
//!
//! All packet data lives in one of two tagged regions. The untrusted region
//! models host memory that a compromised OS or hypervisor can read and write
//! at will: NIC queues, shared rings and the buffer pools behind them. The
//! trusted region models enclave memory: it is invisible to the host, and
//! nothing the host hands to the enclave may ever name an address inside it.
//!
//! That last rule is the core defense of this module. A malicious host can
//! place arbitrary 64 bit words in shared rings; if the enclave dereferenced
//! one that pointed into its own region, the host would gain a read or write
//! primitive inside the enclave (a classic Iago attack). Every address that
//! crosses from untrusted to trusted code therefore passes
//! [`EnclaveBounds::validate_address`] before it is resolved, and resolution
//! itself only ever yields buffers that the owning pool actually carved out.
//!
//! Buffer management follows the DPDK mempool shape: fixed-size slots with
//! [`HEADROOM`] bytes reserved in front of the data area, allocation that
//! fails fast instead of blocking when the pool is empty, and per-slot state
//! so that double frees and forged pointers are detected rather than obeyed.

mod pool;
pub mod view;

pub use pool::{
    PacketHandle, PacketPool, PoolFault, PoolStats, ResolveFault, SlotState, HEADROOM,
};

use std::sync::{Arc, Mutex};

/// Default size of the trusted region: the usable enclave page cache on the
/// SGX hardware this models, roughly 94 MiB.
pub const ENCLAVE_REGION_BYTES: u64 = 94 * 1024 * 1024;

/// Virtual base address of the untrusted region.
pub const UNTRUSTED_BASE: u64 = 0x1000_0000;

/// Virtual base address of the trusted region, far from the untrusted one so
/// that no untrusted pool ever sits adjacent to the enclave.
pub const TRUSTED_BASE: u64 = 0x20_0000_0000;

/// Which memory region a pool lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionTag {
    /// Host-visible memory: rings, NIC buffers, anything a compromised host
    /// can read and forge.
    Untrusted,
    /// Enclave-private memory.
    Trusted,
}

/// Outcome of validating an untrusted address range against the enclave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Accepted,
    Rejected,
}

/// The enclave's address range, `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveBounds {
    base: u64,
    size: u64,
}

impl EnclaveBounds {
    /// `base + size` must not wrap; the enclave is a real address range.
    pub fn new(base: u64, size: u64) -> Self {
        assert!(
            base.checked_add(size).is_some(),
            "enclave range must not wrap the address space"
        );
        EnclaveBounds { base, size }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Accept `[addr, addr + len)` only if it shares no byte with the
    /// enclave range.
    ///
    /// Arithmetic overflow of `addr + len` is itself grounds for rejection:
    /// a range that wraps the address space is never something a well-formed
    /// peer produces, and treating it leniently would let `addr + len`
    /// alias low memory.
    pub fn validate_address(&self, addr: u64, len: u64) -> Validation {
        let Some(end) = addr.checked_add(len) else {
            return Validation::Rejected;
        };
        let lo = addr.max(self.base);
        let hi = end.min(self.base + self.size);
        if lo < hi {
            Validation::Rejected
        } else {
            Validation::Accepted
        }
    }
}

/// A pair of tagged regions plus the enclave bounds derived from the trusted
/// one. Pools are carved out of the two regions and registered here.
pub struct MemoryDomain {
    bounds: EnclaveBounds,
    untrusted_cursor: Mutex<u64>,
    trusted_cursor: Mutex<u64>,
    untrusted_end: u64,
    trusted_end: u64,
    pools: Mutex<Vec<Arc<PacketPool>>>,
}

impl MemoryDomain {
    /// A domain whose trusted region has the default enclave size.
    pub fn standard() -> Arc<Self> {
        Self::with_trusted_bytes(ENCLAVE_REGION_BYTES)
    }

    pub fn with_trusted_bytes(trusted_bytes: u64) -> Arc<Self> {
        Arc::new(MemoryDomain {
            bounds: EnclaveBounds::new(TRUSTED_BASE, trusted_bytes),
            untrusted_cursor: Mutex::new(UNTRUSTED_BASE),
            trusted_cursor: Mutex::new(TRUSTED_BASE),
            untrusted_end: TRUSTED_BASE,
            trusted_end: TRUSTED_BASE + trusted_bytes,
            pools: Mutex::new(Vec::new()),
        })
    }

    pub fn bounds(&self) -> EnclaveBounds {
        self.bounds
    }

    /// Carve a new pool out of the given region.
    ///
    /// Panics if the region is exhausted; sizing regions is a deployment
    /// decision made once at startup, not a runtime condition.
    pub fn new_pool(&self, tag: RegionTag, capacity: u32, buf_size: u32) -> Arc<PacketPool> {
        let bytes = PacketPool::footprint(capacity, buf_size);
        let (cursor, end) = match tag {
            RegionTag::Untrusted => (&self.untrusted_cursor, self.untrusted_end),
            RegionTag::Trusted => (&self.trusted_cursor, self.trusted_end),
        };
        let base = {
            let mut cur = cursor.lock().unwrap();
            let base = *cur;
            let next = base
                .checked_add(bytes)
                .filter(|next| *next <= end)
                .unwrap_or_else(|| panic!("{tag:?} region exhausted carving {bytes} bytes"));
            *cur = next;
            base
        };
        let mut pools = self.pools.lock().unwrap();
        let id = pools.len() as u32;
        let pool = Arc::new(PacketPool::new(id, tag, base, capacity, buf_size));
        pools.push(Arc::clone(&pool));
        pool
    }

    pub fn pool_by_id(&self, id: u32) -> Option<Arc<PacketPool>> {
        self.pools.lock().unwrap().get(id as usize).cloned()
    }
}
