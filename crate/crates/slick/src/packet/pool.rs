//! Fixed-slot packet buffer pools.
//!
//! A pool owns `capacity` equally sized slots. Each slot is laid out as
//! `[HEADROOM bytes][buf_size data bytes]` and is described by one atomic
//! metadata word holding its state and current frame length. A
//! [`PacketHandle`] is the capability to read and write one allocated slot:
//! it cannot be cloned, so at any moment at most one handle per slot exists,
//! and the slot state machine enforces that even against forged addresses
//! arriving over shared memory.
//!
//! Slot life cycle:
//!
//! ```text
//!   Free --alloc--> Allocated --begin_transit--> InTransit
//!    ^                  |  ^                         |
//!    +------free--------+  +------resolve_transit----+
//! ```
//!
//! `begin_transit` consumes the handle and yields the bare address word that
//! goes into a ring; `resolve_transit` is the only way to mint a handle from
//! such a word, and it refuses anything that is not byte-exactly the data
//! address of a slot currently in transit. A double free, a replayed ring
//! word, or a pointer into the middle of a buffer all fail the state
//! transition instead of aliasing live memory.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::RegionTag;

/// Bytes reserved in front of every buffer's data area, mirroring the mbuf
/// convention of the I/O stack this models.
pub const HEADROOM: usize = 128;

const STATE_FREE: u64 = 0;
const STATE_ALLOCATED: u64 = 1;
const STATE_IN_TRANSIT: u64 = 2;

const LEN_MASK: u64 = 0xffff_ffff;
const STATE_SHIFT: u32 = 32;

/// Why an address word could not be resolved into a packet handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ResolveFault {
    #[error("address is not inside this pool")]
    OutsidePool,
    #[error("address does not match any slot's data offset")]
    Misaligned,
    #[error("slot is not in transit")]
    NotInTransit,
    #[error("slot metadata declares a length larger than the buffer")]
    LengthOutOfRange,
}

/// Why a pool operation on an existing handle failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PoolFault {
    #[error("slot is not allocated (double free or forged handle)")]
    NotAllocated,
    #[error("requested length exceeds the buffer size")]
    LengthExceedsBuffer,
}

/// Exclusive capability to one allocated slot.
///
/// Deliberately neither `Clone` nor `Copy`: passing a packet on means giving
/// it up. Freeing and ring transfer consume the handle by value.
#[derive(Debug, PartialEq, Eq)]
pub struct PacketHandle {
    pool_id: u32,
    slot: u32,
    addr: u64,
}

impl PacketHandle {
    /// Virtual address of the first data byte.
    pub fn addr(&self) -> u64 {
        self.addr
    }

    pub fn pool_id(&self) -> u32 {
        self.pool_id
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }
}

/// Point-in-time pool accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub capacity: u32,
    pub free: u32,
    pub allocs: u64,
    pub frees: u64,
    /// Allocation attempts that found the pool empty and dropped.
    pub exhausted: u64,
}

/// Observable state of a slot, for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Allocated,
    InTransit,
}

/// Backing storage: one contiguous allocation accessed through a raw
/// pointer.
///
/// Safety invariant: a slot's data bytes are only touched through the
/// `PacketHandle` holding that slot, and at most one such handle exists at a
/// time (enforced by the slot state machine). Distinct slots never overlap,
/// so concurrent access to different slots is race free.
struct Backing {
    ptr: *mut u8,
    len: usize,
}

unsafe impl Send for Backing {}
unsafe impl Sync for Backing {}

impl Backing {
    fn new(len: usize) -> Self {
        let mut v = vec![0u8; len];
        let ptr = v.as_mut_ptr();
        std::mem::forget(v);
        Backing { ptr, len }
    }
}

impl Drop for Backing {
    fn drop(&mut self) {
        unsafe {
            drop(Vec::from_raw_parts(self.ptr, self.len, self.len));
        }
    }
}

/// A pool of fixed-size packet buffers in one memory region.
pub struct PacketPool {
    id: u32,
    tag: RegionTag,
    base: u64,
    capacity: u32,
    buf_size: u32,
    stride: u64,
    backing: Backing,
    meta: Box<[AtomicU64]>,
    free_list: Mutex<Vec<u32>>,
    allocs: AtomicU64,
    frees: AtomicU64,
    exhausted: AtomicU64,
}

impl PacketPool {
    fn stride_for(buf_size: u32) -> u64 {
        // Keep slots cache-line aligned.
        ((HEADROOM as u64 + buf_size as u64) + 63) & !63
    }

    /// Region bytes a pool with these parameters occupies.
    pub fn footprint(capacity: u32, buf_size: u32) -> u64 {
        Self::stride_for(buf_size) * capacity as u64
    }

    pub(super) fn new(id: u32, tag: RegionTag, base: u64, capacity: u32, buf_size: u32) -> Self {
        assert!(capacity > 0, "pool must have at least one slot");
        assert!(buf_size > 0, "buffers must be non-empty");
        let stride = Self::stride_for(buf_size);
        let meta = (0..capacity)
            .map(|_| AtomicU64::new(STATE_FREE << STATE_SHIFT))
            .collect();
        PacketPool {
            id,
            tag,
            base,
            capacity,
            buf_size,
            stride,
            backing: Backing::new((stride * capacity as u64) as usize),
            meta,
            free_list: Mutex::new((0..capacity).rev().collect()),
            allocs: AtomicU64::new(0),
            frees: AtomicU64::new(0),
            exhausted: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn tag(&self) -> RegionTag {
        self.tag
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn buf_size(&self) -> u32 {
        self.buf_size
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    fn data_addr(&self, slot: u32) -> u64 {
        self.base + self.stride * slot as u64 + HEADROOM as u64
    }

    /// Allocate a buffer with length 0, or `None` if the pool is empty.
    ///
    /// A poll-mode data path must never block: when there is no buffer the
    /// packet is dropped and the exhaustion counter advances.
    pub fn alloc(&self) -> Option<PacketHandle> {
        let slot = {
            let mut list = self.free_list.lock().unwrap();
            match list.pop() {
                Some(s) => s,
                None => {
                    drop(list);
                    self.exhausted.fetch_add(1, Ordering::Relaxed);
                    return None;
                }
            }
        };
        self.meta[slot as usize].store(STATE_ALLOCATED << STATE_SHIFT, Ordering::Release);
        self.allocs.fetch_add(1, Ordering::Relaxed);
        Some(PacketHandle {
            pool_id: self.id,
            slot,
            addr: self.data_addr(slot),
        })
    }

    /// Return a buffer to the pool, consuming the handle.
    ///
    /// Fails only when the slot is not in the allocated state, which cannot
    /// happen through handles this pool issued; it means the handle was
    /// forged or the metadata was corrupted, so the free is refused rather
    /// than corrupting the free list.
    pub fn free(&self, handle: PacketHandle) -> Result<(), PoolFault> {
        let meta = &self.meta[handle.slot as usize];
        let mut cur = meta.load(Ordering::Acquire);
        loop {
            if cur >> STATE_SHIFT != STATE_ALLOCATED {
                return Err(PoolFault::NotAllocated);
            }
            match meta.compare_exchange_weak(
                cur,
                STATE_FREE << STATE_SHIFT,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        self.free_list.lock().unwrap().push(handle.slot);
        self.frees.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Current frame length of the handle's buffer.
    pub fn len(&self, handle: &PacketHandle) -> usize {
        (self.meta[handle.slot as usize].load(Ordering::Acquire) & LEN_MASK) as usize
    }

    /// Set the frame length; must not exceed the buffer size.
    pub fn set_len(&self, handle: &mut PacketHandle, len: usize) -> Result<(), PoolFault> {
        if len > self.buf_size as usize {
            return Err(PoolFault::LengthExceedsBuffer);
        }
        let meta = &self.meta[handle.slot as usize];
        let cur = meta.load(Ordering::Acquire);
        meta.store((cur & !LEN_MASK) | len as u64, Ordering::Release);
        Ok(())
    }

    fn slot_data_ptr(&self, slot: u32) -> *mut u8 {
        let off = self.stride * slot as u64 + HEADROOM as u64;
        // Slots are carved from the backing allocation, so this stays in
        // bounds by construction.
        unsafe { self.backing.ptr.add(off as usize) }
    }

    /// The frame bytes of an allocated buffer.
    pub fn data<'a>(&'a self, handle: &'a PacketHandle) -> &'a [u8] {
        debug_assert_eq!(handle.pool_id, self.id);
        let len = self.len(handle);
        // One handle per slot exists; `&self` access through it is unique.
        unsafe { std::slice::from_raw_parts(self.slot_data_ptr(handle.slot), len) }
    }

    /// Mutable access to the frame bytes.
    pub fn data_mut<'a>(&'a self, handle: &'a mut PacketHandle) -> &'a mut [u8] {
        debug_assert_eq!(handle.pool_id, self.id);
        let len = self.len(handle);
        unsafe { std::slice::from_raw_parts_mut(self.slot_data_ptr(handle.slot), len) }
    }

    /// Allocate and fill a buffer with `frame`.
    pub fn alloc_frame(&self, frame: &[u8]) -> Option<PacketHandle> {
        if frame.len() > self.buf_size as usize {
            return None;
        }
        let mut h = self.alloc()?;
        self.set_len(&mut h, frame.len()).expect("checked above");
        self.data_mut(&mut h).copy_from_slice(frame);
        Some(h)
    }

    /// Consume the handle for ring transfer, yielding the bare address word.
    ///
    /// After this only `resolve_transit` can revive the slot.
    pub fn begin_transit(&self, handle: PacketHandle) -> Result<u64, PoolFault> {
        let meta = &self.meta[handle.slot as usize];
        let mut cur = meta.load(Ordering::Acquire);
        loop {
            if cur >> STATE_SHIFT != STATE_ALLOCATED {
                return Err(PoolFault::NotAllocated);
            }
            let next = (cur & LEN_MASK) | (STATE_IN_TRANSIT << STATE_SHIFT);
            match meta.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return Ok(handle.addr),
                Err(actual) => cur = actual,
            }
        }
    }

    /// Mint a handle from an address word received over untrusted shared
    /// memory. The caller must already have validated the word against the
    /// enclave bounds; this checks everything the pool itself can check:
    ///
    /// * the address names a byte range this pool actually carved out,
    /// * it is exactly a slot's data address, not an interior pointer,
    /// * that slot is in transit (each transit word resolves at most once),
    /// * the recorded frame length fits the buffer.
    pub fn resolve_transit(&self, addr: u64) -> Result<PacketHandle, ResolveFault> {
        if addr < self.base {
            return Err(ResolveFault::OutsidePool);
        }
        let off = addr - self.base;
        let slot = off / self.stride;
        if slot >= self.capacity as u64 {
            return Err(ResolveFault::OutsidePool);
        }
        if off % self.stride != HEADROOM as u64 {
            return Err(ResolveFault::Misaligned);
        }
        let slot = slot as u32;
        let meta = &self.meta[slot as usize];
        let mut cur = meta.load(Ordering::Acquire);
        loop {
            if cur >> STATE_SHIFT != STATE_IN_TRANSIT {
                return Err(ResolveFault::NotInTransit);
            }
            if cur & LEN_MASK > self.buf_size as u64 {
                return Err(ResolveFault::LengthOutOfRange);
            }
            let next = (cur & LEN_MASK) | (STATE_ALLOCATED << STATE_SHIFT);
            match meta.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => {
                    return Ok(PacketHandle {
                        pool_id: self.id,
                        slot,
                        addr,
                    })
                }
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn slot_state(&self, slot: u32) -> SlotState {
        match self.meta[slot as usize].load(Ordering::Acquire) >> STATE_SHIFT {
            STATE_FREE => SlotState::Free,
            STATE_ALLOCATED => SlotState::Allocated,
            _ => SlotState::InTransit,
        }
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            capacity: self.capacity,
            free: self.free_list.lock().unwrap().len() as u32,
            allocs: self.allocs.load(Ordering::Relaxed),
            frees: self.frees.load(Ordering::Relaxed),
            exhausted: self.exhausted.load(Ordering::Relaxed),
        }
    }

    /// Buffers currently outside the free list.
    pub fn in_flight(&self) -> u32 {
        self.capacity - self.free_list.lock().unwrap().len() as u32
    }

    /// Fault injection for tests: fabricate a handle without allocating.
    #[doc(hidden)]
    pub fn forge_handle(&self, slot: u32) -> PacketHandle {
        PacketHandle {
            pool_id: self.id,
            slot,
            addr: self.data_addr(slot),
        }
    }

    /// Fault injection for tests: overwrite a slot's metadata word as a
    /// host attacker could.
    #[doc(hidden)]
    pub fn poke_meta(&self, slot: u32, state: SlotState, len: u64) {
        let state = match state {
            SlotState::Free => STATE_FREE,
            SlotState::Allocated => STATE_ALLOCATED,
            SlotState::InTransit => STATE_IN_TRANSIT,
        };
        self.meta[slot as usize].store((state << STATE_SHIFT) | len, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{MemoryDomain, RegionTag};
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn pool(capacity: u32, buf_size: u32) -> Arc<PacketPool> {
        MemoryDomain::with_trusted_bytes(1 << 20).new_pool(RegionTag::Untrusted, capacity, buf_size)
    }

    #[test]
    fn data_area_sits_headroom_bytes_into_the_slot() {
        let p = pool(4, 1000);
        let h = p.alloc().unwrap();
        assert_eq!((h.addr() - p.base()) % PacketPool::stride_for(1000), HEADROOM as u64);
        p.free(h).unwrap();
    }

    #[test]
    fn alloc_drops_when_exhausted_and_recovers() {
        let p = pool(2, 64);
        let a = p.alloc().unwrap();
        let b = p.alloc().unwrap();
        assert!(p.alloc().is_none());
        assert!(p.alloc().is_none());
        assert_eq!(p.stats().exhausted, 2);
        p.free(a).unwrap();
        let c = p.alloc().unwrap();
        assert_eq!(p.stats().exhausted, 2);
        p.free(b).unwrap();
        p.free(c).unwrap();
        assert_eq!(p.stats().free, 2);
    }

    #[test]
    fn double_free_is_detected() {
        let p = pool(2, 64);
        let h = p.alloc().unwrap();
        let slot = h.slot();
        p.free(h).unwrap();
        let forged = p.forge_handle(slot);
        assert_eq!(p.free(forged), Err(PoolFault::NotAllocated));
        // The free list still holds exactly two distinct slots.
        let a = p.alloc().unwrap();
        let b = p.alloc().unwrap();
        assert_ne!(a.slot(), b.slot());
        assert!(p.alloc().is_none());
        p.free(a).unwrap();
        p.free(b).unwrap();
    }

    #[test]
    fn set_len_bounds_and_round_trip() {
        let p = pool(1, 100);
        let mut h = p.alloc().unwrap();
        assert_eq!(p.len(&h), 0);
        assert_eq!(p.set_len(&mut h, 101), Err(PoolFault::LengthExceedsBuffer));
        p.set_len(&mut h, 100).unwrap();
        p.data_mut(&mut h).copy_from_slice(&[0xab; 100]);
        assert_eq!(p.data(&h), &[0xab; 100][..]);
        p.free(h).unwrap();
    }

    #[test]
    fn transit_round_trip_preserves_bytes_and_len() {
        let p = pool(2, 64);
        let h = p.alloc_frame(b"hello ring").unwrap();
        let addr = h.addr();
        let word = p.begin_transit(h).unwrap();
        assert_eq!(word, addr);
        let h2 = p.resolve_transit(word).unwrap();
        assert_eq!(p.data(&h2), b"hello ring");
        p.free(h2).unwrap();
    }

    #[test]
    fn transit_word_resolves_exactly_once() {
        let p = pool(2, 64);
        let h = p.alloc_frame(b"once").unwrap();
        let word = p.begin_transit(h).unwrap();
        let h2 = p.resolve_transit(word).unwrap();
        assert_eq!(p.resolve_transit(word), Err(ResolveFault::NotInTransit));
        p.free(h2).unwrap();
    }

    #[test]
    fn resolve_rejects_foreign_and_interior_addresses() {
        let p = pool(4, 64);
        let h = p.alloc_frame(b"x").unwrap();
        let word = p.begin_transit(h).unwrap();
        assert_eq!(p.resolve_transit(0), Err(ResolveFault::OutsidePool));
        assert_eq!(
            p.resolve_transit(p.base() + PacketPool::footprint(4, 64) + 64),
            Err(ResolveFault::OutsidePool)
        );
        assert_eq!(p.resolve_transit(word + 1), Err(ResolveFault::Misaligned));
        assert_eq!(p.resolve_transit(word - 1), Err(ResolveFault::Misaligned));
        // A correctly aligned slot that is not in transit.
        let other = p.alloc().unwrap();
        let other_addr = other.addr();
        assert_eq!(
            p.resolve_transit(other_addr),
            Err(ResolveFault::NotInTransit)
        );
        p.free(other).unwrap();
        let h = p.resolve_transit(word).unwrap();
        p.free(h).unwrap();
    }

    #[test]
    fn forged_oversized_length_is_rejected_at_resolve() {
        let p = pool(1, 64);
        let h = p.alloc_frame(b"abc").unwrap();
        let slot = h.slot();
        let word = p.begin_transit(h).unwrap();
        // The host rewrites the metadata to claim a giant frame.
        p.poke_meta(slot, SlotState::InTransit, 65);
        assert_eq!(
            p.resolve_transit(word),
            Err(ResolveFault::LengthOutOfRange)
        );
    }

    #[test]
    fn concurrent_alloc_free_conserves_buffers() {
        let p = pool(64, 64);
        let mut threads = Vec::new();
        for _ in 0..4 {
            let p = Arc::clone(&p);
            threads.push(std::thread::spawn(move || {
                for _ in 0..10_000 {
                    if let Some(h) = p.alloc() {
                        p.free(h).unwrap();
                    }
                }
            }));
        }
        for t in threads {
            t.join().unwrap();
        }
        let s = p.stats();
        assert_eq!(s.free, 64);
        assert_eq!(s.allocs, s.frees);
    }

    proptest! {
        // Conservation: however allocation and free interleave,
        // allocs - frees == buffers outside the free list, and every live
        // handle refers to a distinct slot.
        #[test]
        fn conservation_invariant(ops in proptest::collection::vec(any::<bool>(), 1..200)) {
            let p = pool(8, 32);
            let mut live: Vec<PacketHandle> = Vec::new();
            for op in ops {
                if op {
                    if let Some(h) = p.alloc() {
                        live.push(h);
                    }
                } else if let Some(h) = live.pop() {
                    p.free(h).unwrap();
                }
                let s = p.stats();
                prop_assert_eq!(s.allocs - s.frees, live.len() as u64);
                prop_assert_eq!(p.in_flight() as usize, live.len());
                let mut slots: Vec<u32> = live.iter().map(|h| h.slot()).collect();
                slots.sort_unstable();
                slots.dedup();
                prop_assert_eq!(slots.len(), live.len());
            }
            for h in live {
                p.free(h).unwrap();
            }
            prop_assert_eq!(p.stats().free, 8);
        }
    }
}
