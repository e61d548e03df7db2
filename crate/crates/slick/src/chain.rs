//! Lockless rings for chaining packet processors over untrusted shared
//! memory.
//!
//! A chain hands packets from one process's enclave to the next through a
//! single-producer single-consumer ring of bare 64 bit address words. The
//! ring itself lives outside the enclaves, so its contents are adversarial
//! input: the consumer side never trusts a word it dequeues. [`GuardedRx`]
//! wraps a consumer with the full validation pipeline (enclave bounds check,
//! then pool resolution) and counts every rejected word by reason.
//!
//! The ring follows the conventions of high throughput I/O frameworks:
//!
//! * capacity is a power of two and indices wrap by masking, so the hot
//!   path performs no division or remainder operation;
//! * cursors are monotonically increasing u64s; the producer publishes with
//!   a release store and the consumer observes with an acquire load, which
//!   is the entire synchronisation protocol;
//! * each side caches the opposing cursor and only rereads it on apparent
//!   full or empty, keeping steady-state operation free of shared loads;
//! * when a chain spans two runtime instances, the primary creates the ring
//!   by name and the secondary looks it up in the [`RingRegistry`].

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use crate::packet::{EnclaveBounds, PacketHandle, PacketPool, ResolveFault, Validation};

/// Process role in a chained deployment: the primary creates shared rings,
/// secondaries attach to rings the primary already created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Secondary,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "primary" => Ok(Role::Primary),
            "secondary" => Ok(Role::Secondary),
            other => Err(format!("unknown role `{other}` (expected primary or secondary)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("ring `{0}` already exists; only one primary may create it")]
    AlreadyExists(String),
    #[error("ring `{0}` not found; is the primary running?")]
    NotFound(String),
}

/// Why a dequeued word was refused, from first check to last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The word names memory overlapping the enclave: the signature of an
    /// address forging attack.
    EnclaveOverlap,
    /// Not a byte the consumer's pool carved out.
    OutsidePool,
    /// Inside the pool but not a slot's data address.
    Misaligned,
    /// A slot address whose slot is not in transit (stale or replayed word).
    NotInTransit,
    /// Slot metadata declared an impossible frame length.
    LengthOutOfRange,
}

impl RejectReason {
    fn from_resolve(fault: ResolveFault) -> Self {
        match fault {
            ResolveFault::OutsidePool => RejectReason::OutsidePool,
            ResolveFault::Misaligned => RejectReason::Misaligned,
            ResolveFault::NotInTransit => RejectReason::NotInTransit,
            ResolveFault::LengthOutOfRange => RejectReason::LengthOutOfRange,
        }
    }
}

/// Counters for refused ring words. Shared between the data path and stats
/// reporting.
#[derive(Debug, Default)]
pub struct RejectCounters {
    pub enclave_overlap: AtomicU64,
    pub outside_pool: AtomicU64,
    pub misaligned: AtomicU64,
    pub not_in_transit: AtomicU64,
    pub length_out_of_range: AtomicU64,
}

impl RejectCounters {
    fn bump(&self, reason: RejectReason) {
        let counter = match reason {
            RejectReason::EnclaveOverlap => &self.enclave_overlap,
            RejectReason::OutsidePool => &self.outside_pool,
            RejectReason::Misaligned => &self.misaligned,
            RejectReason::NotInTransit => &self.not_in_transit,
            RejectReason::LengthOutOfRange => &self.length_out_of_range,
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.enclave_overlap.load(Ordering::Relaxed)
            + self.outside_pool.load(Ordering::Relaxed)
            + self.misaligned.load(Ordering::Relaxed)
            + self.not_in_transit.load(Ordering::Relaxed)
            + self.length_out_of_range.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> HashMap<&'static str, u64> {
        HashMap::from([
            ("enclave_overlap", self.enclave_overlap.load(Ordering::Relaxed)),
            ("outside_pool", self.outside_pool.load(Ordering::Relaxed)),
            ("misaligned", self.misaligned.load(Ordering::Relaxed)),
            ("not_in_transit", self.not_in_transit.load(Ordering::Relaxed)),
            (
                "length_out_of_range",
                self.length_out_of_range.load(Ordering::Relaxed),
            ),
        ])
    }
}

#[repr(align(64))]
struct CacheAligned<T>(T);

struct RingInner {
    mask: u64,
    slots: Box<[AtomicU64]>,
    /// Next word the consumer will read.
    head: CacheAligned<AtomicU64>,
    /// Next slot the producer will write.
    tail: CacheAligned<AtomicU64>,
    producer_claimed: AtomicBool,
    consumer_claimed: AtomicBool,
}

/// A named single-producer single-consumer ring of u64 words.
#[derive(Clone)]
pub struct Ring {
    inner: Arc<RingInner>,
}

impl std::fmt::Debug for Ring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ring")
            .field("capacity", &self.capacity())
            .field("len", &self.len())
            .finish()
    }
}

impl Ring {
    /// Capacity must be a power of two; masking replaces any remainder
    /// computation on the data path.
    pub fn new(capacity: u64) -> Self {
        assert!(
            capacity.is_power_of_two() && capacity > 0,
            "ring capacity must be a power of two"
        );
        Ring {
            inner: Arc::new(RingInner {
                mask: capacity - 1,
                slots: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
                head: CacheAligned(AtomicU64::new(0)),
                tail: CacheAligned(AtomicU64::new(0)),
                producer_claimed: AtomicBool::new(false),
                consumer_claimed: AtomicBool::new(false),
            }),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.inner.mask + 1
    }

    pub fn len(&self) -> u64 {
        let tail = self.inner.tail.0.load(Ordering::Acquire);
        let head = self.inner.head.0.load(Ordering::Acquire);
        tail.wrapping_sub(head)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Claim the producer side; at most one producer may ever exist.
    pub fn claim_producer(&self) -> Option<RingProducer> {
        self.inner
            .producer_claimed
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()?;
        Some(RingProducer {
            ring: Arc::clone(&self.inner),
            cached_head: Cell::new(0),
        })
    }

    /// Claim the consumer side; at most one consumer may ever exist.
    pub fn claim_consumer(&self) -> Option<RingConsumer> {
        self.inner
            .consumer_claimed
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()?;
        Some(RingConsumer {
            ring: Arc::clone(&self.inner),
            cached_tail: Cell::new(0),
        })
    }
}

/// The single producer endpoint of a [`Ring`].
pub struct RingProducer {
    ring: Arc<RingInner>,
    cached_head: Cell<u64>,
}

impl RingProducer {
    /// Enqueue one word; returns it back if the ring is full (the caller
    /// drops the packet, a full ring never blocks).
    #[inline]
    pub fn enqueue(&self, word: u64) -> Result<(), u64> {
        let r = &*self.ring;
        let tail = r.tail.0.load(Ordering::Relaxed);
        let capacity = r.mask + 1;
        if tail.wrapping_sub(self.cached_head.get()) >= capacity {
            self.cached_head.set(r.head.0.load(Ordering::Acquire));
            if tail.wrapping_sub(self.cached_head.get()) >= capacity {
                return Err(word);
            }
        }
        r.slots[(tail & r.mask) as usize].store(word, Ordering::Relaxed);
        r.tail.0.store(tail.wrapping_add(1), Ordering::Release);
        Ok(())
    }
}

/// The single consumer endpoint of a [`Ring`].
pub struct RingConsumer {
    ring: Arc<RingInner>,
    cached_tail: Cell<u64>,
}

impl RingConsumer {
    /// Dequeue one word, or `None` when the ring is empty.
    #[inline]
    pub fn dequeue(&self) -> Option<u64> {
        let r = &*self.ring;
        let head = r.head.0.load(Ordering::Relaxed);
        if head == self.cached_tail.get() {
            self.cached_tail.set(r.tail.0.load(Ordering::Acquire));
            if head == self.cached_tail.get() {
                return None;
            }
        }
        let word = r.slots[(head & r.mask) as usize].load(Ordering::Relaxed);
        r.head.0.store(head.wrapping_add(1), Ordering::Release);
        Some(word)
    }

    /// Dequeue up to `out.len()` words, returning how many were read.
    pub fn dequeue_burst(&self, out: &mut [u64]) -> usize {
        for (i, slot) in out.iter_mut().enumerate() {
            match self.dequeue() {
                Some(w) => *slot = w,
                None => return i,
            }
        }
        out.len()
    }
}

/// Result of pulling one word through the validation pipeline.
#[derive(Debug, PartialEq, Eq)]
pub enum GuardedPoll {
    /// Ring empty.
    Empty,
    /// A valid packet crossed the boundary.
    Packet(PacketHandle),
    /// The word was refused and counted; keep polling.
    Rejected(RejectReason),
}

/// Validate one externally supplied address word and, if it survives, turn
/// it into an owned packet.
///
/// This is the only path by which foreign address words may enter an
/// enclave, whether they arrive on a chain ring or any other shared-memory
/// channel. The checks run in order of distrust:
///
/// 1. the bare word must not point at the enclave (checked before any use,
///    with the frame length rechecked after resolution);
/// 2. the pool must recognise it as exactly a slot data address in transit.
///
/// Every refusal is counted by reason.
pub fn admit_word(
    word: u64,
    pool: &PacketPool,
    bounds: &EnclaveBounds,
    rejects: &RejectCounters,
) -> Result<PacketHandle, RejectReason> {
    if bounds.validate_address(word, 1) == Validation::Rejected {
        rejects.bump(RejectReason::EnclaveOverlap);
        return Err(RejectReason::EnclaveOverlap);
    }
    match pool.resolve_transit(word) {
        Ok(handle) => {
            let len = pool.len(&handle) as u64;
            if bounds.validate_address(word, len) == Validation::Rejected {
                // Unreachable for pools carved outside the enclave, but
                // the boundary check is cheap and absolute.
                rejects.bump(RejectReason::EnclaveOverlap);
                let _ = pool.free(handle);
                return Err(RejectReason::EnclaveOverlap);
            }
            Ok(handle)
        }
        Err(fault) => {
            let reason = RejectReason::from_resolve(fault);
            rejects.bump(reason);
            Err(reason)
        }
    }
}

/// Consumer endpoint that runs every dequeued word through [`admit_word`].
pub struct GuardedRx {
    consumer: RingConsumer,
    pool: Arc<PacketPool>,
    bounds: EnclaveBounds,
    rejects: Arc<RejectCounters>,
}

impl GuardedRx {
    pub fn new(
        consumer: RingConsumer,
        pool: Arc<PacketPool>,
        bounds: EnclaveBounds,
        rejects: Arc<RejectCounters>,
    ) -> Self {
        GuardedRx {
            consumer,
            pool,
            bounds,
            rejects,
        }
    }

    pub fn poll(&self) -> GuardedPoll {
        let Some(word) = self.consumer.dequeue() else {
            return GuardedPoll::Empty;
        };
        match admit_word(word, &self.pool, &self.bounds, &self.rejects) {
            Ok(handle) => GuardedPoll::Packet(handle),
            Err(reason) => GuardedPoll::Rejected(reason),
        }
    }
}

/// Named rings shared between the primary and secondary runtime instances
/// of a chained deployment.
#[derive(Default)]
pub struct RingRegistry {
    rings: Mutex<HashMap<String, Ring>>,
}

impl RingRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(RingRegistry::default())
    }

    /// The process-wide registry used by the command line runtime.
    pub fn global() -> Arc<Self> {
        static GLOBAL: OnceLock<Arc<RingRegistry>> = OnceLock::new();
        Arc::clone(GLOBAL.get_or_init(RingRegistry::new))
    }

    /// Primary role: create and register a ring.
    pub fn create(&self, name: &str, capacity: u64) -> Result<Ring, RegistryError> {
        let mut rings = self.rings.lock().unwrap();
        if rings.contains_key(name) {
            return Err(RegistryError::AlreadyExists(name.to_string()));
        }
        let ring = Ring::new(capacity);
        rings.insert(name.to_string(), ring.clone());
        Ok(ring)
    }

    /// Secondary role: attach to a ring the primary created.
    pub fn lookup(&self, name: &str) -> Result<Ring, RegistryError> {
        self.rings
            .lock()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(name.to_string()))
    }
}
