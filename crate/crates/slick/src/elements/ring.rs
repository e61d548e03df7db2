//! Ring endpoints for chaining graph instances over shared memory.
//!
//! `DPDKRing(name, tx [, capacity])` publishes packets onto the named ring;
//! `DPDKRing(name, rx [, capacity])` consumes them. The primary instance
//! creates rings, secondaries attach to existing ones. Only the address
//! word crosses the ring; the packet bytes stay in the shared pool, and the
//! receiving side re-validates every word before touching them.

use std::sync::Arc;

use crate::chain::{GuardedPoll, GuardedRx, RingProducer, Role};
use crate::packet::{PacketHandle, PacketPool};

use super::{BuildError, Element, ElementInit, ExecCtx, Ports, BURST};

const DEFAULT_CAPACITY: u64 = 1024;

struct RingTx {
    name: String,
    producer: RingProducer,
    pool: Arc<PacketPool>,
    enqueued: u64,
    full_drops: u64,
    bad_pool: u64,
}

impl Element for RingTx {
    fn class_name(&self) -> &'static str {
        "DPDKRing"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 0)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        if packet.pool_id() != self.pool.id() {
            // Publishing an enclave-private buffer would hand its address to
            // the outside; refuse and drop. This is a configuration error:
            // seal before the ring.
            if self.bad_pool == 0 {
                log::error!(
                    "ring `{}`: refusing to publish a packet from a private pool; \
                     route packets through Seal first",
                    self.name
                );
            }
            self.bad_pool += 1;
            ctx.drop_packet(packet);
            return;
        }
        let word = match self.pool.begin_transit(packet) {
            Ok(word) => word,
            Err(_) => {
                ctx.count_drop(1);
                return;
            }
        };
        match self.producer.enqueue(word) {
            Ok(()) => {
                self.enqueued += 1;
                ctx.count_tx(1);
            }
            Err(word) => {
                // Ring full: take the slot back out of transit and drop.
                self.full_drops += 1;
                match self.pool.resolve_transit(word) {
                    Ok(handle) => ctx.drop_packet(handle),
                    Err(_) => ctx.count_drop(1),
                }
            }
        }
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "enqueued" => Some(self.enqueued.to_string()),
            "full_drops" => Some(self.full_drops.to_string()),
            "bad_pool" => Some(self.bad_pool.to_string()),
            _ => None,
        }
    }
}

struct RingRx {
    rx: GuardedRx,
    received: u64,
}

impl Element for RingRx {
    fn class_name(&self) -> &'static str {
        "DPDKRing"
    }

    fn ports(&self) -> Ports {
        Ports::new(0, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        ctx.drop_packet(packet);
    }

    fn is_task(&self) -> bool {
        true
    }

    fn source_exhausted(&self) -> Option<bool> {
        // Another instance may enqueue at any time; an empty ring is idle,
        // not finished.
        Some(false)
    }

    fn run_task(&mut self, ctx: &mut ExecCtx) -> bool {
        let mut progress = false;
        for _ in 0..BURST {
            match self.rx.poll() {
                GuardedPoll::Empty => break,
                GuardedPoll::Packet(handle) => {
                    self.received += 1;
                    ctx.count_rx(1);
                    ctx.emit(0, handle);
                    progress = true;
                }
                GuardedPoll::Rejected(_) => {
                    // Counted by reason in the shared reject counters.
                    progress = true;
                }
            }
        }
        progress
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "received" => Some(self.received.to_string()),
            _ => None,
        }
    }
}

pub(super) fn build(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let (name, dir, rest) = match init.args {
        [name, dir, rest @ ..] if rest.len() <= 1 => (name, dir, rest),
        _ => return Err(init.err("usage: DPDKRing(name, tx|rx [, capacity])")),
    };
    let capacity: u64 = match rest.first() {
        Some(s) => s
            .parse()
            .map_err(|_| init.err("ring capacity must be an integer"))?,
        None => DEFAULT_CAPACITY,
    };
    if !capacity.is_power_of_two() {
        return Err(init.err("ring capacity must be a power of two"));
    }
    let ring = match init.role {
        // The primary owns ring creation; if the ring already exists (both
        // endpoints in one configuration) it attaches instead.
        Role::Primary => match init.registry.create(name, capacity) {
            Ok(ring) => ring,
            Err(_) => init
                .registry
                .lookup(name)
                .map_err(|e| init.err(e.to_string()))?,
        },
        Role::Secondary => init
            .registry
            .lookup(name)
            .map_err(|e| init.err(e.to_string()))?,
    };
    match dir.as_str() {
        "tx" => {
            let producer = ring
                .claim_producer()
                .ok_or_else(|| init.err(format!("ring `{name}` already has a producer")))?;
            Ok(Box::new(RingTx {
                name: name.clone(),
                producer,
                pool: Arc::clone(init.untrusted_pool),
                enqueued: 0,
                full_drops: 0,
                bad_pool: 0,
            }))
        }
        "rx" => {
            let consumer = ring
                .claim_consumer()
                .ok_or_else(|| init.err(format!("ring `{name}` already has a consumer")))?;
            Ok(Box::new(RingRx {
                rx: GuardedRx::new(
                    consumer,
                    Arc::clone(init.untrusted_pool),
                    init.domain.bounds(),
                    Arc::clone(init.rejects),
                ),
                received: 0,
            }))
        }
        other => Err(init.err(format!("ring direction must be tx or rx, not `{other}`"))),
    }
}
