//! Packet processing elements.
//!
//! An element is a small processor with numbered input and output ports.
//! Pushing a packet into an element may rewrite it, reroute it to any output
//! port, drop it, or hold it; source elements instead produce packets when
//! the scheduler runs their task. Elements own no threads and take no locks
//! on the data path: a graph instance runs single-threaded, and chaining
//! across instances happens explicitly through ring elements.
//!
//! The catalogue:
//!
//! | class            | purpose                                             |
//! |------------------|-----------------------------------------------------|
//! | `Wire`           | pass through unchanged (baseline)                   |
//! | `EtherMirror`    | swap Ethernet source and destination                |
//! | `Counter`        | count packets and bytes, resettable, persistable    |
//! | `Discard`        | drop everything                                     |
//! | `Classifier`     | dispatch on byte patterns at fixed offsets          |
//! | `ARPResponder`   | answer ARP requests for configured addresses        |
//! | `Firewall`       | ordered first-match five-tuple filter               |
//! | `RouteTable`     | longest prefix match IPv4 forwarding                |
//! | `PatternMatch`   | content scan against a regex set                    |
//! | `ToEnclave`      | copy a packet into enclave-private memory           |
//! | `Seal`           | authenticated encryption of whole frames            |
//! | `Unseal`         | verify, replay-check and decrypt sealed frames      |
//! | `DPDKRing`       | endpoint of a shared-memory ring between instances  |
//! | `FromTestDevice` | packet source (pcap replay, synthesis, injection)   |
//! | `ToTestDevice`   | packet sink with capture                            |
//! | `StateFile`      | declares the sealed persistence file for the graph  |

mod basic;
mod devices;
mod firewall;
mod pattern;
mod ring;
mod route;
mod secure;
mod state;

pub use devices::{DeviceHub, TestDevice};
pub use firewall::{evaluate as firewall_evaluate, flow_key, parse_rules, Action, FlowKey, Rule};
pub use pattern::parse_patterns;
pub use route::{linear_lookup, parse_routes, RouteEntry, RouteTrie};
pub use secure::{sa_id_for, ReplayVerdict, ReplayWindow, SEAL_HEADER_LEN, SEAL_OVERHEAD};

use std::collections::HashMap;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::attest::SecretStore;
use crate::chain::{RejectCounters, RingRegistry, Role};
use crate::packet::{MemoryDomain, PacketHandle, PacketPool};

/// Scheduler burst budget: how many packets a task processes per slot.
pub const BURST: usize = 32;

/// How many ports an element exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ports {
    pub inputs: u32,
    pub outputs: u32,
}

impl Ports {
    pub const fn new(inputs: u32, outputs: u32) -> Self {
        Ports { inputs, outputs }
    }
}

/// A packet queued for delivery to an element's input port.
#[derive(Debug)]
pub struct PushWork {
    pub element: usize,
    pub port: u32,
    pub packet: PacketHandle,
}

/// Where each output port of each element leads: `targets[element][port]`.
pub type Wiring = Vec<Vec<Option<(usize, u32)>>>;

/// Graph-level packet accounting. Every packet that enters is eventually
/// either transmitted by a sink or counted as a drop, never both.
#[derive(Debug, Default)]
pub struct FlowCounters {
    pub rx: AtomicU64,
    pub tx: AtomicU64,
    pub drops: AtomicU64,
}

impl FlowCounters {
    pub fn rx(&self) -> u64 {
        self.rx.load(Ordering::Relaxed)
    }

    pub fn tx(&self) -> u64 {
        self.tx.load(Ordering::Relaxed)
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }
}

/// Everything an element may do while handling a packet or running a task.
pub struct ExecCtx<'a> {
    element: usize,
    wiring: &'a Wiring,
    queue: &'a mut VecDeque<PushWork>,
    counters: &'a FlowCounters,
    domain: &'a Arc<MemoryDomain>,
    fatal: &'a mut Option<String>,
}

impl<'a> ExecCtx<'a> {
    pub fn new(
        element: usize,
        wiring: &'a Wiring,
        queue: &'a mut VecDeque<PushWork>,
        counters: &'a FlowCounters,
        domain: &'a Arc<MemoryDomain>,
        fatal: &'a mut Option<String>,
    ) -> Self {
        ExecCtx {
            element,
            wiring,
            queue,
            counters,
            domain,
            fatal,
        }
    }

    /// Push `packet` out of `port`. Unconnected ports drop.
    pub fn emit(&mut self, port: u32, packet: PacketHandle) {
        match self.wiring[self.element].get(port as usize).copied().flatten() {
            Some((element, port)) => self.queue.push_back(PushWork {
                element,
                port,
                packet,
            }),
            None => self.drop_packet(packet),
        }
    }

    /// Drop a packet: free its buffer and account for it.
    pub fn drop_packet(&mut self, packet: PacketHandle) {
        self.release(packet);
        self.counters.drops.fetch_add(1, Ordering::Relaxed);
    }

    /// Free a buffer without counting a drop; for elements that move a
    /// packet into a fresh buffer and discard the old shell.
    pub fn release(&self, packet: PacketHandle) {
        if let Some(pool) = self.domain.pool_by_id(packet.pool_id()) {
            let _ = pool.free(packet);
        }
    }

    /// Record packets entering the graph (sources call this).
    pub fn count_rx(&self, n: u64) {
        self.counters.rx.fetch_add(n, Ordering::Relaxed);
    }

    /// Record a packet leaving the graph (sinks call this).
    pub fn count_tx(&self, n: u64) {
        self.counters.tx.fetch_add(n, Ordering::Relaxed);
    }

    /// Record a drop that happened before a buffer existed (e.g. pool
    /// exhaustion at a source).
    pub fn count_drop(&self, n: u64) {
        self.counters.drops.fetch_add(n, Ordering::Relaxed);
    }

    /// Signal an unrecoverable condition; the instance stops with an error.
    pub fn fail(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::error!("element {} failed: {msg}", self.element);
        self.fatal.get_or_insert(msg);
    }

    pub fn domain(&self) -> &Arc<MemoryDomain> {
        self.domain
    }
}

/// Declared by a `StateFile` element: where sealed state lives and how often
/// to reseal it while running.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistTarget {
    pub path: PathBuf,
    pub period: Option<Duration>,
}

/// A packet processing element.
///
/// All methods run on the instance's scheduler thread; elements never need
/// interior synchronisation for their own state.
pub trait Element: Send {
    fn class_name(&self) -> &'static str;

    fn ports(&self) -> Ports;

    /// Handle a packet arriving on input `port`.
    fn push(&mut self, port: u32, packet: PacketHandle, ctx: &mut ExecCtx);

    /// Produce or pull packets; return true if any progress was made.
    /// Called only when [`Element::is_task`] is true.
    fn run_task(&mut self, _ctx: &mut ExecCtx) -> bool {
        false
    }

    /// Whether the scheduler should poll this element.
    fn is_task(&self) -> bool {
        false
    }

    /// For sources: true once no further packets will ever be produced.
    /// `None` for elements that are not packet sources.
    fn source_exhausted(&self) -> Option<bool> {
        None
    }

    /// Ask for periodic [`Element::on_timer`] callbacks.
    fn timer_period(&self) -> Option<Duration> {
        None
    }

    fn on_timer(&mut self, _now_ns: u64, _ctx: &mut ExecCtx) {}

    /// Control plane: read a named value.
    fn read_handler(&self, _name: &str) -> Option<String> {
        None
    }

    /// Control plane: write a named value.
    fn write_handler(&mut self, name: &str, _value: &str) -> Result<(), String> {
        Err(format!("no handler `{name}`"))
    }

    /// Serialize durable state for sealing, if this element has any.
    fn state_save(&self) -> Option<Vec<u8>> {
        None
    }

    /// Restore state produced by [`Element::state_save`].
    fn state_load(&mut self, _data: &[u8]) -> Result<(), String> {
        Ok(())
    }

    /// StateFile elements declare the persistence target here.
    fn persist_target(&self) -> Option<PersistTarget> {
        None
    }
}

/// Failure to construct an element from its configuration arguments.
#[derive(Debug, thiserror::Error)]
#[error("{element}: {msg}")]
pub struct BuildError {
    pub element: String,
    pub msg: String,
}

impl BuildError {
    pub fn new(element: &str, msg: impl Into<String>) -> Self {
        BuildError {
            element: element.to_string(),
            msg: msg.into(),
        }
    }
}

/// Everything available to an element constructor.
pub struct ElementInit<'a> {
    /// Instance name from the configuration.
    pub name: &'a str,
    pub args: &'a [String],
    /// Directory of the configuration file; relative file arguments resolve
    /// against it.
    pub base_dir: &'a Path,
    pub domain: &'a Arc<MemoryDomain>,
    /// Default pool in host-visible memory (NIC and ring buffers).
    pub untrusted_pool: &'a Arc<PacketPool>,
    /// Pool in enclave-private memory.
    pub trusted_pool: &'a Arc<PacketPool>,
    pub registry: &'a Arc<RingRegistry>,
    pub role: Role,
    pub secrets: &'a Arc<SecretStore>,
    pub rejects: &'a Arc<RejectCounters>,
    pub devices: &'a Arc<DeviceHub>,
}

impl<'a> ElementInit<'a> {
    pub fn err(&self, msg: impl Into<String>) -> BuildError {
        BuildError::new(self.name, msg)
    }

    /// Resolve a file argument relative to the configuration's directory.
    pub fn resolve_path(&self, arg: &str) -> PathBuf {
        let p = Path::new(arg);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read_file_arg(&self, arg: &str) -> Result<String, BuildError> {
        let path = self.resolve_path(arg);
        std::fs::read_to_string(&path)
            .map_err(|e| self.err(format!("cannot read {}: {e}", path.display())))
    }
}

pub type BuildFn = fn(&ElementInit) -> Result<Box<dyn Element>, BuildError>;

/// Maps class names to constructors.
pub struct ClassRegistry {
    builders: HashMap<&'static str, BuildFn>,
}

impl ClassRegistry {
    pub fn empty() -> Self {
        ClassRegistry {
            builders: HashMap::new(),
        }
    }

    pub fn register(&mut self, class: &'static str, build: BuildFn) {
        self.builders.insert(class, build);
    }

    pub fn contains(&self, class: &str) -> bool {
        self.builders.contains_key(class)
    }

    pub fn build(&self, class: &str, init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
        match self.builders.get(class) {
            Some(f) => f(init),
            None => Err(init.err(format!("unknown element class `{class}`"))),
        }
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self.builders.keys().copied().collect();
        names.sort_unstable();
        names
    }
}

/// The built-in element classes.
pub fn default_registry() -> ClassRegistry {
    let mut r = ClassRegistry::empty();
    r.register("Wire", basic::build_wire);
    r.register("EtherMirror", basic::build_ether_mirror);
    r.register("Counter", basic::build_counter);
    r.register("Discard", basic::build_discard);
    r.register("Classifier", basic::build_classifier);
    r.register("ARPResponder", basic::build_arp_responder);
    r.register("Firewall", firewall::build);
    r.register("RouteTable", route::build);
    r.register("PatternMatch", pattern::build);
    r.register("ToEnclave", secure::build_to_enclave);
    r.register("Seal", secure::build_seal);
    r.register("Unseal", secure::build_unseal);
    r.register("DPDKRing", ring::build);
    r.register("FromTestDevice", devices::build_from_test_device);
    r.register("ToTestDevice", devices::build_to_test_device);
    r.register("StateFile", state::build);
    r
}
