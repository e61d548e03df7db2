//! The poll-mode runtime: builds an element graph from a configuration and
//! runs it to completion on one thread.
//!
//! The scheduler owns every element and loops over three phases: fire due
//! timers, poll task elements (sources) for a burst of packets, then drain
//! the push queue until no packet is in flight inside the graph. Packets
//! move by value through the queue, so an element never re-enters itself
//! and no element needs locks.
//!
//! Two resources are treated as precious and accounted explicitly:
//!
//! * packet buffers: every packet entering the graph is eventually counted
//!   as transmitted or dropped, exactly once, and the pools must drain back
//!   to full when the graph does;
//! * clock reads: the steady-state loop performs none. Time is read only
//!   when timers are pending, when the stop condition is a duration, or in
//!   [`TimerMode::EveryIteration`], which exists to measure what the naive
//!   approach costs.

mod clock;

pub use clock::{Clock, TestClock, CLOCK_ENV, NIC_PTP_READ_COST_NS};

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attest::SecretStore;
use crate::chain::{RejectCounters, RingRegistry, Role};
use crate::config::{Config, ValidateError};
use crate::crypto::sha256;
use crate::elements::{
    default_registry, BuildError, DeviceHub, Element, ElementInit, ExecCtx, FlowCounters,
    PersistTarget, PushWork, Wiring,
};
use crate::packet::{MemoryDomain, PacketPool, RegionTag};
use crate::persist::{seal_to_path, unseal_from_path, PersistError};

/// How the scheduler treats the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimerMode {
    /// Read the clock only while timers are pending.
    #[default]
    Optimized,
    /// Read the clock on every scheduler iteration, pending timers or not.
    /// This is the traditional approach; it exists so its cost can be
    /// measured against the optimized one.
    EveryIteration,
}

/// When `run` should return.
#[derive(Debug, Clone)]
pub enum StopCondition {
    /// All packet sources are exhausted and no packet is in flight.
    /// Sources fed by another live instance (ring consumers) never report
    /// exhaustion; stop those runs by count, duration, or flag.
    Drained,
    /// The graph has accepted at least this many packets.
    AfterRxPackets(u64),
    /// Virtual time has advanced this far. Checking costs one clock read
    /// per iteration by nature.
    AfterDuration(Duration),
    /// An external thread asked us to stop.
    Flag(Arc<AtomicBool>),
    /// Like [`StopCondition::Drained`], but armed by the flag: keep
    /// consuming until upstream signals completion *and* the instance goes
    /// idle. The stop for the downstream half of a chain.
    DrainedAfterFlag(Arc<AtomicBool>),
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("configuration: {0}")]
    Parse(#[from] crate::config::ParseError),
    #[error("configuration: {0}")]
    Validate(#[from] ValidateError),
    #[error("{0}")]
    Build(#[from] BuildError),
    #[error("wiring: {0}")]
    Wiring(String),
    #[error("state restore: {0}")]
    State(String),
    #[error("sealed state: {0}")]
    Persist(#[from] PersistError),
}

/// Everything an [`Instance`] needs besides the configuration itself.
pub struct InstanceOptions {
    pub role: Role,
    pub registry: Arc<RingRegistry>,
    pub devices: Arc<DeviceHub>,
    pub secrets: Arc<SecretStore>,
    /// Directory against which relative file arguments resolve.
    pub base_dir: PathBuf,
    pub clock: Clock,
    pub timer_mode: TimerMode,
    /// Overrides (or supplies, if the graph has no `StateFile`) the sealed
    /// state path.
    pub state_file: Option<PathBuf>,
    /// Buffers per pool.
    pub pool_capacity: u32,
    /// Bytes per buffer.
    pub buf_size: u32,
    /// Packet memory shared with other instances. Chained instances must
    /// share it: ring words name buffers in the common untrusted pool.
    pub shared_memory: Option<SharedMemory>,
}

/// The packet memory chained instances have in common, standing in for the
/// hugepage pools that chained processes all map: one untrusted pool whose
/// buffers cross rings, and the domain from which each instance still
/// carves a private trusted pool.
#[derive(Clone)]
pub struct SharedMemory {
    pub domain: Arc<MemoryDomain>,
    pub untrusted_pool: Arc<PacketPool>,
}

impl SharedMemory {
    pub fn new(pool_capacity: u32, buf_size: u32) -> Self {
        let domain = MemoryDomain::standard();
        let untrusted_pool = domain.new_pool(RegionTag::Untrusted, pool_capacity, buf_size);
        SharedMemory {
            domain,
            untrusted_pool,
        }
    }
}

impl Default for InstanceOptions {
    fn default() -> Self {
        InstanceOptions {
            role: Role::Primary,
            registry: RingRegistry::new(),
            devices: DeviceHub::new(),
            secrets: Arc::new(SecretStore::from_env()),
            base_dir: PathBuf::from("."),
            clock: Clock::host(),
            timer_mode: TimerMode::Optimized,
            state_file: None,
            pool_capacity: 4096,
            buf_size: 2048,
            shared_memory: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimerSlot {
    Element(usize),
    Persist,
}

/// Min-heap entry: (deadline, tie-break sequence, target, period).
type TimerEntry = Reverse<(u64, u64, TimerSlot, u64)>;

struct PersistPlan {
    path: PathBuf,
    key: [u8; 32],
}

#[derive(Debug, Serialize, Deserialize)]
struct StateDoc {
    elements: BTreeMap<String, String>,
}

/// Point-in-time pool accounting for reports.
#[derive(Debug, Clone, Serialize)]
pub struct PoolReport {
    pub region: String,
    pub capacity: u32,
    pub in_use: u32,
    pub exhausted: u64,
}

/// Everything a run reports. Serializable so the command line can emit it
/// as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub rx: u64,
    pub tx: u64,
    pub drops: u64,
    pub rejects: BTreeMap<String, u64>,
    pub rejects_total: u64,
    pub clock_reads: u64,
    pub clock_charged_ns: u64,
    pub elapsed_ns: u64,
    pub pools: Vec<PoolReport>,
    pub error: Option<String>,
}

/// A running (or runnable) element graph.
pub struct Instance {
    names: Vec<String>,
    index: HashMap<String, usize>,
    elements: Vec<RefCell<Box<dyn Element>>>,
    tasks: Vec<usize>,
    wiring: Wiring,
    queue: VecDeque<PushWork>,
    counters: Arc<FlowCounters>,
    rejects: Arc<RejectCounters>,
    domain: Arc<MemoryDomain>,
    untrusted_pool: Arc<PacketPool>,
    trusted_pool: Arc<PacketPool>,
    clock: Clock,
    timer_mode: TimerMode,
    timers: BinaryHeap<TimerEntry>,
    timer_seq: u64,
    persist: Option<PersistPlan>,
    fatal: Option<String>,
    config_digest: String,
    started: Instant,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance")
            .field("elements", &self.names)
            .field("config_digest", &self.config_digest)
            .finish_non_exhaustive()
    }
}

impl Instance {
    /// Parse, validate and build in one step.
    pub fn from_text(text: &str, options: InstanceOptions) -> Result<Self, RuntimeError> {
        let config = crate::config::parse(text)?;
        Instance::new(&config, options)
    }

    pub fn new(config: &Config, options: InstanceOptions) -> Result<Self, RuntimeError> {
        config.validate()?;
        let registry = default_registry();
        let (domain, untrusted_pool) = match &options.shared_memory {
            Some(shared) => (
                Arc::clone(&shared.domain),
                Arc::clone(&shared.untrusted_pool),
            ),
            None => {
                let domain = MemoryDomain::standard();
                let pool =
                    domain.new_pool(RegionTag::Untrusted, options.pool_capacity, options.buf_size);
                (domain, pool)
            }
        };
        let trusted_pool =
            domain.new_pool(RegionTag::Trusted, options.pool_capacity, options.buf_size);
        let rejects = Arc::new(RejectCounters::default());
        let config_digest = hex::encode(sha256(config.canonical_text().as_bytes()));

        let mut names = Vec::new();
        let mut index = HashMap::new();
        let mut elements: Vec<RefCell<Box<dyn Element>>> = Vec::new();
        for decl in &config.decls {
            let init = ElementInit {
                name: &decl.name,
                args: &decl.args,
                base_dir: &options.base_dir,
                domain: &domain,
                untrusted_pool: &untrusted_pool,
                trusted_pool: &trusted_pool,
                registry: &options.registry,
                role: options.role,
                secrets: &options.secrets,
                rejects: &rejects,
                devices: &options.devices,
            };
            let element = registry.build(&decl.class, &init)?;
            index.insert(decl.name.clone(), elements.len());
            names.push(decl.name.clone());
            elements.push(RefCell::new(element));
        }

        // Wire links, checking every port against the element's declaration.
        let mut wiring: Wiring = elements
            .iter()
            .map(|e| vec![None; e.borrow().ports().outputs as usize])
            .collect();
        for link in &config.links {
            let from = index[&link.from];
            let to = index[&link.to];
            let from_ports = elements[from].borrow().ports();
            let to_ports = elements[to].borrow().ports();
            if link.from_port >= from_ports.outputs {
                return Err(RuntimeError::Wiring(format!(
                    "{} has {} output port(s); [{}] does not exist",
                    link.from, from_ports.outputs, link.from_port
                )));
            }
            if link.to_port >= to_ports.inputs {
                return Err(RuntimeError::Wiring(format!(
                    "{} has {} input port(s); [{}] does not exist",
                    link.to, to_ports.inputs, link.to_port
                )));
            }
            wiring[from][link.from_port as usize] = Some((to, link.to_port));
        }

        let tasks: Vec<usize> = elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.borrow().is_task())
            .map(|(i, _)| i)
            .collect();

        // Persistence: at most one StateFile declaration; an explicit
        // override wins and also works without any declaration.
        let mut target: Option<PersistTarget> = None;
        for (i, e) in elements.iter().enumerate() {
            if let Some(t) = e.borrow().persist_target() {
                if target.is_some() {
                    return Err(RuntimeError::Wiring(format!(
                        "{} declares a second state file; a graph persists to one file",
                        names[i]
                    )));
                }
                target = Some(t);
            }
        }
        if let Some(path) = &options.state_file {
            target = Some(PersistTarget {
                path: path.clone(),
                period: target.and_then(|t| t.period),
            });
        }

        let mut instance = Instance {
            names,
            index,
            elements,
            tasks,
            wiring,
            queue: VecDeque::new(),
            counters: Arc::new(FlowCounters::default()),
            rejects,
            domain,
            untrusted_pool,
            trusted_pool,
            clock: options.clock,
            timer_mode: options.timer_mode,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            persist: None,
            fatal: None,
            config_digest,
            started: Instant::now(),
        };

        // Element timers fire one period after start; deadlines are virtual
        // nanoseconds on the instance clock.
        for i in 0..instance.elements.len() {
            let period = instance.elements[i].borrow().timer_period();
            if let Some(period) = period {
                let period_ns = period.as_nanos() as u64;
                instance.schedule(period_ns, TimerSlot::Element(i), period_ns);
            }
        }

        if let Some(target) = target {
            let key = options.secrets.state_seal_key(&instance.config_digest);
            if let Some(period) = target.period {
                let period_ns = period.as_nanos() as u64;
                instance.schedule(period_ns, TimerSlot::Persist, period_ns);
            }
            instance.persist = Some(PersistPlan {
                path: target.path,
                key,
            });
            instance.restore_state()?;
        }

        Ok(instance)
    }

    fn schedule(&mut self, deadline: u64, slot: TimerSlot, period_ns: u64) {
        self.timer_seq += 1;
        self.timers
            .push(Reverse((deadline, self.timer_seq, slot, period_ns)));
    }

    /// Digest of the canonical configuration text; part of the instance's
    /// measured identity and the binding for its sealed state.
    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn counters(&self) -> &FlowCounters {
        &self.counters
    }

    pub fn rejects(&self) -> &RejectCounters {
        &self.rejects
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn untrusted_pool(&self) -> &Arc<PacketPool> {
        &self.untrusted_pool
    }

    pub fn trusted_pool(&self) -> &Arc<PacketPool> {
        &self.trusted_pool
    }

    pub fn failed(&self) -> Option<&str> {
        self.fatal.as_deref()
    }

    /// Read a named value from an element's control plane.
    pub fn read(&self, element: &str, handler: &str) -> Option<String> {
        let idx = *self.index.get(element)?;
        self.elements[idx].borrow().read_handler(handler)
    }

    /// Write a named value on an element's control plane.
    pub fn write(&self, element: &str, handler: &str, value: &str) -> Result<(), String> {
        let idx = *self
            .index
            .get(element)
            .ok_or_else(|| format!("no element `{element}`"))?;
        self.elements[idx]
            .borrow_mut()
            .write_handler(handler, value)
    }

    /// True when every source element reports exhaustion. Elements that are
    /// not sources do not vote.
    pub fn sources_exhausted(&self) -> bool {
        self.elements
            .iter()
            .all(|e| e.borrow().source_exhausted().unwrap_or(true))
    }

    fn fire_due_timers(&mut self) -> bool {
        match self.timer_mode {
            TimerMode::Optimized => {
                if self.timers.is_empty() {
                    return false;
                }
            }
            TimerMode::EveryIteration => {}
        }
        let now = self.clock.read_post();
        let mut fired = false;
        while let Some(&Reverse((deadline, _, slot, period_ns))) = self.timers.peek() {
            if deadline > now {
                break;
            }
            self.timers.pop();
            fired = true;
            match slot {
                TimerSlot::Element(i) => {
                    let mut el = self.elements[i].borrow_mut();
                    let mut ctx = ExecCtx::new(
                        i,
                        &self.wiring,
                        &mut self.queue,
                        &self.counters,
                        &self.domain,
                        &mut self.fatal,
                    );
                    el.on_timer(now, &mut ctx);
                }
                TimerSlot::Persist => {
                    if let Err(e) = self.persist_now() {
                        self.fatal
                            .get_or_insert(format!("periodic state seal failed: {e}"));
                    }
                }
            }
            if period_ns > 0 {
                // Fixed-rate rescheduling from the missed deadline, so load
                // does not stretch the period.
                let next = deadline.saturating_add(period_ns).max(now);
                self.schedule(next, slot, period_ns);
            }
        }
        fired
    }

    /// One scheduler iteration: timers, one task burst per source, then
    /// drain the push queue. Returns true if any packet or timer made
    /// progress.
    pub fn step(&mut self) -> bool {
        if self.fatal.is_some() {
            return false;
        }
        let mut progress = self.fire_due_timers();
        for k in 0..self.tasks.len() {
            let i = self.tasks[k];
            let mut el = self.elements[i].borrow_mut();
            let mut ctx = ExecCtx::new(
                i,
                &self.wiring,
                &mut self.queue,
                &self.counters,
                &self.domain,
                &mut self.fatal,
            );
            progress |= el.run_task(&mut ctx);
        }
        while let Some(work) = self.queue.pop_front() {
            progress = true;
            let mut el = self.elements[work.element].borrow_mut();
            let mut ctx = ExecCtx::new(
                work.element,
                &self.wiring,
                &mut self.queue,
                &self.counters,
                &self.domain,
                &mut self.fatal,
            );
            el.push(work.port, work.packet, &mut ctx);
        }
        progress
    }

    /// Run until `stop` is met or an element signals a fatal error. Seals
    /// state at the end if a state file is configured.
    pub fn run(&mut self, stop: StopCondition) -> RunStats {
        let deadline = match &stop {
            StopCondition::AfterDuration(d) => {
                Some(self.clock.read_post().saturating_add(d.as_nanos() as u64))
            }
            _ => None,
        };
        loop {
            let progress = self.step();
            if self.fatal.is_some() {
                break;
            }
            let done = match &stop {
                StopCondition::Drained => {
                    !progress && self.queue.is_empty() && self.sources_exhausted()
                }
                StopCondition::AfterRxPackets(n) => self.counters.rx() >= *n,
                StopCondition::AfterDuration(_) => {
                    self.clock.read_post() >= deadline.unwrap_or(u64::MAX)
                }
                StopCondition::Flag(flag) => flag.load(Ordering::Relaxed),
                StopCondition::DrainedAfterFlag(flag) => {
                    flag.load(Ordering::Acquire) && !progress && self.queue.is_empty()
                }
            };
            if done {
                break;
            }
            if !progress {
                // Be polite on shared hardware: an idle poll loop yields.
                std::thread::yield_now();
            }
        }
        if self.persist.is_some() {
            if let Err(e) = self.persist_now() {
                self.fatal
                    .get_or_insert(format!("final state seal failed: {e}"));
            }
        }
        self.stats()
    }

    /// Current statistics snapshot.
    pub fn stats(&self) -> RunStats {
        let rejects: BTreeMap<String, u64> = self
            .rejects
            .snapshot()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let pool_report = |pool: &PacketPool, region: &str| {
            let s = pool.stats();
            PoolReport {
                region: region.to_string(),
                capacity: s.capacity,
                in_use: s.capacity - s.free,
                exhausted: s.exhausted,
            }
        };
        RunStats {
            rx: self.counters.rx(),
            tx: self.counters.tx(),
            drops: self.counters.drops(),
            rejects,
            rejects_total: self.rejects.total(),
            clock_reads: self.clock.reads(),
            clock_charged_ns: self.clock.charged_ns(),
            elapsed_ns: self.started.elapsed().as_nanos() as u64,
            pools: vec![
                pool_report(&self.untrusted_pool, "untrusted"),
                pool_report(&self.trusted_pool, "trusted"),
            ],
            error: self.fatal.clone(),
        }
    }

    /// Serialize all element state into the sealed-state document.
    fn save_state_bytes(&self) -> Vec<u8> {
        let mut doc = StateDoc {
            elements: BTreeMap::new(),
        };
        for (i, e) in self.elements.iter().enumerate() {
            if let Some(bytes) = e.borrow().state_save() {
                doc.elements.insert(self.names[i].clone(), hex::encode(bytes));
            }
        }
        serde_json::to_vec(&doc).expect("state document serializes")
    }

    fn load_state_bytes(&mut self, data: &[u8]) -> Result<(), RuntimeError> {
        let doc: StateDoc = serde_json::from_slice(data)
            .map_err(|e| RuntimeError::State(format!("state document: {e}")))?;
        for (name, hex_bytes) in &doc.elements {
            let idx = *self
                .index
                .get(name)
                .ok_or_else(|| RuntimeError::State(format!("no element `{name}` in this graph")))?;
            let bytes = hex::decode(hex_bytes)
                .map_err(|e| RuntimeError::State(format!("{name}: {e}")))?;
            self.elements[idx]
                .borrow_mut()
                .state_load(&bytes)
                .map_err(|e| RuntimeError::State(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Seal current state to the configured file now.
    pub fn persist_now(&self) -> Result<(), PersistError> {
        let Some(plan) = &self.persist else {
            return Ok(());
        };
        seal_to_path(&plan.key, &plan.path, &self.save_state_bytes())
    }

    fn restore_state(&mut self) -> Result<(), RuntimeError> {
        let Some(plan) = &self.persist else {
            return Ok(());
        };
        if !plan.path.exists() {
            return Ok(());
        }
        let plaintext = unseal_from_path(&plan.key, &plan.path)?;
        self.load_state_bytes(&plaintext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use crate::pktgen::FrameGen;

    fn instance(text: &str, options: InstanceOptions) -> Instance {
        let cfg = config::parse(text).unwrap();
        Instance::new(&cfg, options).unwrap()
    }

    const WIRE_GRAPH: &str = "
        src :: FromTestDevice(synth, 100, 64);
        w :: Wire;
        out :: ToTestDevice(dev0);
        src -> w -> out;
    ";

    #[test]
    fn wire_graph_conserves_every_packet() {
        let options = InstanceOptions::default();
        let devices = Arc::clone(&options.devices);
        let mut inst = instance(WIRE_GRAPH, options);
        let stats = inst.run(StopCondition::Drained);
        assert_eq!(stats.rx, 100);
        assert_eq!(stats.tx, 100);
        assert_eq!(stats.drops, 0);
        assert!(stats.error.is_none());
        let dev = devices.device("dev0");
        assert_eq!(dev.tx_frames(), 100);
        // The transmitted frames are exactly the generated ones, in order.
        assert_eq!(dev.captured(), FrameGen::new(1, 64, 64).take(100));
        // Both pools drained back to full.
        for pool in &stats.pools {
            assert_eq!(pool.in_use, 0, "{} pool leaked buffers", pool.region);
        }
    }

    #[test]
    fn steady_state_performs_zero_clock_reads() {
        let tc = TestClock::new();
        let mut options = InstanceOptions::default();
        options.clock = Clock::test(Arc::clone(&tc), NIC_PTP_READ_COST_NS);
        let mut inst = instance(WIRE_GRAPH, options);
        let stats = inst.run(StopCondition::Drained);
        assert_eq!(stats.rx, 100);
        assert_eq!(stats.clock_reads, 0);
        assert_eq!(stats.clock_charged_ns, 0);
    }

    #[test]
    fn every_iteration_mode_pays_for_the_clock() {
        let tc = TestClock::new();
        let mut options = InstanceOptions::default();
        options.clock = Clock::test(Arc::clone(&tc), NIC_PTP_READ_COST_NS);
        options.timer_mode = TimerMode::EveryIteration;
        let mut inst = instance(WIRE_GRAPH, options);
        let stats = inst.run(StopCondition::Drained);
        assert!(stats.clock_reads > 0);
        assert_eq!(
            stats.clock_charged_ns,
            stats.clock_reads * NIC_PTP_READ_COST_NS
        );
    }

    #[test]
    fn seal_then_unseal_recovers_the_original_frames() {
        let text = "
            src :: FromTestDevice(synth, 50, 128);
            s :: Seal(sa_test);
            u :: Unseal(sa_test);
            out :: ToTestDevice(devsu);
            src -> s -> u -> out;
        ";
        let options = InstanceOptions::default();
        let devices = Arc::clone(&options.devices);
        let mut inst = instance(text, options);
        let stats = inst.run(StopCondition::Drained);
        assert_eq!(stats.rx, 50);
        assert_eq!(stats.tx, 50);
        assert_eq!(inst.read("u", "accepted").unwrap(), "50");
        assert_eq!(
            devices.device("devsu").captured(),
            FrameGen::new(1, 128, 64).take(50)
        );
    }

    #[test]
    fn sequence_exhaustion_stops_the_instance() {
        let text = "
            src :: FromTestDevice(synth, 10, 64);
            s :: Seal(sa_x);
            out :: ToTestDevice(devexh);
            src -> s -> out;
        ";
        let mut inst = instance(text, InstanceOptions::default());
        inst.write("s", "seq", &u64::MAX.to_string()).unwrap();
        let stats = inst.run(StopCondition::Drained);
        let err = stats.error.expect("exhaustion must be fatal");
        assert!(err.contains("exhausted"), "{err}");
        assert!(inst.failed().is_some());
    }

    #[test]
    fn wiring_refuses_ports_that_do_not_exist() {
        let cfg = config::parse("a :: Wire; b :: Wire; a [2] -> b;").unwrap();
        let err = Instance::new(&cfg, InstanceOptions::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Wiring(_)));
        assert!(err.to_string().contains("1 output port"));
        let cfg = config::parse("a :: Wire; b :: Wire; a -> [3] b;").unwrap();
        let err = Instance::new(&cfg, InstanceOptions::default()).unwrap_err();
        assert!(err.to_string().contains("[3] does not exist"));
    }

    #[test]
    fn unconnected_output_drops_cleanly() {
        let text = "
            src :: FromTestDevice(synth, 7, 64);
            w :: Wire;
            src -> w;
        ";
        let mut inst = instance(text, InstanceOptions::default());
        let stats = inst.run(StopCondition::Drained);
        assert_eq!(stats.rx, 7);
        assert_eq!(stats.tx, 0);
        assert_eq!(stats.drops, 7);
        for pool in &stats.pools {
            assert_eq!(pool.in_use, 0);
        }
    }

    #[test]
    fn state_survives_a_restart_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("graph.state");
        let text = format!(
            "
            src :: FromTestDevice(synth, 25, 64);
            c :: Counter;
            s :: Seal(sa_persist);
            out :: ToTestDevice(devp);
            st :: StateFile({});
            src -> c -> s -> out;
            ",
            state.display()
        );
        {
            let mut inst = instance(&text, InstanceOptions::default());
            let stats = inst.run(StopCondition::Drained);
            assert_eq!(stats.rx, 25);
            assert_eq!(inst.read("c", "count").unwrap(), "25");
            assert_eq!(inst.read("s", "seq").unwrap(), "26");
        }
        assert!(state.exists());
        // Restart: counters and sequence numbers continue where they left off.
        let inst = instance(&text, InstanceOptions::default());
        assert_eq!(inst.read("c", "count").unwrap(), "25");
        assert_eq!(inst.read("s", "seq").unwrap(), "26");
        // A flipped ciphertext bit must be refused, not silently accepted.
        let mut blob = std::fs::read(&state).unwrap();
        let mid = blob.len() / 2;
        blob[mid] ^= 0x40;
        std::fs::write(&state, &blob).unwrap();
        let cfg = config::parse(&text).unwrap();
        let err = Instance::new(&cfg, InstanceOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            RuntimeError::Persist(PersistError::AuthFailure)
        ));
    }

    #[test]
    fn state_is_bound_to_the_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("bound.state");
        let graph = |count: u32| {
            format!(
                "
                src :: FromTestDevice(synth, {count}, 64);
                c :: Counter;
                st :: StateFile({});
                src -> c;
                ",
                state.display()
            )
        };
        let mut inst = instance(&graph(5), InstanceOptions::default());
        inst.run(StopCondition::Drained);
        // A different graph derives a different seal key, so the file from
        // the first graph is unreadable rather than silently misapplied.
        let cfg = config::parse(&graph(6)).unwrap();
        let err = Instance::new(&cfg, InstanceOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            RuntimeError::Persist(PersistError::AuthFailure)
        ));
    }

    #[test]
    fn periodic_reseal_follows_virtual_time() {
        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("periodic.state");
        let text = format!(
            "
            src :: FromTestDevice(synth, 1000, 64);
            c :: Counter;
            st :: StateFile({}, 10);
            src -> c;
            ",
            state.display()
        );
        let tc = TestClock::new();
        let mut options = InstanceOptions::default();
        options.clock = Clock::test(Arc::clone(&tc), 0);
        let mut inst = instance(&text, options);
        // Before the first period elapses nothing has been written.
        inst.step();
        assert!(!state.exists());
        tc.advance(10_000_000 + 1);
        inst.step();
        assert!(state.exists(), "reseal fires once virtual time passes 10ms");
        let first = std::fs::read(&state).unwrap();
        tc.advance(10_000_000 + 1);
        inst.step();
        let second = std::fs::read(&state).unwrap();
        assert_ne!(first, second, "each reseal writes a fresh blob");
    }

    #[test]
    fn control_plane_reads_and_writes() {
        let mut inst = instance(WIRE_GRAPH, InstanceOptions::default());
        inst.run(StopCondition::AfterRxPackets(100));
        assert_eq!(inst.read("src", "produced").unwrap(), "100");
        assert!(inst.read("missing", "x").is_none());
        assert!(inst.write("w", "nope", "1").is_err());
    }

    #[test]
    fn chained_instances_deliver_exactly_once() {
        let n: u64 = 5000;
        let shared = SharedMemory::new(512, 2048);
        let registry = RingRegistry::new();
        let devices = DeviceHub::new();
        let secrets = Arc::new(crate::attest::SecretStore::new(b"chain-test".to_vec()));
        let mk = |role| InstanceOptions {
            role,
            registry: Arc::clone(&registry),
            devices: Arc::clone(&devices),
            secrets: Arc::clone(&secrets),
            shared_memory: Some(shared.clone()),
            ..InstanceOptions::default()
        };
        let mut primary = instance(
            "
            src :: FromTestDevice(synth, 5000, 128);
            te :: ToEnclave;
            s :: Seal(sa_chain);
            tx :: DPDKRing(chain_t, tx, 64);
            src -> te -> s -> tx;
            ",
            mk(Role::Primary),
        );
        let mut secondary = instance(
            "
            rx :: DPDKRing(chain_t, rx, 64);
            u :: Unseal(sa_chain);
            out :: ToTestDevice(chain_sink);
            rx -> u -> out;
            ",
            mk(Role::Secondary),
        );
        let done = Arc::new(AtomicBool::new(false));
        let consumer = {
            let done = Arc::clone(&done);
            std::thread::spawn(move || {
                let stats = secondary.run(StopCondition::DrainedAfterFlag(done));
                (secondary, stats)
            })
        };
        let pstats = primary.run(StopCondition::Drained);
        done.store(true, Ordering::Release);
        let (secondary, sstats) = consumer.join().unwrap();

        assert_eq!(pstats.rx, n);
        assert!(pstats.error.is_none());
        assert!(sstats.error.is_none());
        // A tiny ring under one-core scheduling overflows sometimes; what
        // must hold is that everything enqueued arrives exactly once and
        // nothing else does.
        let enqueued: u64 = primary.read("tx", "enqueued").unwrap().parse().unwrap();
        let full_drops: u64 = primary.read("tx", "full_drops").unwrap().parse().unwrap();
        assert_eq!(enqueued + full_drops, n);
        assert_eq!(sstats.rx, enqueued);
        assert_eq!(sstats.rejects_total, 0);
        assert_eq!(
            secondary.read("u", "accepted").unwrap(),
            enqueued.to_string()
        );
        let sink = devices.device("chain_sink");
        assert_eq!(sink.tx_frames(), enqueued);
        // Delivery preserves order: the sink stream is an ordered
        // subsequence of the source stream.
        let originals = FrameGen::new(1, 128, 64).take(n as usize);
        let delivered = sink.take_captured();
        let mut source = originals.iter();
        for frame in &delivered {
            assert!(
                source.any(|o| o == frame),
                "sink emitted a frame out of order or from nowhere"
            );
        }
        // Both sides done: every shared buffer is home again.
        assert_eq!(shared.untrusted_pool.in_flight(), 0);
        assert_eq!(
            shared.untrusted_pool.stats().free,
            shared.untrusted_pool.stats().capacity
        );
    }
}
