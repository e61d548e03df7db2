//! Benchmark harness: canned applications measured for throughput and
//! latency.
//!
//! Throughput runs drive a seeded synthetic stream through a graph until it
//! drains and report packets and bytes per second of wall time. Because a
//! shared machine adds noise, directional comparisons between applications
//! should interleave their rounds and compare medians ([`compare`]) rather
//! than trust two separate runs.
//!
//! Latency runs use a virtual clock charged per read, so the numbers are
//! exact and reproducible: they isolate the framework's own overhead (clock
//! reads, timer policy) from machine noise. This makes policy differences
//! visible that wall-clock timing would bury, such as the cost of checking
//! timers on every scheduler pass.

use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;

use crate::elements::DeviceHub;
use crate::pktgen::FrameGen;
use crate::runtime::{
    Clock, Instance, InstanceOptions, RuntimeError, StopCondition, TestClock, TimerMode,
    NIC_PTP_READ_COST_NS,
};

/// The applications the bench harness knows how to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchApp {
    /// Pass-through; the upper bound every other app is measured against.
    Wire,
    /// Swap Ethernet source and destination: one cheap touch per packet.
    EtherMirror,
    /// Five-tuple rule evaluation against a small ordered rule set.
    Firewall,
    /// Copy every packet into enclave memory.
    ToEnclave,
    /// Copy in, then encrypt and authenticate out.
    Seal,
    /// The full chain crossing: protect, then verify and recover.
    Chain,
    /// Longest prefix match forwarding with TTL rewrite.
    IpRouter,
    /// Content scan over every payload byte.
    Ids,
}

impl BenchApp {
    pub const ALL: [BenchApp; 8] = [
        BenchApp::Wire,
        BenchApp::EtherMirror,
        BenchApp::Firewall,
        BenchApp::ToEnclave,
        BenchApp::Seal,
        BenchApp::Chain,
        BenchApp::IpRouter,
        BenchApp::Ids,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchApp::Wire => "wire",
            BenchApp::EtherMirror => "ethermirror",
            BenchApp::Firewall => "firewall",
            BenchApp::ToEnclave => "toenclave",
            BenchApp::Seal => "seal",
            BenchApp::Chain => "chain",
            BenchApp::IpRouter => "iprouter",
            BenchApp::Ids => "ids",
        }
    }

    pub fn parse(s: &str) -> Option<BenchApp> {
        BenchApp::ALL.iter().copied().find(|a| a.name() == s)
    }

    /// The graph downstream of the source element `src`, ending in the sink
    /// device `bench_out` with capture off.
    fn pipeline(&self) -> &'static str {
        match self {
            BenchApp::Wire => "w :: Wire;\nsrc -> w -> out;\n",
            BenchApp::EtherMirror => "m :: EtherMirror;\nsrc -> m -> out;\n",
            BenchApp::Firewall => concat!(
                "fw :: Firewall(bench.rules);\n",
                "bin :: Discard;\n",
                "src -> fw -> out;\n",
                "fw [1] -> bin;\n",
            ),
            BenchApp::ToEnclave => "te :: ToEnclave;\nsrc -> te -> out;\n",
            BenchApp::Seal => concat!(
                "te :: ToEnclave;\n",
                "enc :: Seal(bench_sa);\n",
                "src -> te -> enc -> out;\n",
            ),
            BenchApp::Chain => concat!(
                "te :: ToEnclave;\n",
                "enc :: Seal(bench_sa);\n",
                "dec :: Unseal(bench_sa);\n",
                "src -> te -> enc -> dec -> out;\n",
            ),
            BenchApp::IpRouter => concat!(
                "rt :: RouteTable(bench.routes);\n",
                "src -> rt -> out;\n",
                "rt [1] -> out;\n",
                "rt [2] -> out;\n",
                "rt [3] -> out;\n",
            ),
            BenchApp::Ids => concat!(
                "ids :: PatternMatch(bench.patterns);\n",
                "alerts :: Counter;\n",
                "bin :: Discard;\n",
                "src -> ids -> out;\n",
                "ids [1] -> alerts -> bin;\n",
            ),
        }
    }

    /// Confidential inputs the pipeline reads at build time, written next
    /// to the generated config.
    fn aux_files(&self) -> &'static [(&'static str, &'static str)] {
        const RULES: &str = "\
# Benchmark rule set: ten ordered rules; most packets walk nearly all of
# them before the broad allows at the bottom match.
drop  tcp  10.0.0.0/8    192.168.0.0/16   * 22
drop  tcp  *             *                * 23
drop  udp  172.16.0.0/12 *                * *
drop  udp  10.0.0.0/8    192.168.0.0/16   * 7
drop  icmp *             *                * *
allow udp  10.0.0.0/8    192.168.0.0/24   * 53
drop  udp  *             192.168.240.0/24 * *
allow tcp  *             *                * 443
allow udp  10.0.0.0/8    192.168.0.0/16   * *
allow *    *             *                * *
";
        const ROUTES: &str = "\
# Benchmark routes: split the destination space over four ports.
192.168.0.0/18   0
192.168.64.0/18  1
192.168.128.0/17 10.0.0.1 2
0.0.0.0/0        3
";
        const PATTERNS: &str = "\
# Benchmark signatures.
\\x90\\x90\\x90\\x90
GET /etc/passwd
cmd\\.exe
union\\s+select
";
        match self {
            BenchApp::Firewall => &[("bench.rules", RULES)],
            BenchApp::IpRouter => &[("bench.routes", ROUTES)],
            BenchApp::Ids => &[("bench.patterns", PATTERNS)],
            _ => &[],
        }
    }
}

/// Stream parameters shared by every run.
#[derive(Debug, Clone, Copy)]
pub struct Traffic {
    pub size: usize,
    pub flows: u32,
    pub seed: u64,
}

impl Default for Traffic {
    fn default() -> Self {
        Traffic {
            size: 128,
            flows: 64,
            seed: 1,
        }
    }
}

/// One throughput measurement.
#[derive(Debug, Clone, Serialize)]
pub struct ThroughputSample {
    pub app: String,
    pub size: usize,
    pub packets: u64,
    pub elapsed_ns: u64,
}

impl ThroughputSample {
    pub fn pps(&self) -> f64 {
        self.packets as f64 / (self.elapsed_ns as f64 / 1e9)
    }

    pub fn bytes_per_sec(&self) -> f64 {
        self.pps() * self.size as f64
    }
}

/// Latency distribution in virtual nanoseconds.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub app: String,
    pub samples: u64,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
}

fn write_aux(dir: &std::path::Path, app: BenchApp) -> std::io::Result<()> {
    for (name, content) in app.aux_files() {
        std::fs::write(dir.join(name), content)?;
    }
    Ok(())
}

fn bench_options(base_dir: PathBuf, clock: Clock, timer_mode: TimerMode) -> InstanceOptions {
    InstanceOptions {
        base_dir,
        clock,
        timer_mode,
        // Big enough that the pool never backpressures the source.
        pool_capacity: 8192,
        ..InstanceOptions::default()
    }
}

/// Drive `count` synthetic packets through `app` and time the drain.
pub fn run_throughput(
    app: BenchApp,
    traffic: Traffic,
    count: u64,
) -> Result<ThroughputSample, RuntimeError> {
    let dir = tempfile::tempdir().map_err(|e| RuntimeError::State(e.to_string()))?;
    write_aux(dir.path(), app).map_err(|e| RuntimeError::State(e.to_string()))?;
    let config = format!(
        "src :: FromTestDevice(synth, {count}, {size}, {seed}, {flows});\n\
         out :: ToTestDevice(bench_out, nocapture);\n{pipeline}",
        size = traffic.size,
        seed = traffic.seed,
        flows = traffic.flows,
        pipeline = app.pipeline(),
    );
    let options = bench_options(dir.path().to_path_buf(), Clock::host(), TimerMode::Optimized);
    let mut instance = Instance::from_text(&config, options)?;
    let t0 = std::time::Instant::now();
    let stats = instance.run(StopCondition::Drained);
    let elapsed_ns = t0.elapsed().as_nanos() as u64;
    if let Some(e) = stats.error {
        return Err(RuntimeError::State(e));
    }
    Ok(ThroughputSample {
        app: app.name().to_string(),
        size: traffic.size,
        packets: instance.counters().rx(),
        elapsed_ns: elapsed_ns.max(1),
    })
}

/// Median of `rounds` throughput runs for each app, with the rounds
/// interleaved across apps so transient machine load hits all of them
/// alike.
pub fn compare(
    apps: &[BenchApp],
    traffic: Traffic,
    count: u64,
    rounds: usize,
) -> Result<Vec<ThroughputSample>, RuntimeError> {
    let mut all: Vec<Vec<ThroughputSample>> = vec![Vec::new(); apps.len()];
    for _ in 0..rounds.max(1) {
        for (i, app) in apps.iter().enumerate() {
            all[i].push(run_throughput(*app, traffic, count)?);
        }
    }
    Ok(all
        .into_iter()
        .map(|mut samples| {
            samples.sort_by_key(|s| s.elapsed_ns);
            samples.swap_remove(samples.len() / 2)
        })
        .collect())
}

/// Measure per-packet latency on the virtual clock: inject one frame, run
/// until it has been taken in, and read the interval. Each boundary read
/// itself costs [`NIC_PTP_READ_COST_NS`], so an idle pipeline floors at
/// twice that; timer policy and any additional instrumentation raise it.
pub fn run_latency(
    app: BenchApp,
    traffic: Traffic,
    samples: usize,
    timer_mode: TimerMode,
) -> Result<LatencyReport, RuntimeError> {
    let dir = tempfile::tempdir().map_err(|e| RuntimeError::State(e.to_string()))?;
    write_aux(dir.path(), app).map_err(|e| RuntimeError::State(e.to_string()))?;
    let config = format!(
        "src :: FromTestDevice(queue, bench_in);\n\
         out :: ToTestDevice(bench_out, nocapture);\n{pipeline}",
        pipeline = app.pipeline(),
    );
    let test_clock = TestClock::new();
    let clock = Clock::test(Arc::clone(&test_clock), NIC_PTP_READ_COST_NS);
    let devices = DeviceHub::new();
    let device = devices.device("bench_in");
    let options = InstanceOptions {
        devices,
        ..bench_options(dir.path().to_path_buf(), clock, timer_mode)
    };
    let mut instance = Instance::from_text(&config, options)?;
    let mut gen = FrameGen::new(traffic.seed, traffic.size, traffic.flows);
    let mut intervals = Vec::with_capacity(samples);
    for i in 0..samples as u64 {
        device.inject_frame(gen.next_frame());
        let t0 = instance.clock().read_pre();
        let stats = instance.run(StopCondition::AfterRxPackets(i + 1));
        let t1 = instance.clock().read_post();
        if let Some(e) = stats.error {
            return Err(RuntimeError::State(e));
        }
        intervals.push(t1 - t0);
    }
    intervals.sort_unstable();
    let pick = |q: f64| intervals[((intervals.len() - 1) as f64 * q) as usize];
    Ok(LatencyReport {
        app: app.name().to_string(),
        samples: intervals.len() as u64,
        p50_ns: pick(0.50),
        p90_ns: pick(0.90),
        p99_ns: pick(0.99),
    })
}
