//! The `slick` command line: run element graphs, measure them, generate
//! traffic, and operate the attestation services.
//!
//! Exit codes: 0 success, 1 error, 2 a secondary could not attach to its
//! ring (the primary is not running), 3 attestation was refused.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use slick::attest::{self, BootstrapParams, SecretStore};
use slick::bench::{self, BenchApp, Traffic};
use slick::chain::{RingRegistry, Role};
use slick::config;
use slick::elements::DeviceHub;
use slick::pcap::PcapWriter;
use slick::pktgen::FrameGen;
use slick::runtime::{
    Clock, Instance, InstanceOptions, RuntimeError, SharedMemory, StopCondition, TimerMode,
};

const CAS_ADDR_ENV: &str = "SLICK_CAS_ADDR";
const LAS_ADDR_ENV: &str = "SLICK_LAS_ADDR";

const EXIT_NO_PRIMARY: u8 = 2;
const EXIT_ATTESTATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "slick",
    version,
    about = "Confidential packet processing on untrusted machines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an element graph until its sources drain or a stop limit hits.
    Run(RunArgs),
    /// Measure canned applications for throughput or latency.
    Bench(BenchArgs),
    /// Generate a deterministic traffic capture.
    Pktgen(PktgenArgs),
    /// Serve the configuration and attestation service.
    Cas(CasArgs),
    /// Serve a local attestation cache in front of a CAS.
    Las(LasArgs),
    /// Print the measurement a configuration attests as.
    Measure(MeasureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a `.slick` graph file. Repeat the flag to run a chain of
    /// graphs over shared rings: the first is the primary, the rest attach
    /// as secondaries and drain until the primary finishes.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Process role for shared rings: the primary creates them,
    /// secondaries attach. Applies when running a single graph.
    #[arg(long, value_enum, default_value_t = RoleArg::Primary)]
    role: RoleArg,
    /// Identity string folded into the first instance's measurement
    /// (default: the config file stem).
    #[arg(long)]
    identity: Option<String>,
    /// Attest to this CAS and fetch secrets before starting
    /// (or set SLICK_CAS_ADDR).
    #[arg(long)]
    cas: Option<String>,
    /// Attest through this local attestation service instead
    /// (or set SLICK_LAS_ADDR).
    #[arg(long)]
    las: Option<String>,
    /// Seal runtime state to this file (adds periodic persistence if the
    /// graph has a StateFile element; otherwise saves on shutdown).
    #[arg(long)]
    state_file: Option<PathBuf>,
    /// Write run statistics as JSON here (`-` for stdout).
    #[arg(long)]
    stats_json: Option<PathBuf>,
    /// Stop after this many packets have entered the graph.
    #[arg(long)]
    rx_count: Option<u64>,
    /// Stop after this much time (e.g. on graphs fed by rings that never
    /// drain).
    #[arg(long)]
    duration_ms: Option<u64>,
    /// Check timers on every scheduler pass instead of only when one is due.
    #[arg(long, value_enum, default_value_t = TimerModeArg::Optimized)]
    timer_mode: TimerModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Primary,
    Secondary,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimerModeArg {
    Optimized,
    EveryIteration,
}

impl From<TimerModeArg> for TimerMode {
    fn from(m: TimerModeArg) -> TimerMode {
        match m {
            TimerModeArg::Optimized => TimerMode::Optimized,
            TimerModeArg::EveryIteration => TimerMode::EveryIteration,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Application to measure, or `all`.
    #[arg(long, default_value = "all")]
    app: String,
    /// What to measure.
    #[arg(long, value_enum, default_value_t = BenchMode::Throughput)]
    mode: BenchMode,
    /// Frame sizes to sweep, comma separated.
    #[arg(long, default_value = "64,128,256,512,1024,1500", value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Packets per throughput round.
    #[arg(long, default_value_t = 100_000)]
    count: u64,
    /// Rounds per app; the median is reported.
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Packets per latency distribution.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = TimerModeArg::Optimized)]
    timer_mode: TimerModeArg,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Throughput,
    Latency,
}

#[derive(Args)]
struct PktgenArgs {
    /// Output capture file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: u64,
    /// Frame length in bytes.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Distinct flows in the stream (0 = unbounded).
    #[arg(long, default_value_t = 64)]
    flows: u32,
}

#[derive(Args)]
struct CasArgs {
    #[arg(long, default_value = "127.0.0.1:7700")]
    listen: String,
    /// Append-only policy and attestation record store.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct LasArgs {
    #[arg(long, default_value = "127.0.0.1:7701")]
    listen: String,
    /// Upstream CAS address (or set SLICK_CAS_ADDR).
    #[arg(long)]
    cas: Option<String>,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    identity: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("slick: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Bench(args) => cmd_bench(args).map(|()| ExitCode::SUCCESS),
        Cmd::Pktgen(args) => cmd_pktgen(args).map(|()| ExitCode::SUCCESS),
        Cmd::Cas(args) => cmd_cas(args).map(|()| ExitCode::SUCCESS),
        Cmd::Las(args) => cmd_las(args).map(|()| ExitCode::SUCCESS),
        Cmd::Measure(args) => cmd_measure(args).map(|()| ExitCode::SUCCESS),
    }
}

fn identity_for(config_path: &Path, identity: Option<String>) -> String {
    identity.unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "instance".to_string())
    })
}

fn addr_from(flag: Option<String>, env: &str) -> Option<String> {
    flag.or_else(|| std::env::var(env).ok())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let chained = args.config.len() > 1;
    if chained && args.state_file.is_some() {
        bail!("--state-file is ambiguous over several graphs; give each a StateFile element");
    }
    let secrets = Arc::new(SecretStore::from_env());
    let registry = RingRegistry::new();
    let devices = DeviceHub::new();
    let defaults = InstanceOptions::default();
    let shared_memory = chained
        .then(|| SharedMemory::new(defaults.pool_capacity, defaults.buf_size));
    // Prefer the local service when both are reachable choices.
    let attest_addr = addr_from(args.las, LAS_ADDR_ENV).or(addr_from(args.cas, CAS_ADDR_ENV));

    let mut instances = Vec::new();
    for (i, path) in args.config.iter().enumerate() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let parsed = config::parse(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let identity = identity_for(path, if i == 0 { args.identity.clone() } else { None });

        if let Some(addr) = &attest_addr {
            let m = attest::measurement(&identity, &parsed.canonical_text());
            log::info!("attesting to {addr} as {identity} ({m})");
            let params = BootstrapParams::new(&identity, &m);
            match attest::bootstrap(addr, &attest::hw_secret_from_env(), &params) {
                Ok(outcome) => {
                    for phase in &outcome.phases {
                        log::debug!("attestation {}: {} ns", phase.name, phase.duration_ns);
                    }
                    log::info!("provisioned {} secret(s) for {identity}", outcome.secrets.len());
                    for (name, value) in outcome.secrets {
                        secrets.insert(&name, value);
                    }
                }
                Err(e) => {
                    eprintln!("slick: attestation failed for {identity}: {e}");
                    return Ok(ExitCode::from(EXIT_ATTESTATION));
                }
            }
        }

        let role = match (chained, i, args.role) {
            (false, _, RoleArg::Primary) => Role::Primary,
            (false, _, RoleArg::Secondary) => Role::Secondary,
            (true, 0, _) => Role::Primary,
            (true, _, _) => Role::Secondary,
        };
        let options = InstanceOptions {
            role,
            registry: Arc::clone(&registry),
            devices: Arc::clone(&devices),
            secrets: Arc::clone(&secrets),
            base_dir: path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
            clock: Clock::from_env().map_err(|e| anyhow::anyhow!(e))?,
            timer_mode: args.timer_mode.into(),
            state_file: args.state_file.clone(),
            shared_memory: shared_memory.clone(),
            ..InstanceOptions::default()
        };
        match Instance::new(&parsed, options) {
            Ok(instance) => instances.push((identity, instance)),
            // A secondary that cannot find its ring mirrors the
            // probe-attach failure of a missing primary: a distinct exit
            // code so init scripts can order the two.
            Err(RuntimeError::Build(b))
                if b.to_string().contains("is the primary running") =>
            {
                eprintln!("slick: {b}");
                return Ok(ExitCode::from(EXIT_NO_PRIMARY));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let primary_stop = if let Some(n) = args.rx_count {
        StopCondition::AfterRxPackets(n)
    } else if let Some(ms) = args.duration_ms {
        StopCondition::AfterDuration(Duration::from_millis(ms))
    } else {
        StopCondition::Drained
    };

    let mut all_stats = Vec::new();
    if chained {
        // The primary drives; downstream instances drain until it finishes.
        let done = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let mut joins = Vec::new();
        for (i, (identity, mut instance)) in instances.into_iter().enumerate().rev() {
            let stop = if i == 0 {
                primary_stop.clone()
            } else {
                StopCondition::DrainedAfterFlag(Arc::clone(&done))
            };
            let done = Arc::clone(&done);
            joins.push(std::thread::spawn(move || {
                let stats = instance.run(stop);
                if i == 0 {
                    done.store(true, std::sync::atomic::Ordering::Release);
                }
                (identity, stats)
            }));
        }
        for join in joins {
            let (identity, stats) = join.join().expect("instance thread panicked");
            all_stats.push((identity, stats));
        }
        all_stats.reverse();
    } else {
        let (identity, mut instance) = instances.pop().expect("one instance");
        all_stats.push((identity, instance.run(primary_stop)));
    }

    if let Some(path) = &args.stats_json {
        let json = if chained {
            serde_json::to_string_pretty(&all_stats.iter().map(|(_, s)| s).collect::<Vec<_>>())?
        } else {
            serde_json::to_string_pretty(&all_stats[0].1)?
        };
        if path.as_os_str() == "-" {
            println!("{json}");
        } else {
            std::fs::write(path, json)
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    let mut code = ExitCode::SUCCESS;
    for (identity, stats) in &all_stats {
        eprintln!(
            "{identity}: rx {} tx {} drops {} rejects {} in {:.3}s",
            stats.rx,
            stats.tx,
            stats.drops,
            stats.rejects_total,
            stats.elapsed_ns as f64 / 1e9
        );
        if let Some(e) = &stats.error {
            eprintln!("slick: {identity} stopped: {e}");
            code = ExitCode::from(1);
        }
    }
    Ok(code)
}

fn parse_apps(arg: &str) -> Result<Vec<BenchApp>> {
    if arg == "all" {
        return Ok(BenchApp::ALL.to_vec());
    }
    arg.split(',')
        .map(|name| {
            BenchApp::parse(name.trim())
                .ok_or_else(|| anyhow::anyhow!("unknown app `{name}`; see --help"))
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let apps = parse_apps(&args.app)?;
    match args.mode {
        BenchMode::Throughput => {
            if !args.json {
                println!(
                    "{:<12} {:>6} {:>12} {:>12} {:>10}",
                    "app", "size", "pps", "MB/s", "packets"
                );
            }
            for &size in &args.sizes {
                let traffic = Traffic {
                    size,
                    ..Traffic::default()
                };
                let medians = bench::compare(&apps, traffic, args.count, args.rounds)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                for s in medians {
                    if args.json {
                        println!("{}", serde_json::to_string(&s)?);
                    } else {
                        println!(
                            "{:<12} {:>6} {:>12.0} {:>12.2} {:>10}",
                            s.app,
                            s.size,
                            s.pps(),
                            s.bytes_per_sec() / 1e6,
                            s.packets
                        );
                    }
                }
            }
        }
        BenchMode::Latency => {
            if !args.json {
                println!(
                    "{:<12} {:>6} {:>10} {:>10} {:>10}",
                    "app", "size", "p50 ns", "p90 ns", "p99 ns"
                );
            }
            for &size in &args.sizes {
                let traffic = Traffic {
                    size,
                    ..Traffic::default()
                };
                for &app in &apps {
                    let r = bench::run_latency(app, traffic, args.samples, args.timer_mode.into())
                        .map_err(|e| anyhow::anyhow!("{e}"))?;
                    if args.json {
                        println!("{}", serde_json::to_string(&r)?);
                    } else {
                        println!(
                            "{:<12} {:>6} {:>10} {:>10} {:>10}",
                            r.app, size, r.p50_ns, r.p90_ns, r.p99_ns
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn cmd_pktgen(args: PktgenArgs) -> Result<()> {
    let mut gen = FrameGen::new(args.seed, args.size, args.flows);
    let mut writer =
        PcapWriter::create(&args.out).map_err(|e| anyhow::anyhow!("{e}"))?;
    for i in 0..args.count {
        // Synthetic timestamps: one packet per microsecond.
        let (sec, usec) = ((i / 1_000_000) as u32, (i % 1_000_000) as u32);
        writer
            .write_record(sec, usec, &gen.next_frame())
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    writer.finish().map_err(|e| anyhow::anyhow!("{e}"))?;
    eprintln!(
        "wrote {} frames of {} bytes to {}",
        args.count,
        gen.frame_len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_cas(args: CasArgs) -> Result<()> {
    let handle = attest::spawn_cas(&args.listen, attest::hw_secret_from_env(), args.store)
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    eprintln!("cas listening on {}", handle.addr());
    park();
}

fn cmd_las(args: LasArgs) -> Result<()> {
    let Some(cas) = addr_from(args.cas, CAS_ADDR_ENV) else {
        bail!("a las needs an upstream: pass --cas or set {CAS_ADDR_ENV}");
    };
    let handle = attest::spawn_las(&args.listen, &cas, attest::hw_secret_from_env())
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    eprintln!("las listening on {} (upstream {cas})", handle.addr());
    park();
}

fn park() -> ! {
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn cmd_measure(args: MeasureArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read {}", args.config.display()))?;
    let parsed = config::parse(&text).map_err(|e| anyhow::anyhow!("{e}"))?;
    let identity = identity_for(&args.config, args.identity);
    println!("{}", attest::measurement(&identity, &parsed.canonical_text()));
    Ok(())
}
