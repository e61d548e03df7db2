//! Time sources and the cost of asking for the time.
//!
//! A poll-mode data path can afford almost nothing per packet, and on many
//! deployments the only trustworthy clock is the NIC's PTP clock, which
//! costs a PCIe round trip of roughly 0.9 microseconds per read. The
//! runtime therefore treats clock reads as a budgeted resource: every read
//! is counted, every read is charged its cost against virtual time, and the
//! scheduler is built to perform zero reads on the steady-state path unless
//! something actually needs the time.
//!
//! Virtual time makes the cost observable and deterministic: it advances
//! with the underlying time source and additionally by [`Clock::read_cost_ns`]
//! for every read performed. An interval measured with [`Clock::read_pre`]
//! at the start and [`Clock::read_post`] at the end therefore includes the
//! full cost of both boundary reads plus any reads that happened in between.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Cost of one NIC PTP clock read.
pub const NIC_PTP_READ_COST_NS: u64 = 900;

/// Environment variable selecting the clock for command line runs.
pub const CLOCK_ENV: &str = "SLICK_CLOCK";

/// A manually driven time source for deterministic tests.
#[derive(Debug, Default)]
pub struct TestClock {
    now_ns: AtomicU64,
}

impl TestClock {
    pub fn new() -> Arc<Self> {
        Arc::new(TestClock::default())
    }

    pub fn set(&self, now_ns: u64) {
        self.now_ns.store(now_ns, Ordering::Relaxed);
    }

    pub fn advance(&self, delta_ns: u64) {
        self.now_ns.fetch_add(delta_ns, Ordering::Relaxed);
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns.load(Ordering::Relaxed)
    }
}

enum Source {
    /// The host's monotonic clock: free to read, but on a real deployment
    /// its integrity depends on the untrusted OS.
    Host,
    /// NIC PTP clock: trustworthy, charged per read.
    NicPtp,
    /// Test clock: time moves only when the test moves it.
    Test(Arc<TestClock>),
}

/// A time source plus read accounting.
pub struct Clock {
    source: Source,
    origin: Instant,
    read_cost_ns: u64,
    reads: AtomicU64,
    charged_ns: AtomicU64,
}

impl Clock {
    pub fn host() -> Self {
        Clock::new(Source::Host, 0)
    }

    pub fn nic_ptp() -> Self {
        Clock::new(Source::NicPtp, NIC_PTP_READ_COST_NS)
    }

    pub fn test(clock: Arc<TestClock>, read_cost_ns: u64) -> Self {
        Clock::new(Source::Test(clock), read_cost_ns)
    }

    /// Clock named by `SLICK_CLOCK` (`host` or `nicptp`); host by default.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(CLOCK_ENV) {
            Err(_) => Ok(Clock::host()),
            Ok(v) => match v.as_str() {
                "host" => Ok(Clock::host()),
                "nicptp" => Ok(Clock::nic_ptp()),
                other => Err(format!("{CLOCK_ENV} must be host or nicptp, not `{other}`")),
            },
        }
    }

    fn new(source: Source, read_cost_ns: u64) -> Self {
        Clock {
            source,
            origin: Instant::now(),
            read_cost_ns,
            reads: AtomicU64::new(0),
            charged_ns: AtomicU64::new(0),
        }
    }

    fn base_ns(&self) -> u64 {
        match &self.source {
            Source::Host | Source::NicPtp => self.origin.elapsed().as_nanos() as u64,
            Source::Test(c) => c.now_ns(),
        }
    }

    fn charge(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.charged_ns
            .fetch_add(self.read_cost_ns, Ordering::Relaxed);
    }

    /// Read the clock, timestamping the moment the read was issued (the
    /// read's own cost lands after the returned instant). Use for the start
    /// of a measured interval.
    pub fn read_pre(&self) -> u64 {
        let t = self.base_ns() + self.charged_ns.load(Ordering::Relaxed);
        self.charge();
        t
    }

    /// Read the clock, timestamping the moment the read completed (after
    /// its own cost). Use for the end of a measured interval and for
    /// ordinary "what time is it" reads.
    pub fn read_post(&self) -> u64 {
        self.charge();
        self.base_ns() + self.charged_ns.load(Ordering::Relaxed)
    }

    /// How many reads have been performed.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Total virtual time charged for reads so far.
    pub fn charged_ns(&self) -> u64 {
        self.charged_ns.load(Ordering::Relaxed)
    }

    pub fn read_cost_ns(&self) -> u64 {
        self.read_cost_ns
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_counted_and_charged() {
        let tc = TestClock::new();
        let clock = Clock::test(Arc::clone(&tc), 900);
        tc.set(1_000);
        assert_eq!(clock.read_pre(), 1_000);
        assert_eq!(clock.reads(), 1);
        assert_eq!(clock.charged_ns(), 900);
        // Post-read includes its own cost and everything charged before.
        assert_eq!(clock.read_post(), 1_000 + 1_800);
        assert_eq!(clock.reads(), 2);
    }

    #[test]
    fn interval_includes_both_boundary_reads() {
        let tc = TestClock::new();
        let clock = Clock::test(Arc::clone(&tc), 900);
        let t1 = clock.read_pre();
        tc.advance(5_000);
        let t2 = clock.read_post();
        assert_eq!(t2 - t1, 5_000 + 2 * 900);
    }

    #[test]
    fn intervening_reads_inflate_a_measured_interval() {
        let tc = TestClock::new();
        let clock = Clock::test(Arc::clone(&tc), 900);
        let t1 = clock.read_pre();
        clock.read_post();
        clock.read_post();
        let t2 = clock.read_post();
        assert_eq!(t2 - t1, 4 * 900);
    }

    #[test]
    fn host_clock_reads_are_free_but_counted() {
        let clock = Clock::host();
        let t1 = clock.read_pre();
        let t2 = clock.read_post();
        assert!(t2 >= t1);
        assert_eq!(clock.reads(), 2);
        assert_eq!(clock.charged_ns(), 0);
    }

    #[test]
    fn nic_ptp_cost_matches_two_reads_per_packet() {
        let clock = Clock::nic_ptp();
        let t1 = clock.read_pre();
        let t2 = clock.read_post();
        assert!(t2 - t1 >= 2 * NIC_PTP_READ_COST_NS);
        assert_eq!(clock.charged_ns(), 2 * NIC_PTP_READ_COST_NS);
    }
}
