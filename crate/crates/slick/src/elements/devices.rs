//! Test devices: packet sources and sinks backed by in-memory queues, pcap
//! files, or synthetic traffic. They stand in for NIC ports so a graph can
//! run anywhere, and their injection queues double as the adversarial input
//! surface for boundary tests.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::chain::{admit_word, RejectCounters};
use crate::packet::{EnclaveBounds, PacketHandle, PacketPool};
use crate::pcap::PcapReader;
use crate::pktgen::FrameGen;

use super::{BuildError, Element, ElementInit, ExecCtx, Ports, BURST};

/// One simulated device port: frames queued for the graph, raw address words
/// (delivered like shared-memory descriptors, so they are validated before
/// use), and frames the graph transmitted.
pub struct TestDevice {
    name: String,
    inject: Mutex<VecDeque<Vec<u8>>>,
    raw_words: Mutex<VecDeque<u64>>,
    captured: Mutex<Vec<Vec<u8>>>,
    capture: AtomicBool,
    tx_frames: AtomicU64,
    tx_bytes: AtomicU64,
}

impl TestDevice {
    fn new(name: &str) -> Self {
        TestDevice {
            name: name.to_string(),
            inject: Mutex::new(VecDeque::new()),
            raw_words: Mutex::new(VecDeque::new()),
            captured: Mutex::new(Vec::new()),
            capture: AtomicBool::new(true),
            tx_frames: AtomicU64::new(0),
            tx_bytes: AtomicU64::new(0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Queue a frame for delivery into the graph.
    pub fn inject_frame(&self, frame: impl Into<Vec<u8>>) {
        self.inject.lock().unwrap().push_back(frame.into());
    }

    /// Queue a bare address word, exactly as a peer across shared memory
    /// would publish one. The receiving element validates it fully.
    pub fn inject_word(&self, word: u64) {
        self.raw_words.lock().unwrap().push_back(word);
    }

    /// Frames and words still waiting to enter the graph.
    pub fn pending(&self) -> usize {
        self.inject.lock().unwrap().len() + self.raw_words.lock().unwrap().len()
    }

    /// Keep copies of transmitted frames? On by default; benchmarks turn it
    /// off so a long run does not accumulate memory.
    pub fn set_capture(&self, on: bool) {
        self.capture.store(on, Ordering::Relaxed);
    }

    /// Copies of every transmitted frame since the last [`Self::take_captured`].
    pub fn captured(&self) -> Vec<Vec<u8>> {
        self.captured.lock().unwrap().clone()
    }

    pub fn take_captured(&self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.captured.lock().unwrap())
    }

    pub fn tx_frames(&self) -> u64 {
        self.tx_frames.load(Ordering::Relaxed)
    }

    pub fn tx_bytes(&self) -> u64 {
        self.tx_bytes.load(Ordering::Relaxed)
    }

    fn record_tx(&self, frame: &[u8]) {
        self.tx_frames.fetch_add(1, Ordering::Relaxed);
        self.tx_bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        if self.capture.load(Ordering::Relaxed) {
            self.captured.lock().unwrap().push(frame.to_vec());
        }
    }
}

/// Named [`TestDevice`]s shared between a runtime instance and the test or
/// tool driving it. Devices are created on first use.
#[derive(Default)]
pub struct DeviceHub {
    devices: Mutex<HashMap<String, Arc<TestDevice>>>,
}

impl DeviceHub {
    pub fn new() -> Arc<Self> {
        Arc::new(DeviceHub::default())
    }

    pub fn device(&self, name: &str) -> Arc<TestDevice> {
        let mut devices = self.devices.lock().unwrap();
        Arc::clone(
            devices
                .entry(name.to_string())
                .or_insert_with(|| Arc::new(TestDevice::new(name))),
        )
    }
}

enum Feed {
    /// Frames loaded up front (pcap replay).
    Preloaded(VecDeque<Vec<u8>>),
    /// Synthesized on demand so long runs need no frame backlog. `stash`
    /// holds a generated frame that could not be allocated yet; the
    /// generator has already advanced past it, so it must not be skipped.
    Synth {
        gen: FrameGen,
        remaining: u64,
        stash: Option<Vec<u8>>,
    },
    /// Pulled live from a [`TestDevice`] queue.
    Device(Arc<TestDevice>),
}

/// Packet source. Three forms:
///
/// * `FromTestDevice(pcap, file)` replays a capture file;
/// * `FromTestDevice(synth, count, size [, seed [, flows]])` generates
///   traffic deterministically;
/// * `FromTestDevice(queue, name)` reads whatever the named device's queues
///   hold, including raw address words, which pass through the same
///   validation as ring input.
struct FromTestDevice {
    feed: Feed,
    pool: Arc<PacketPool>,
    bounds: EnclaveBounds,
    rejects: Arc<RejectCounters>,
    produced: u64,
}

impl FromTestDevice {
    /// Emit one packet if the feed has one and the pool can hold it.
    /// Returns false when the task should stop for this slot.
    fn pump_one(&mut self, ctx: &mut ExecCtx) -> bool {
        match &mut self.feed {
            Feed::Preloaded(frames) => {
                let Some(frame) = frames.front() else {
                    return false;
                };
                let Some(handle) = self.pool.alloc_frame(frame) else {
                    return false;
                };
                frames.pop_front();
                self.produced += 1;
                ctx.count_rx(1);
                ctx.emit(0, handle);
                true
            }
            Feed::Synth {
                gen,
                remaining,
                stash,
            } => {
                let frame = match stash.take() {
                    Some(f) => f,
                    None => {
                        if *remaining == 0 {
                            return false;
                        }
                        *remaining -= 1;
                        gen.next_frame()
                    }
                };
                match self.pool.alloc_frame(&frame) {
                    Some(handle) => {
                        self.produced += 1;
                        ctx.count_rx(1);
                        ctx.emit(0, handle);
                        true
                    }
                    None => {
                        *stash = Some(frame);
                        false
                    }
                }
            }
            Feed::Device(dev) => {
                let word = dev.raw_words.lock().unwrap().pop_front();
                if let Some(word) = word {
                    if let Ok(handle) = admit_word(word, &self.pool, &self.bounds, &self.rejects)
                    {
                        self.produced += 1;
                        ctx.count_rx(1);
                        ctx.emit(0, handle);
                    }
                    // A rejected word is consumed and counted by reason; it
                    // never becomes a packet.
                    return true;
                }
                let frame = dev.inject.lock().unwrap().pop_front();
                let Some(frame) = frame else {
                    return false;
                };
                match self.pool.alloc_frame(&frame) {
                    Some(handle) => {
                        self.produced += 1;
                        ctx.count_rx(1);
                        ctx.emit(0, handle);
                        true
                    }
                    None => {
                        dev.inject.lock().unwrap().push_front(frame);
                        false
                    }
                }
            }
        }
    }
}

impl Element for FromTestDevice {
    fn class_name(&self) -> &'static str {
        "FromTestDevice"
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

    fn run_task(&mut self, ctx: &mut ExecCtx) -> bool {
        let mut progress = false;
        for _ in 0..BURST {
            if !self.pump_one(ctx) {
                break;
            }
            progress = true;
        }
        progress
    }

    fn source_exhausted(&self) -> Option<bool> {
        Some(match &self.feed {
            Feed::Preloaded(frames) => frames.is_empty(),
            Feed::Synth {
                remaining, stash, ..
            } => *remaining == 0 && stash.is_none(),
            Feed::Device(dev) => dev.pending() == 0,
        })
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "produced" => Some(self.produced.to_string()),
            _ => None,
        }
    }
}

pub(super) fn build_from_test_device(
    init: &ElementInit,
) -> Result<Box<dyn Element>, BuildError> {
    let mode = init
        .args
        .first()
        .ok_or_else(|| init.err("FromTestDevice needs a mode: pcap, synth, or queue"))?;
    let feed = match mode.as_str() {
        "pcap" => {
            let [_, path] = init.args else {
                return Err(init.err("usage: FromTestDevice(pcap, file)"));
            };
            let path = init.resolve_path(path);
            let mut reader = PcapReader::open(&path)
                .map_err(|e| init.err(format!("cannot open {}: {e}", path.display())))?;
            let records = reader
                .read_all()
                .map_err(|e| init.err(format!("cannot read {}: {e}", path.display())))?;
            Feed::Preloaded(records.into_iter().map(|r| r.data).collect())
        }
        "synth" => {
            let (count, size, rest) = match init.args {
                [_, count, size, rest @ ..] if rest.len() <= 2 => (count, size, rest),
                _ => {
                    return Err(
                        init.err("usage: FromTestDevice(synth, count, size [, seed [, flows]])")
                    )
                }
            };
            let count: u64 = count
                .parse()
                .map_err(|_| init.err("synth count must be an integer"))?;
            let size: usize = size
                .parse()
                .map_err(|_| init.err("synth size must be an integer"))?;
            let seed: u64 = match rest.first() {
                Some(s) => s
                    .parse()
                    .map_err(|_| init.err("synth seed must be an integer"))?,
                None => 1,
            };
            let flows: u32 = match rest.get(1) {
                Some(s) => s
                    .parse()
                    .map_err(|_| init.err("synth flows must be an integer"))?,
                None => 64,
            };
            if size > init.untrusted_pool.buf_size() as usize {
                return Err(init.err("synth size exceeds the pool buffer size"));
            }
            Feed::Synth {
                gen: FrameGen::new(seed, size, flows),
                remaining: count,
                stash: None,
            }
        }
        "queue" => {
            let [_, name] = init.args else {
                return Err(init.err("usage: FromTestDevice(queue, name)"));
            };
            Feed::Device(init.devices.device(name))
        }
        other => return Err(init.err(format!("unknown FromTestDevice mode `{other}`"))),
    };
    Ok(Box::new(FromTestDevice {
        feed,
        pool: Arc::clone(init.untrusted_pool),
        bounds: init.domain.bounds(),
        rejects: Arc::clone(init.rejects),
        produced: 0,
    }))
}

/// Packet sink: records the frame on the named device and frees the buffer.
struct ToTestDevice {
    device: Arc<TestDevice>,
}

impl Element for ToTestDevice {
    fn class_name(&self) -> &'static str {
        "ToTestDevice"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 0)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        if let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) {
            self.device.record_tx(pool.data(&packet));
        }
        ctx.count_tx(1);
        ctx.release(packet);
    }
}

pub(super) fn build_to_test_device(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let (name, rest) = match init.args {
        [name] => (name, None),
        [name, opt] => (name, Some(opt.as_str())),
        _ => return Err(init.err("usage: ToTestDevice(name [, nocapture])")),
    };
    let device = init.devices.device(name);
    match rest {
        None => {}
        Some("nocapture") => device.set_capture(false),
        Some(other) => return Err(init.err(format!("unknown option `{other}`"))),
    }
    Ok(Box::new(ToTestDevice { device }))
}
