//! Structural elements: pass-through, mirroring, counting, classification
//! and ARP answering.

use crate::packet::view::{
    self, parse_arp, parse_ipv4_addr,swap_ether_addrs, ARP_OPER_REQUEST,
};
use crate::packet::PacketHandle;

use super::{BuildError, Element, ElementInit, ExecCtx, Ports};

/// Forwards every packet unchanged: the do-nothing baseline that measures
/// pure framework overhead.
struct Wire;

impl Element for Wire {
    fn class_name(&self) -> &'static str {
        "Wire"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        ctx.emit(0, packet);
    }
}

pub(super) fn build_wire(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if !init.args.is_empty() {
        return Err(init.err("Wire takes no arguments"));
    }
    Ok(Box::new(Wire))
}

/// Swaps the Ethernet source and destination so the frame heads back where
/// it came from. Frames too short to carry an Ethernet header are dropped.
struct EtherMirror;

impl Element for EtherMirror {
    fn class_name(&self) -> &'static str {
        "EtherMirror"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, mut packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        if swap_ether_addrs(pool.data_mut(&mut packet)) {
            ctx.emit(0, packet);
        } else {
            ctx.drop_packet(packet);
        }
    }
}

pub(super) fn build_ether_mirror(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if !init.args.is_empty() {
        return Err(init.err("EtherMirror takes no arguments"));
    }
    Ok(Box::new(EtherMirror))
}

/// Counts packets and bytes, then passes them along. The counters survive
/// restarts when the graph has a `StateFile`.
struct Counter {
    packets: u64,
    bytes: u64,
}

impl Element for Counter {
    fn class_name(&self) -> &'static str {
        "Counter"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        if let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) {
            self.packets += 1;
            self.bytes += pool.len(&packet) as u64;
        }
        ctx.emit(0, packet);
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "count" => Some(self.packets.to_string()),
            "bytes" => Some(self.bytes.to_string()),
            _ => None,
        }
    }

    fn write_handler(&mut self, name: &str, _value: &str) -> Result<(), String> {
        match name {
            "reset" => {
                self.packets = 0;
                self.bytes = 0;
                Ok(())
            }
            other => Err(format!("no handler `{other}`")),
        }
    }

    fn state_save(&self) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(&self.packets.to_le_bytes());
        out.extend_from_slice(&self.bytes.to_le_bytes());
        Some(out)
    }

    fn state_load(&mut self, data: &[u8]) -> Result<(), String> {
        if data.len() != 16 {
            return Err(format!("counter state must be 16 bytes, got {}", data.len()));
        }
        self.packets = u64::from_le_bytes(data[0..8].try_into().unwrap());
        self.bytes = u64::from_le_bytes(data[8..16].try_into().unwrap());
        Ok(())
    }
}

pub(super) fn build_counter(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if !init.args.is_empty() {
        return Err(init.err("Counter takes no arguments"));
    }
    Ok(Box::new(Counter {
        packets: 0,
        bytes: 0,
    }))
}

/// Drops everything it receives.
struct Discard;

impl Element for Discard {
    fn class_name(&self) -> &'static str {
        "Discard"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 0)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        ctx.drop_packet(packet);
    }
}

pub(super) fn build_discard(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if !init.args.is_empty() {
        return Err(init.err("Discard takes no arguments"));
    }
    Ok(Box::new(Discard))
}

/// One conjunction of byte comparisons: every `offset/hex` term must match.
struct ClassifierPattern {
    terms: Vec<(usize, Vec<u8>)>,
}

impl ClassifierPattern {
    fn parse(pattern: &str) -> Result<Self, String> {
        if pattern == "-" {
            return Ok(ClassifierPattern { terms: Vec::new() });
        }
        let mut terms = Vec::new();
        for term in pattern.split_whitespace() {
            let (off, hex) = term
                .split_once('/')
                .ok_or_else(|| format!("bad term `{term}`: expected offset/hexbytes"))?;
            let off: usize = off
                .parse()
                .map_err(|_| format!("bad offset in `{term}`"))?;
            let bytes =
                hex::decode(hex).map_err(|_| format!("bad hex bytes in `{term}`"))?;
            if bytes.is_empty() {
                return Err(format!("empty byte pattern in `{term}`"));
            }
            terms.push((off, bytes));
        }
        if terms.is_empty() {
            return Err("empty pattern".to_string());
        }
        Ok(ClassifierPattern { terms })
    }

    fn matches(&self, frame: &[u8]) -> bool {
        self.terms.iter().all(|(off, bytes)| {
            frame
                .get(*off..off + bytes.len())
                .is_some_and(|window| window == bytes)
        })
    }
}

/// Sends each packet to the output port of the first matching pattern.
/// `-` matches anything; packets matching no pattern are dropped.
struct Classifier {
    patterns: Vec<ClassifierPattern>,
}

impl Element for Classifier {
    fn class_name(&self) -> &'static str {
        "Classifier"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, self.patterns.len() as u32)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let port = {
            let frame = pool.data(&packet);
            self.patterns.iter().position(|p| p.matches(frame))
        };
        match port {
            Some(p) => ctx.emit(p as u32, packet),
            None => ctx.drop_packet(packet),
        }
    }
}

pub(super) fn build_classifier(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if init.args.is_empty() {
        return Err(init.err("Classifier needs at least one pattern"));
    }
    let patterns = init
        .args
        .iter()
        .map(|a| ClassifierPattern::parse(a).map_err(|e| init.err(e)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Box::new(Classifier { patterns }))
}

/// Answers ARP requests for its configured addresses; everything else is
/// dropped. Each argument is `ip mac`.
struct ArpResponder {
    entries: Vec<(u32, [u8; 6])>,
}

impl Element for ArpResponder {
    fn class_name(&self) -> &'static str {
        "ARPResponder"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 1)
    }

    fn push(&mut self, _port: u32, mut packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let request = parse_arp(pool.data(&packet));
        let reply = request.filter(|r| r.oper == ARP_OPER_REQUEST).and_then(|r| {
            let mac = self
                .entries
                .iter()
                .find(|(ip, _)| *ip == r.target_ip)
                .map(|(_, mac)| *mac)?;
            Some(view::build_arp(
                view::ARP_OPER_REPLY,
                mac,
                r.target_ip,
                r.sender_mac,
                r.sender_ip,
            ))
        });
        match reply {
            Some(frame) if frame.len() <= pool.buf_size() as usize => {
                // Reuse the request's buffer for the reply.
                pool.set_len(&mut packet, frame.len()).expect("checked");
                pool.data_mut(&mut packet).copy_from_slice(&frame);
                ctx.emit(0, packet);
            }
            _ => ctx.drop_packet(packet),
        }
    }
}

fn parse_mac(s: &str) -> Option<[u8; 6]> {
    let mut mac = [0u8; 6];
    let mut parts = s.split(':');
    for byte in mac.iter_mut() {
        *byte = u8::from_str_radix(parts.next()?, 16).ok()?;
    }
    parts.next().is_none().then_some(mac)
}

pub(super) fn build_arp_responder(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    if init.args.is_empty() {
        return Err(init.err("ARPResponder needs at least one `ip mac` entry"));
    }
    let mut entries = Vec::new();
    for arg in init.args {
        let mut parts = arg.split_whitespace();
        let (Some(ip), Some(mac), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(init.err(format!("bad entry `{arg}`: expected `ip mac`")));
        };
        let ip = parse_ipv4_addr(ip).ok_or_else(|| init.err(format!("bad IP in `{arg}`")))?;
        let mac = parse_mac(mac).ok_or_else(|| init.err(format!("bad MAC in `{arg}`")))?;
        entries.push((ip, mac));
    }
    Ok(Box::new(ArpResponder { entries }))
}
