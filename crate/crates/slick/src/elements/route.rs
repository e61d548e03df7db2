//! Longest prefix match IPv4 forwarding.
//!
//! The route file holds one route per line: `prefix/len [gateway] port`,
//! with `#` comments. Lookup walks a binary trie over destination bits;
//! the most specific matching route's port wins. Forwarded packets get
//! their TTL decremented with an incremental checksum fix; packets whose
//! TTL would expire, and packets matching no route, are dropped.

use crate::packet::view::{decrement_ttl, parse_ipv4, parse_ipv4_addr};
use crate::packet::PacketHandle;

use super::{BuildError, Element, ElementInit, ExecCtx, Ports};

/// One route table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteEntry {
    pub prefix: u32,
    pub len: u8,
    pub gateway: Option<u32>,
    pub port: u32,
}

/// Binary trie keyed by prefix bits, most significant first.
pub struct RouteTrie {
    // node 0 is the root; children index into `nodes`, 0 meaning absent.
    nodes: Vec<TrieNode>,
    entries: Vec<RouteEntry>,
}

#[derive(Default, Clone)]
struct TrieNode {
    children: [u32; 2],
    /// Index into `entries` plus one; 0 means no route terminates here.
    entry: u32,
}

impl RouteTrie {
    pub fn new(entries: Vec<RouteEntry>) -> Self {
        let mut t = RouteTrie {
            nodes: vec![TrieNode::default()],
            entries: Vec::with_capacity(entries.len()),
        };
        for e in entries {
            t.insert(e);
        }
        t
    }

    fn insert(&mut self, entry: RouteEntry) {
        let mut node = 0usize;
        for depth in 0..entry.len {
            let bit = ((entry.prefix >> (31 - depth)) & 1) as usize;
            let next = self.nodes[node].children[bit];
            node = if next == 0 {
                self.nodes.push(TrieNode::default());
                let idx = (self.nodes.len() - 1) as u32;
                self.nodes[node].children[bit] = idx;
                idx as usize
            } else {
                next as usize
            };
        }
        // Later duplicates replace earlier ones, like reloading a table.
        self.entries.push(entry);
        self.nodes[node].entry = self.entries.len() as u32;
    }

    /// The most specific route containing `dst`.
    pub fn lookup(&self, dst: u32) -> Option<&RouteEntry> {
        let mut node = 0usize;
        let mut best = 0u32;
        if self.nodes[0].entry != 0 {
            best = self.nodes[0].entry;
        }
        for depth in 0..32 {
            let bit = ((dst >> (31 - depth)) & 1) as usize;
            let next = self.nodes[node].children[bit];
            if next == 0 {
                break;
            }
            node = next as usize;
            if self.nodes[node].entry != 0 {
                best = self.nodes[node].entry;
            }
        }
        (best != 0).then(|| &self.entries[(best - 1) as usize])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a route file.
pub fn parse_routes(text: &str) -> Result<Vec<RouteEntry>, String> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let context = |e: String| format!("line {}: {e}", i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (cidr, gateway, port) = match fields.as_slice() {
            [cidr, port] => (*cidr, None, *port),
            [cidr, gw, port] => (*cidr, Some(*gw), *port),
            _ => {
                return Err(context(format!(
                    "expected `prefix/len [gateway] port`, got {} fields",
                    fields.len()
                )))
            }
        };
        let (addr, len) = cidr
            .split_once('/')
            .ok_or_else(|| context(format!("bad prefix `{cidr}`")))?;
        let len: u8 = len
            .parse()
            .map_err(|_| context(format!("bad prefix length in `{cidr}`")))?;
        if len > 32 {
            return Err(context(format!("prefix length over 32 in `{cidr}`")));
        }
        let addr =
            parse_ipv4_addr(addr).ok_or_else(|| context(format!("bad address in `{cidr}`")))?;
        let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
        let gateway = match gateway {
            None => None,
            Some(g) => {
                Some(parse_ipv4_addr(g).ok_or_else(|| context(format!("bad gateway `{g}`")))?)
            }
        };
        let port: u32 = port
            .parse()
            .map_err(|_| context(format!("bad output port `{port}`")))?;
        entries.push(RouteEntry {
            prefix: addr & mask,
            len,
            gateway,
            port,
        });
    }
    Ok(entries)
}

/// Reference lookup for differential testing: scan every entry, keep the
/// longest match, later entries winning ties.
pub fn linear_lookup(entries: &[RouteEntry], dst: u32) -> Option<&RouteEntry> {
    let mut best: Option<&RouteEntry> = None;
    for e in entries {
        let mask = if e.len == 0 { 0 } else { u32::MAX << (32 - e.len) };
        if dst & mask == e.prefix && best.is_none_or(|b| e.len >= b.len) {
            best = Some(e);
        }
    }
    best
}

struct RouteTable {
    trie: RouteTrie,
    outputs: u32,
    no_route: u64,
    ttl_expired: u64,
}

impl Element for RouteTable {
    fn class_name(&self) -> &'static str {
        "RouteTable"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, self.outputs)
    }

    fn push(&mut self, _port: u32, mut packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let Some(ip) = parse_ipv4(pool.data(&packet)) else {
            ctx.drop_packet(packet);
            return;
        };
        let Some(entry) = self.trie.lookup(ip.dst) else {
            self.no_route += 1;
            ctx.drop_packet(packet);
            return;
        };
        if ip.ttl <= 1 {
            self.ttl_expired += 1;
            ctx.drop_packet(packet);
            return;
        }
        let out = entry.port;
        decrement_ttl(pool.data_mut(&mut packet), &ip);
        ctx.emit(out, packet);
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "routes" => Some(self.trie.len().to_string()),
            "no_route" => Some(self.no_route.to_string()),
            "ttl_expired" => Some(self.ttl_expired.to_string()),
            _ => None,
        }
    }
}

pub(super) fn build(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let [file] = init.args else {
        return Err(init.err("RouteTable takes exactly one argument: the route file"));
    };
    let text = init.read_file_arg(file)?;
    let entries = parse_routes(&text).map_err(|e| init.err(e))?;
    if entries.is_empty() {
        return Err(init.err("route file contains no routes"));
    }
    let outputs = entries.iter().map(|e| e.port).max().unwrap() + 1;
    Ok(Box::new(RouteTable {
        trie: RouteTrie::new(entries),
        outputs,
        no_route: 0,
        ttl_expired: 0,
    }))
}
