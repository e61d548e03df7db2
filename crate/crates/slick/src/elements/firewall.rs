//! Ordered first-match firewall over the IPv4 five-tuple.
//!
//! The rule file holds one rule per line:
//!
//! ```text
//! # action proto source        destination    sport dport
//! allow    udp   10.0.0.0/8    192.168.0.0/16 *     53
//! drop     tcp   *             192.168.7.0/24 *     *
//! allow    *     *             *              *     *
//! ```
//!
//! `proto` is `tcp`, `udp`, `icmp`, a number, or `*`. Addresses are CIDR
//! blocks or `*`; ports are numbers or `*`. The first matching rule decides;
//! packets matching no rule are refused. Rules are confidential input: they
//! live in enclave memory and are never logged.
//!
//! Output port 0 carries allowed packets, port 1 refused ones (wire it to a
//! `Discard` or a `Counter`; leaving it unconnected drops silently). Frames
//! that are not IPv4 cannot be evaluated against the tuple and are refused.

use crate::packet::view::{l4_ports, parse_ipv4, parse_ipv4_addr, IPPROTO_TCP, IPPROTO_UDP};
use crate::packet::PacketHandle;

use super::{BuildError, Element, ElementInit, ExecCtx, Ports};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Allow,
    Drop,
}

/// A parsed rule; `None` fields are wildcards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub action: Action,
    pub proto: Option<u8>,
    pub src: Option<(u32, u32)>,
    pub dst: Option<(u32, u32)>,
    pub sport: Option<u16>,
    pub dport: Option<u16>,
}

/// The fields a rule is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowKey {
    pub proto: u8,
    pub src: u32,
    pub dst: u32,
    pub sport: u16,
    pub dport: u16,
}

impl Rule {
    pub fn matches(&self, key: &FlowKey) -> bool {
        fn cidr_hit(cidr: &Option<(u32, u32)>, addr: u32) -> bool {
            match cidr {
                None => true,
                Some((net, mask)) => addr & mask == *net,
            }
        }
        self.proto.map_or(true, |p| p == key.proto)
            && cidr_hit(&self.src, key.src)
            && cidr_hit(&self.dst, key.dst)
            && self.sport.map_or(true, |p| p == key.sport)
            && self.dport.map_or(true, |p| p == key.dport)
    }
}

fn parse_cidr(s: &str) -> Result<Option<(u32, u32)>, String> {
    if s == "*" {
        return Ok(None);
    }
    let (addr, len) = match s.split_once('/') {
        Some((a, l)) => (
            a,
            l.parse::<u32>().map_err(|_| format!("bad prefix length in `{s}`"))?,
        ),
        None => (s, 32),
    };
    if len > 32 {
        return Err(format!("prefix length over 32 in `{s}`"));
    }
    let addr = parse_ipv4_addr(addr).ok_or_else(|| format!("bad address in `{s}`"))?;
    let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
    Ok(Some((addr & mask, mask)))
}

fn parse_port(s: &str) -> Result<Option<u16>, String> {
    if s == "*" {
        return Ok(None);
    }
    s.parse::<u16>()
        .map(Some)
        .map_err(|_| format!("bad port `{s}`"))
}

fn parse_proto(s: &str) -> Result<Option<u8>, String> {
    match s {
        "*" => Ok(None),
        "tcp" => Ok(Some(IPPROTO_TCP)),
        "udp" => Ok(Some(IPPROTO_UDP)),
        "icmp" => Ok(Some(1)),
        n => n
            .parse::<u8>()
            .map(Some)
            .map_err(|_| format!("bad protocol `{s}`")),
    }
}

/// Parse a rule file: one rule per line, `#` comments, blank lines ignored.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, String> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let context = |e: String| format!("line {}: {e}", i + 1);
        let [action, proto, src, dst, sport, dport] = fields.as_slice() else {
            return Err(context(format!(
                "expected 6 fields (action proto src dst sport dport), got {}",
                fields.len()
            )));
        };
        let action = match *action {
            "allow" => Action::Allow,
            "drop" => Action::Drop,
            other => return Err(context(format!("bad action `{other}`"))),
        };
        rules.push(Rule {
            action,
            proto: parse_proto(proto).map_err(context)?,
            src: parse_cidr(src).map_err(context)?,
            dst: parse_cidr(dst).map_err(context)?,
            sport: parse_port(sport).map_err(context)?,
            dport: parse_port(dport).map_err(context)?,
        });
    }
    Ok(rules)
}

/// First-match evaluation; `None` when no rule matches.
pub fn evaluate(rules: &[Rule], key: &FlowKey) -> Option<Action> {
    rules.iter().find(|r| r.matches(key)).map(|r| r.action)
}

/// Extract the five-tuple; ICMP and other portless protocols get port 0.
pub fn flow_key(frame: &[u8]) -> Option<FlowKey> {
    let ip = parse_ipv4(frame)?;
    let (sport, dport) = l4_ports(frame, &ip).unwrap_or((0, 0));
    Some(FlowKey {
        proto: ip.proto,
        src: ip.src,
        dst: ip.dst,
        sport,
        dport,
    })
}

struct Firewall {
    rules: Vec<Rule>,
    allowed: u64,
    refused: u64,
}

impl Element for Firewall {
    fn class_name(&self) -> &'static str {
        "Firewall"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 2)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        let verdict = flow_key(pool.data(&packet))
            .and_then(|key| evaluate(&self.rules, &key))
            .unwrap_or(Action::Drop);
        match verdict {
            Action::Allow => {
                self.allowed += 1;
                ctx.emit(0, packet);
            }
            Action::Drop => {
                self.refused += 1;
                ctx.emit(1, packet);
            }
        }
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "allowed" => Some(self.allowed.to_string()),
            "refused" => Some(self.refused.to_string()),
            "rules" => Some(self.rules.len().to_string()),
            _ => None,
        }
    }
}

pub(super) fn build(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let [file] = init.args else {
        return Err(init.err("Firewall takes exactly one argument: the rule file"));
    };
    let text = init.read_file_arg(file)?;
    let rules = parse_rules(&text).map_err(|e| init.err(e))?;
    if rules.is_empty() {
        return Err(init.err("rule file contains no rules"));
    }
    Ok(Box::new(Firewall {
        rules,
        allowed: 0,
        refused: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const RULES: &str = "
        # dns from the lab out
        allow udp 10.0.0.0/8 * * 53
        drop  tcp * 192.168.7.0/24 * *
        allow tcp * * * 443
        drop  icmp * * * *
        allow * 10.1.2.3/32 * * *
    ";

    fn key(proto: u8, src: &str, dst: &str, sport: u16, dport: u16) -> FlowKey {
        FlowKey {
            proto,
            src: parse_ipv4_addr(src).unwrap(),
            dst: parse_ipv4_addr(dst).unwrap(),
            sport,
            dport,
        }
    }

    #[test]
    fn first_match_wins_in_order() {
        let rules = parse_rules(RULES).unwrap();
        assert_eq!(rules.len(), 5);
        // Rule 1.
        assert_eq!(
            evaluate(&rules, &key(17, "10.9.9.9", "1.1.1.1", 999, 53)),
            Some(Action::Allow)
        );
        // Rule 2 shadows rule 3 for this destination.
        assert_eq!(
            evaluate(&rules, &key(6, "8.8.8.8", "192.168.7.44", 1, 443)),
            Some(Action::Drop)
        );
        // Rule 3.
        assert_eq!(
            evaluate(&rules, &key(6, "8.8.8.8", "192.168.8.44", 1, 443)),
            Some(Action::Allow)
        );
        // Rule 4: icmp matched with ports zeroed.
        assert_eq!(
            evaluate(&rules, &key(1, "2.2.2.2", "3.3.3.3", 0, 0)),
            Some(Action::Drop)
        );
        // Rule 5: exact host.
        assert_eq!(
            evaluate(&rules, &key(17, "10.1.2.3", "3.3.3.3", 5, 5)),
            Some(Action::Allow)
        );
        // No rule: caller drops.
        assert_eq!(evaluate(&rules, &key(17, "11.0.0.1", "3.3.3.3", 5, 5)), None);
    }

    #[test]
    fn cidr_edges() {
        let rules = parse_rules("allow * 10.0.0.0/31 * * *").unwrap();
        assert!(evaluate(&rules, &key(6, "10.0.0.0", "1.1.1.1", 0, 0)).is_some());
        assert!(evaluate(&rules, &key(6, "10.0.0.1", "1.1.1.1", 0, 0)).is_some());
        assert!(evaluate(&rules, &key(6, "10.0.0.2", "1.1.1.1", 0, 0)).is_none());
        // /0 matches everything.
        let rules = parse_rules("drop * 0.0.0.0/0 * * *").unwrap();
        assert_eq!(
            evaluate(&rules, &key(6, "255.255.255.255", "1.1.1.1", 0, 0)),
            Some(Action::Drop)
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(parse_rules("allow udp * *").unwrap_err().contains("line 1"));
        assert!(parse_rules("\npermit udp * * * *")
            .unwrap_err()
            .contains("line 2"));
        assert!(parse_rules("allow udp 10.0.0.0/33 * * *")
            .unwrap_err()
            .contains("prefix"));
        assert!(parse_rules("allow udp * * 70000 *")
            .unwrap_err()
            .contains("port"));
    }
}
