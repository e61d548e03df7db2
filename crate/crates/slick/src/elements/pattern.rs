//! Content inspection against a set of byte regexes.
//!
//! The pattern file holds one regex per line (`regex::bytes` syntax, so
//! `\x00` escapes and classes over raw bytes work); `#` comments and blank
//! lines are ignored. A frame matching any pattern leaves on port 1, clean
//! frames on port 0. Patterns are confidential input, like firewall rules.

use regex::bytes::{RegexSet, RegexSetBuilder};

use crate::packet::PacketHandle;

use super::{BuildError, Element, ElementInit, ExecCtx, Ports};

/// Parse a pattern file into the compiled set plus the raw pattern lines
/// (the latter for differential testing).
pub fn parse_patterns(text: &str) -> Result<(RegexSet, Vec<String>), String> {
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err("pattern file contains no patterns".to_string());
    }
    // Byte semantics: `\x90` is the raw byte 0x90, not a codepoint, and
    // frames need not be valid UTF-8.
    let set = RegexSetBuilder::new(&lines)
        .unicode(false)
        .build()
        .map_err(|e| format!("bad pattern: {e}"))?;
    Ok((set, lines))
}

struct PatternMatch {
    set: RegexSet,
    hits: u64,
    scanned: u64,
}

impl Element for PatternMatch {
    fn class_name(&self) -> &'static str {
        "PatternMatch"
    }

    fn ports(&self) -> Ports {
        Ports::new(1, 2)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        let Some(pool) = ctx.domain().pool_by_id(packet.pool_id()) else {
            ctx.drop_packet(packet);
            return;
        };
        self.scanned += 1;
        let hit = self.set.is_match(pool.data(&packet));
        if hit {
            self.hits += 1;
            ctx.emit(1, packet);
        } else {
            ctx.emit(0, packet);
        }
    }

    fn read_handler(&self, name: &str) -> Option<String> {
        match name {
            "hits" => Some(self.hits.to_string()),
            "scanned" => Some(self.scanned.to_string()),
            "patterns" => Some(self.set.len().to_string()),
            _ => None,
        }
    }
}

pub(super) fn build(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let [file] = init.args else {
        return Err(init.err("PatternMatch takes exactly one argument: the pattern file"));
    };
    let text = init.read_file_arg(file)?;
    let (set, _) = parse_patterns(&text).map_err(|e| init.err(e))?;
    Ok(Box::new(PatternMatch {
        set,
        hits: 0,
        scanned: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_and_class_patterns() {
        let (set, lines) = parse_patterns(
            "# worm signatures\nroot\\.exe\ncmd=\\x90\\x90\n\nGET /admin\n",
        )
        .unwrap();
        assert_eq!(lines.len(), 3);
        assert!(set.is_match(b"GET /root.exe HTTP/1.0"));
        assert!(set.is_match(b"xxcmd=\x90\x90yy"));
        assert!(set.is_match(b"GET /admin HTTP/1.1"));
        assert!(!set.is_match(b"GET /index.html"));
        // The dot is escaped: "rootXexe" must not match.
        assert!(!set.is_match(b"rootXexe"));
    }

    #[test]
    fn bad_patterns_are_reported() {
        assert!(parse_patterns("a(b").is_err());
        assert!(parse_patterns("\n# only comments\n").is_err());
    }
}
