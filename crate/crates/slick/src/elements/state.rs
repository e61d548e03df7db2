//! `StateFile(path [, period_ms])` declares where the graph's sealed state
//! lives. The element itself handles no packets; the runtime reads the
//! declaration, restores state from the file before the first packet, and
//! reseals on the declared period and at shutdown.

use std::time::Duration;

use crate::packet::PacketHandle;

use super::{BuildError, Element, ElementInit, ExecCtx, PersistTarget, Ports};

struct StateFile {
    target: PersistTarget,
}

impl Element for StateFile {
    fn class_name(&self) -> &'static str {
        "StateFile"
    }

    fn ports(&self) -> Ports {
        Ports::new(0, 0)
    }

    fn push(&mut self, _port: u32, packet: PacketHandle, ctx: &mut ExecCtx) {
        ctx.drop_packet(packet);
    }

    fn persist_target(&self) -> Option<PersistTarget> {
        Some(self.target.clone())
    }
}

pub(super) fn build(init: &ElementInit) -> Result<Box<dyn Element>, BuildError> {
    let (path, rest) = match init.args {
        [path, rest @ ..] if rest.len() <= 1 => (path, rest),
        _ => return Err(init.err("usage: StateFile(path [, period_ms])")),
    };
    let period = match rest.first() {
        Some(ms) => {
            let ms: u64 = ms
                .parse()
                .map_err(|_| init.err("period must be milliseconds as an integer"))?;
            if ms == 0 {
                return Err(init.err("period must be positive"));
            }
            Some(Duration::from_millis(ms))
        }
        None => None,
    };
    Ok(Box::new(StateFile {
        target: PersistTarget {
            path: init.resolve_path(path),
            period,
        },
    }))
}
