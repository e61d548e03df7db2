//! Deterministic traffic synthesis.
//!
//! Benchmarks and tests need reproducible packet streams; everything here is
//! seeded, so the same seed yields byte-identical traffic on every run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::packet::view::build_udp_frame;

/// Generates Ethernet/IPv4/UDP frames of a fixed size with addresses and
/// ports drawn from a seeded generator.
pub struct FrameGen {
    rng: ChaCha8Rng,
    frame_len: usize,
    flows: u32,
}

impl FrameGen {
    /// `frame_len` is clamped to the 42 byte minimum for an Ethernet/IPv4/
    /// UDP frame. `flows` bounds how many distinct (src, dst, ports) tuples
    /// appear; 0 means unbounded.
    pub fn new(seed: u64, frame_len: usize, flows: u32) -> Self {
        FrameGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            frame_len: frame_len.max(42),
            flows,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn next_frame(&mut self) -> Vec<u8> {
        let flow = if self.flows == 0 {
            self.rng.gen::<u32>()
        } else {
            self.rng.gen_range(0..self.flows)
        };
        // Spread flows across sources in 10.0.0.0/8 and destinations in
        // 192.168.0.0/16 plus a deterministic port pair.
        let src_ip = 0x0a00_0000 | (flow.wrapping_mul(2654435761) >> 8);
        let dst_ip = 0xc0a8_0000 | (flow & 0xffff);
        let src_port = 1024 + (flow % 50_000) as u16;
        let dst_port = 1 + (flow % 1024) as u16;
        let mut f = build_udp_frame(
            [2, 0, 0, 0, 0, 1],
            [2, 0, 0, 0, 0, 2],
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            64,
            self.frame_len,
        );
        // A little payload entropy so content scanning has real work to do.
        let payload_start = 42.min(f.len());
        if f.len() > payload_start {
            let fill = self.rng.gen::<u64>().to_le_bytes();
            let end = (payload_start + 8).min(f.len());
            let n = end - payload_start;
            f[payload_start..end].copy_from_slice(&fill[..n]);
        }
        f
    }

    pub fn take(&mut self, n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|_| self.next_frame()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::view::{l4_ports, parse_ipv4};

    #[test]
    fn same_seed_same_traffic() {
        let a = FrameGen::new(42, 128, 16).take(50);
        let b = FrameGen::new(42, 128, 16).take(50);
        assert_eq!(a, b);
        let c = FrameGen::new(43, 128, 16).take(50);
        assert_ne!(a, c);
    }

    #[test]
    fn frames_are_well_formed() {
        let mut g = FrameGen::new(7, 64, 0);
        for _ in 0..100 {
            let f = g.next_frame();
            assert_eq!(f.len(), 64);
            let ip = parse_ipv4(&f).expect("valid IPv4");
            assert!(l4_ports(&f, &ip).is_some());
        }
    }

    #[test]
    fn flow_bound_is_respected() {
        let mut g = FrameGen::new(1, 60, 4);
        let mut tuples = std::collections::HashSet::new();
        for _ in 0..200 {
            let f = g.next_frame();
            let ip = parse_ipv4(&f).unwrap();
            let ports = l4_ports(&f, &ip).unwrap();
            tuples.insert((ip.src, ip.dst, ports));
        }
        assert!(tuples.len() <= 4);
        assert!(tuples.len() > 1);
    }

    #[test]
    fn tiny_sizes_clamp_to_minimum() {
        let mut g = FrameGen::new(1, 10, 1);
        assert_eq!(g.next_frame().len(), 42);
    }
}
