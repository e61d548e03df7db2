//! Zero-copy views over raw frames: Ethernet, ARP, IPv4 and the UDP/TCP
//! port fields, plus Internet checksum helpers.
//!
//! Parsers return `None` on anything short or malformed; elements translate
//! that into their drop or bypass behaviour.

pub const ETHER_HDR_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

pub fn ethertype(frame: &[u8]) -> Option<u16> {
    if frame.len() < ETHER_HDR_LEN {
        return None;
    }
    Some(u16::from_be_bytes([frame[12], frame[13]]))
}

/// Swap destination and source MAC addresses in place.
/// Returns false (frame untouched) for runts shorter than an Ethernet
/// header.
pub fn swap_ether_addrs(frame: &mut [u8]) -> bool {
    if frame.len() < ETHER_HDR_LEN {
        return false;
    }
    let (dst, rest) = frame.split_at_mut(6);
    dst.swap_with_slice(&mut rest[..6]);
    true
}

/// Decoded IPv4 header fields with offsets for in-place edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4View {
    /// Offset of the IPv4 header within the frame.
    pub l3_off: usize,
    /// Header length in bytes.
    pub header_len: usize,
    pub total_len: u16,
    pub ttl: u8,
    pub proto: u8,
    pub src: u32,
    pub dst: u32,
}

impl Ipv4View {
    pub fn l4_off(&self) -> usize {
        self.l3_off + self.header_len
    }
}

/// Parse the IPv4 header of an Ethernet frame carrying ethertype 0x0800.
pub fn parse_ipv4(frame: &[u8]) -> Option<Ipv4View> {
    if ethertype(frame)? != ETHERTYPE_IPV4 {
        return None;
    }
    let l3 = &frame[ETHER_HDR_LEN..];
    if l3.len() < 20 || l3[0] >> 4 != 4 {
        return None;
    }
    let header_len = ((l3[0] & 0xf) as usize) * 4;
    if header_len < 20 || l3.len() < header_len {
        return None;
    }
    Some(Ipv4View {
        l3_off: ETHER_HDR_LEN,
        header_len,
        total_len: u16::from_be_bytes([l3[2], l3[3]]),
        ttl: l3[8],
        proto: l3[9],
        src: u32::from_be_bytes([l3[12], l3[13], l3[14], l3[15]]),
        dst: u32::from_be_bytes([l3[16], l3[17], l3[18], l3[19]]),
    })
}

/// Source and destination ports for TCP and UDP payloads.
pub fn l4_ports(frame: &[u8], ip: &Ipv4View) -> Option<(u16, u16)> {
    if ip.proto != IPPROTO_TCP && ip.proto != IPPROTO_UDP {
        return None;
    }
    let l4 = frame.get(ip.l4_off()..ip.l4_off() + 4)?;
    Some((
        u16::from_be_bytes([l4[0], l4[1]]),
        u16::from_be_bytes([l4[2], l4[3]]),
    ))
}

/// Internet checksum (RFC 1071) over `data`, as stored: big endian.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum = 0u32;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Decrement the TTL and patch the header checksum incrementally
/// (RFC 1624 equation 3). Returns the new TTL.
pub fn decrement_ttl(frame: &mut [u8], ip: &Ipv4View) -> u8 {
    let ttl_off = ip.l3_off + 8;
    let check_off = ip.l3_off + 10;
    let old = u16::from_be_bytes([frame[ttl_off], frame[ttl_off + 1]]);
    let new = old - 0x0100;
    frame[ttl_off] = (new >> 8) as u8;
    let hc = u16::from_be_bytes([frame[check_off], frame[check_off + 1]]);
    // HC' = ~(~HC + ~m + m')
    let mut sum = (!hc as u32) + (!old as u32) + new as u32;
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    let hc2 = !(sum as u16);
    frame[check_off] = (hc2 >> 8) as u8;
    frame[check_off + 1] = hc2 as u8;
    frame[ttl_off]
}

/// Build an Ethernet/IPv4/UDP frame of exactly `frame_len` bytes (padded
/// with zeros, minimum 14 + 20 + 8 = 42).
#[allow(clippy::too_many_arguments)]
pub fn build_udp_frame(
    src_mac: [u8; 6],
    dst_mac: [u8; 6],
    src_ip: u32,
    dst_ip: u32,
    src_port: u16,
    dst_port: u16,
    ttl: u8,
    frame_len: usize,
) -> Vec<u8> {
    let frame_len = frame_len.max(42);
    let mut f = vec![0u8; frame_len];
    f[0..6].copy_from_slice(&dst_mac);
    f[6..12].copy_from_slice(&src_mac);
    f[12..14].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    let ip_total = (frame_len - ETHER_HDR_LEN) as u16;
    let ip = &mut f[14..34];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&ip_total.to_be_bytes());
    ip[8] = ttl;
    ip[9] = IPPROTO_UDP;
    ip[12..16].copy_from_slice(&src_ip.to_be_bytes());
    ip[16..20].copy_from_slice(&dst_ip.to_be_bytes());
    let check = internet_checksum(&f[14..34]);
    f[24..26].copy_from_slice(&check.to_be_bytes());
    let udp_len = (frame_len - 34) as u16;
    f[34..36].copy_from_slice(&src_port.to_be_bytes());
    f[36..38].copy_from_slice(&dst_port.to_be_bytes());
    f[38..40].copy_from_slice(&udp_len.to_be_bytes());
    // UDP checksum left zero: legal for IPv4 and keeps generation cheap.
    f
}

/// A decoded ARP packet over Ethernet/IPv4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpView {
    pub oper: u16,
    pub sender_mac: [u8; 6],
    pub sender_ip: u32,
    pub target_mac: [u8; 6],
    pub target_ip: u32,
}

pub const ARP_OPER_REQUEST: u16 = 1;
pub const ARP_OPER_REPLY: u16 = 2;

pub fn parse_arp(frame: &[u8]) -> Option<ArpView> {
    if ethertype(frame)? != ETHERTYPE_ARP {
        return None;
    }
    let a = frame.get(ETHER_HDR_LEN..ETHER_HDR_LEN + 28)?;
    // Hardware type Ethernet, protocol IPv4, 6 byte MACs, 4 byte addresses.
    if a[0..2] != [0, 1] || a[2..4] != ETHERTYPE_IPV4.to_be_bytes() || a[4] != 6 || a[5] != 4 {
        return None;
    }
    Some(ArpView {
        oper: u16::from_be_bytes([a[6], a[7]]),
        sender_mac: a[8..14].try_into().unwrap(),
        sender_ip: u32::from_be_bytes([a[14], a[15], a[16], a[17]]),
        target_mac: a[18..24].try_into().unwrap(),
        target_ip: u32::from_be_bytes([a[24], a[25], a[26], a[27]]),
    })
}

/// Build an ARP frame (request or reply) including the Ethernet header.
pub fn build_arp(
    oper: u16,
    sender_mac: [u8; 6],
    sender_ip: u32,
    target_mac: [u8; 6],
    target_ip: u32,
) -> Vec<u8> {
    let mut f = vec![0u8; ETHER_HDR_LEN + 28];
    let ether_dst = if oper == ARP_OPER_REQUEST {
        [0xff; 6]
    } else {
        target_mac
    };
    f[0..6].copy_from_slice(&ether_dst);
    f[6..12].copy_from_slice(&sender_mac);
    f[12..14].copy_from_slice(&ETHERTYPE_ARP.to_be_bytes());
    let a = &mut f[ETHER_HDR_LEN..];
    a[0..2].copy_from_slice(&1u16.to_be_bytes());
    a[2..4].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    a[4] = 6;
    a[5] = 4;
    a[6..8].copy_from_slice(&oper.to_be_bytes());
    a[8..14].copy_from_slice(&sender_mac);
    a[14..18].copy_from_slice(&sender_ip.to_be_bytes());
    a[18..24].copy_from_slice(&target_mac);
    a[24..28].copy_from_slice(&target_ip.to_be_bytes());
    f
}

/// Parse dotted-quad notation into a host-order u32.
pub fn parse_ipv4_addr(s: &str) -> Option<u32> {
    let addr: std::net::Ipv4Addr = s.parse().ok()?;
    Some(u32::from(addr))
}

pub fn format_ipv4_addr(ip: u32) -> String {
    std::net::Ipv4Addr::from(ip).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> Vec<u8> {
        build_udp_frame(
            [2, 0, 0, 0, 0, 1],
            [2, 0, 0, 0, 0, 2],
            parse_ipv4_addr("10.1.2.3").unwrap(),
            parse_ipv4_addr("192.168.7.9").unwrap(),
            4000,
            53,
            64,
            128,
        )
    }

    #[test]
    fn parse_what_we_build() {
        let f = frame();
        assert_eq!(f.len(), 128);
        assert_eq!(ethertype(&f), Some(ETHERTYPE_IPV4));
        let ip = parse_ipv4(&f).unwrap();
        assert_eq!(ip.proto, IPPROTO_UDP);
        assert_eq!(ip.ttl, 64);
        assert_eq!(ip.total_len, 114);
        assert_eq!(format_ipv4_addr(ip.src), "10.1.2.3");
        assert_eq!(format_ipv4_addr(ip.dst), "192.168.7.9");
        assert_eq!(l4_ports(&f, &ip), Some((4000, 53)));
        // A freshly built header checksums to zero.
        assert_eq!(internet_checksum(&f[14..34]), 0);
    }

    #[test]
    fn runts_and_junk_are_rejected() {
        assert_eq!(ethertype(&[0u8; 13]), None);
        assert!(parse_ipv4(&[0u8; 13]).is_none());
        let mut runt = vec![0u8; 13];
        assert!(!swap_ether_addrs(&mut runt));
        let mut truncated = frame();
        truncated.truncate(30);
        assert!(parse_ipv4(&truncated).is_none());
        let mut v6 = frame();
        v6[14] = 0x60;
        assert!(parse_ipv4(&v6).is_none());
    }

    #[test]
    fn mac_swap() {
        let mut f = frame();
        assert!(swap_ether_addrs(&mut f));
        assert_eq!(&f[0..6], &[2, 0, 0, 0, 0, 1]);
        assert_eq!(&f[6..12], &[2, 0, 0, 0, 0, 2]);
    }

    #[test]
    fn incremental_ttl_checksum_matches_recompute() {
        let mut f = frame();
        let ip = parse_ipv4(&f).unwrap();
        let ttl = decrement_ttl(&mut f, &ip);
        assert_eq!(ttl, 63);
        assert_eq!(f[22], 63);
        // Patched checksum must still verify.
        assert_eq!(internet_checksum(&f[14..34]), 0);
        // And repeat a few more hops.
        for want in [62, 61, 60] {
            let ip = parse_ipv4(&f).unwrap();
            assert_eq!(decrement_ttl(&mut f, &ip), want);
            assert_eq!(internet_checksum(&f[14..34]), 0);
        }
    }

    #[test]
    fn arp_round_trip() {
        let req = build_arp(
            ARP_OPER_REQUEST,
            [2, 0, 0, 0, 0, 9],
            parse_ipv4_addr("10.0.0.1").unwrap(),
            [0; 6],
            parse_ipv4_addr("10.0.0.2").unwrap(),
        );
        assert_eq!(&req[0..6], &[0xff; 6]);
        let v = parse_arp(&req).unwrap();
        assert_eq!(v.oper, ARP_OPER_REQUEST);
        assert_eq!(v.sender_mac, [2, 0, 0, 0, 0, 9]);
        assert_eq!(format_ipv4_addr(v.target_ip), "10.0.0.2");
        assert!(parse_arp(&frame()).is_none());
    }

    #[test]
    fn checksum_odd_length() {
        // Odd-length data pads with a zero byte.
        assert_eq!(internet_checksum(&[0x12]), !0x1200);
        assert_eq!(internet_checksum(&[0x12, 0x34, 0x56]), !(0x1234 + 0x5600));
    }
}
