//! Ethernet / IPv4 / TCP header decoding.

use std::net::Ipv4Addr;

use crate::time::CaptureTimestamp;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETH_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;
const IPPROTO_TCP: u8 = 6;
const TCP_FLAG_ACK: u8 = 0x10;

/// Per-packet header fields needed for classification, pairing and hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub ts: CaptureTimestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// TCP ACK flag.
    pub ack_valid: bool,
}

impl PacketHeader {
    /// Whether `other` travels on the same connection in the opposite
    /// direction.
    pub fn is_reverse_of(&self, other: &PacketHeader) -> bool {
        self.src_ip == other.dst_ip
            && self.src_port == other.dst_port
            && self.dst_ip == other.src_ip
            && self.dst_port == other.src_port
    }
}

/// A decoded TCP segment borrowing its payload from the capture buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketView<'a> {
    pub header: PacketHeader,
    pub payload: &'a [u8],
}

/// Why a frame was not decoded into a [`PacketView`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipReason {
    NonIp,
    NonTcp,
    Fragment,
    Truncated,
}

/// Decodes an Ethernet II frame carrying IPv4/TCP.
///
/// A single 802.1Q tag is unwrapped; stacked tags are reported as
/// [`SkipReason::NonIp`]. The payload is bounded by the IPv4 total length so
/// Ethernet padding never leaks into it.
pub fn parse_frame(frame: &[u8], ts: CaptureTimestamp) -> Result<PacketView<'_>, SkipReason> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(SkipReason::Truncated);
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut offset = ETH_HEADER_LEN;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < offset + VLAN_TAG_LEN {
            return Err(SkipReason::Truncated);
        }
        ethertype = u16::from_be_bytes([frame[offset + 2], frame[offset + 3]]);
        offset += VLAN_TAG_LEN;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return Err(SkipReason::NonIp);
    }

    let ip = &frame[offset..];
    if ip.len() < 20 {
        return Err(SkipReason::Truncated);
    }
    if ip[0] >> 4 != 4 {
        return Err(SkipReason::NonIp);
    }
    let ihl = usize::from(ip[0] & 0x0F) * 4;
    if ihl < 20 || ip.len() < ihl {
        return Err(SkipReason::Truncated);
    }
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    let flags_frag = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = flags_frag & 0x2000 != 0;
    let frag_offset = flags_frag & 0x1FFF;
    if more_fragments || frag_offset != 0 {
        return Err(SkipReason::Fragment);
    }
    if ip[9] != IPPROTO_TCP {
        return Err(SkipReason::NonTcp);
    }
    if total_len < ihl {
        return Err(SkipReason::Truncated);
    }
    // Snaplen may cut the datagram short; keep whatever was captured.
    let ip_end = total_len.min(ip.len());
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    let tcp = &ip[ihl..ip_end];
    if tcp.len() < 20 {
        return Err(SkipReason::Truncated);
    }
    let data_offset = usize::from(tcp[12] >> 4) * 4;
    if data_offset < 20 || tcp.len() < data_offset {
        return Err(SkipReason::Truncated);
    }
    let header = PacketHeader {
        ts,
        src_ip,
        dst_ip,
        src_port: u16::from_be_bytes([tcp[0], tcp[1]]),
        dst_port: u16::from_be_bytes([tcp[2], tcp[3]]),
        seq: u32::from_be_bytes([tcp[4], tcp[5], tcp[6], tcp[7]]),
        ack: u32::from_be_bytes([tcp[8], tcp[9], tcp[10], tcp[11]]),
        ack_valid: tcp[13] & TCP_FLAG_ACK != 0,
    };
    Ok(PacketView { header, payload: &tcp[data_offset..] })
}

/// Assembles Ethernet/IPv4/TCP frames. Used by the synthetic trace
/// generator and by tests.
#[derive(Debug, Clone)]
pub struct FrameBuilder {
    pub vlan: Option<u16>,
    pub ip_id: u16,
    pub ttl: u8,
    /// Extra TCP flags ORed into the flag byte (ACK is driven by the header).
    pub extra_flags: u8,
}

impl Default for FrameBuilder {
    fn default() -> Self {
        FrameBuilder { vlan: None, ip_id: 0, ttl: 64, extra_flags: 0x08 }
    }
}

impl FrameBuilder {
    pub fn build(&self, header: &PacketHeader, payload: &[u8]) -> Vec<u8> {
        let ip_len = 20 + 20 + payload.len();
        let mut f = Vec::with_capacity(ETH_HEADER_LEN + VLAN_TAG_LEN + ip_len);
        f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
        f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
        if let Some(tag) = self.vlan {
            f.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
            f.extend_from_slice(&(tag & 0x0FFF).to_be_bytes());
        }
        f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

        let ip_start = f.len();
        f.push(0x45);
        f.push(0);
        f.extend_from_slice(&(ip_len.min(usize::from(u16::MAX)) as u16).to_be_bytes());
        f.extend_from_slice(&self.ip_id.to_be_bytes());
        f.extend_from_slice(&0x4000u16.to_be_bytes()); // DF
        f.push(self.ttl);
        f.push(IPPROTO_TCP);
        f.extend_from_slice(&[0, 0]);
        f.extend_from_slice(&header.src_ip.octets());
        f.extend_from_slice(&header.dst_ip.octets());
        let csum = ipv4_checksum(&f[ip_start..ip_start + 20]);
        f[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

        f.extend_from_slice(&header.src_port.to_be_bytes());
        f.extend_from_slice(&header.dst_port.to_be_bytes());
        f.extend_from_slice(&header.seq.to_be_bytes());
        f.extend_from_slice(&header.ack.to_be_bytes());
        f.push(5 << 4);
        let flags = if header.ack_valid { TCP_FLAG_ACK } else { 0 } | self.extra_flags;
        f.push(flags);
        f.extend_from_slice(&65_535u16.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent pointer
        f.extend_from_slice(payload);
        f
    }
}

/// Convenience wrapper around [`FrameBuilder::build`] with defaults.
pub fn build_frame(header: &PacketHeader, payload: &[u8]) -> Vec<u8> {
    FrameBuilder::default().build(header, payload)
}

fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_header() -> PacketHeader {
        PacketHeader {
            ts: CaptureTimestamp::new(1_393_978_285, 777_375_000).unwrap(),
            src_ip: Ipv4Addr::new(123, 111, 50, 23),
            dst_ip: Ipv4Addr::new(214, 223, 22, 6),
            src_port: 2311,
            dst_port: 80,
            seq: 1000,
            ack: 2000,
            ack_valid: true,
        }
    }

    #[test]
    fn arp_is_non_ip() {
        let mut frame = vec![0u8; 42];
        frame[12] = 0x08;
        frame[13] = 0x06;
        assert_eq!(parse_frame(&frame, CaptureTimestamp::ZERO), Err(SkipReason::NonIp));
    }

    #[test]
    fn syn_without_payload() {
        let mut h = sample_header();
        h.ack_valid = false;
        let frame = FrameBuilder { extra_flags: 0x02, ..Default::default() }.build(&h, &[]);
        let view = parse_frame(&frame, h.ts).unwrap();
        assert!(view.payload.is_empty());
        assert!(!view.header.ack_valid);
    }

    #[test]
    fn example_endpoints_echo() {
        let h = sample_header();
        let frame = build_frame(&h, b"GET / HTTP/1.1\r\n\r\n");
        let view = parse_frame(&frame, h.ts).unwrap();
        assert_eq!(view.header, h);
        assert_eq!(view.payload, b"GET / HTTP/1.1\r\n\r\n");
        assert_eq!(ipv4_checksum(&frame[14..34]), 0);
    }

    #[test]
    fn ethernet_padding_is_excluded() {
        let h = sample_header();
        let mut frame = build_frame(&h, b"");
        frame.resize(60, 0xAA);
        assert!(parse_frame(&frame, h.ts).unwrap().payload.is_empty());
    }

    #[test]
    fn single_vlan_tag_unwrapped_qinq_skipped() {
        let h = sample_header();
        let frame = FrameBuilder { vlan: Some(42), ..Default::default() }.build(&h, b"x");
        assert_eq!(parse_frame(&frame, h.ts).unwrap().payload, b"x");

        let mut qinq = frame.clone();
        // Rewrite the inner ethertype to another VLAN tag.
        qinq[16] = 0x81;
        qinq[17] = 0x00;
        assert_eq!(parse_frame(&qinq, h.ts), Err(SkipReason::NonIp));
    }

    #[test]
    fn fragments_and_non_tcp() {
        let h = sample_header();
        let mut frame = build_frame(&h, b"abc");
        frame[20] = 0x20; // MF
        frame[21] = 0x00;
        assert_eq!(parse_frame(&frame, h.ts), Err(SkipReason::Fragment));
        frame[20] = 0x00;
        frame[21] = 0x10; // offset 16
        assert_eq!(parse_frame(&frame, h.ts), Err(SkipReason::Fragment));

        let mut udp = build_frame(&h, b"abc");
        udp[23] = 17;
        assert_eq!(parse_frame(&udp, h.ts), Err(SkipReason::NonTcp));
    }

    #[test]
    fn truncated_headers() {
        let h = sample_header();
        let frame = build_frame(&h, b"abc");
        assert_eq!(parse_frame(&frame[..10], h.ts), Err(SkipReason::Truncated));
        assert_eq!(parse_frame(&frame[..30], h.ts), Err(SkipReason::Truncated));
        assert_eq!(parse_frame(&frame[..50], h.ts), Err(SkipReason::Truncated));
        // Snaplen cut inside the payload keeps the captured part.
        assert_eq!(parse_frame(&frame[..55], h.ts).unwrap().payload, b"a");
    }

    proptest! {
        #[test]
        fn build_then_parse_is_identity(
            src in any::<u32>(), dst in any::<u32>(),
            sp in any::<u16>(), dp in any::<u16>(),
            seq in any::<u32>(), ack in any::<u32>(), ack_valid in any::<bool>(),
            secs in 0u64..u32::MAX as u64, nanos in 0u32..1_000_000_000,
            payload in proptest::collection::vec(any::<u8>(), 0..200),
            vlan in proptest::option::of(0u16..4096),
        ) {
            let h = PacketHeader {
                ts: CaptureTimestamp::new(secs, nanos).unwrap(),
                src_ip: src.into(), dst_ip: dst.into(),
                src_port: sp, dst_port: dp, seq, ack, ack_valid,
            };
            let frame = FrameBuilder { vlan, ..Default::default() }.build(&h, &payload);
            let view = parse_frame(&frame, h.ts).unwrap();
            prop_assert_eq!(view.header, h);
            prop_assert_eq!(view.payload, &payload[..]);
        }
    }
}
