//! XOR hashes over the connection 4-tuple and the TCP seq/ack numbers.
//!
//! * [`hash_4tuple`] is the classic flow hash. It is symmetric, so both
//!   directions of a connection hash alike.
//! * [`hash_transaction`] additionally folds in the request's ACK number or
//!   the response's SEQ number. A response's SEQ equals its request's ACK, so
//!   both halves of a transaction land on the same value while distinct
//!   transactions of one connection spread out.
//! * [`feeder_hash`] further XORs the four bytes of that number together into
//!   the low byte, which randomizes the bits that a small `mod n` looks at.
//!
//! IP addresses enter as big-endian 32-bit integers and ports are
//! zero-extended.

use std::net::Ipv4Addr;
use std::num::NonZeroUsize;

use crate::http::{HttpMessage, MessageKind};
use crate::packet::PacketHeader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HashValue(pub u32);

/// Number of consumers a hash is reduced onto. Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConsumerCount(NonZeroUsize);

impl ConsumerCount {
    pub const ONE: ConsumerCount = ConsumerCount(NonZeroUsize::MIN);

    pub fn new(n: usize) -> Option<Self> {
        NonZeroUsize::new(n).map(ConsumerCount)
    }

    pub fn get(self) -> usize {
        self.0.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("request packet without the TCP ACK flag cannot be paired")]
pub struct MissingAck;

#[inline]
pub fn hash_4tuple(src_ip: Ipv4Addr, src_port: u16, dst_ip: Ipv4Addr, dst_port: u16) -> HashValue {
    HashValue(u32::from(src_ip) ^ u32::from(src_port) ^ u32::from(dst_ip) ^ u32::from(dst_port))
}

#[inline]
fn header_4tuple(h: &PacketHeader) -> HashValue {
    hash_4tuple(h.src_ip, h.src_port, h.dst_ip, h.dst_port)
}

/// The number a message contributes to its transaction hash: ACK for
/// requests, SEQ for responses.
#[inline]
pub fn pairing_number(h: &PacketHeader, kind: MessageKind) -> Result<u32, MissingAck> {
    match kind {
        MessageKind::Request if !h.ack_valid => Err(MissingAck),
        MessageKind::Request => Ok(h.ack),
        MessageKind::Response => Ok(h.seq),
    }
}

/// Table hash for a packet header of the given kind.
#[inline]
pub fn hash_transaction_header(h: &PacketHeader, kind: MessageKind) -> Result<HashValue, MissingAck> {
    let n = pairing_number(h, kind)?;
    Ok(HashValue(header_4tuple(h).0 ^ n))
}

pub fn hash_transaction(msg: &HttpMessage) -> Result<HashValue, MissingAck> {
    hash_transaction_header(&msg.header, msg.kind())
}

/// XOR of the four bytes of `n`.
#[inline]
pub fn fold_bytes(n: u32) -> u8 {
    let [a, b, c, d] = n.to_be_bytes();
    a ^ b ^ c ^ d
}

/// Load-balancing hash used to pick a consumer.
#[inline]
pub fn feeder_hash(h: &PacketHeader, kind: MessageKind) -> Result<HashValue, MissingAck> {
    let n = pairing_number(h, kind)?;
    Ok(HashValue(header_4tuple(h).0 ^ n ^ u32::from(fold_bytes(n))))
}

#[inline]
pub fn consumer_index(h: HashValue, n: ConsumerCount) -> usize {
    (h.0 as usize) % n.get()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::CaptureTimestamp;
    use proptest::prelude::*;

    // Bitwise oracle: XOR computed bit-by-bit over explicit 32-bit operands.
    fn xor_oracle(words: &[u32]) -> u32 {
        let mut out = 0u32;
        for bit in 0..32 {
            let ones = words.iter().filter(|w| (*w >> bit) & 1 == 1).count();
            if ones % 2 == 1 {
                out |= 1 << bit;
            }
        }
        out
    }

    fn hdr(src: u32, sp: u16, dst: u32, dp: u16, seq: u32, ack: u32) -> PacketHeader {
        PacketHeader {
            ts: CaptureTimestamp::ZERO,
            src_ip: src.into(),
            dst_ip: dst.into(),
            src_port: sp,
            dst_port: dp,
            seq,
            ack,
            ack_valid: true,
        }
    }

    #[test]
    fn frozen_oracle_values() {
        let words = [0x0A00_0001, 0x0000_1234, 0x0A00_0002, 0x0000_0050];
        assert_eq!(xor_oracle(&words), 0x0000_1267);
        assert_eq!(xor_oracle(&[0x0000_1267, 0xDEAD_BEEF]), 0xDEAD_AC88);
        assert_eq!(xor_oracle(&[0xDE, 0xAD, 0xBE, 0xEF]), 0x22);
        assert_eq!(xor_oracle(&[0xDEAD_AC88, 0x22]), 0xDEAD_ACAA);
    }

    #[test]
    fn four_tuple_examples() {
        let zero = Ipv4Addr::new(0, 0, 0, 0);
        assert_eq!(hash_4tuple(zero, 0, zero, 0), HashValue(0));
        let a = Ipv4Addr::from(0x0A00_0001);
        let b = Ipv4Addr::from(0x0A00_0002);
        assert_eq!(hash_4tuple(a, 0x1234, b, 0x0050), HashValue(0x0000_1267));
        assert_eq!(hash_4tuple(a, 0x1234, b, 0x50), hash_4tuple(b, 0x50, a, 0x1234));
    }

    #[test]
    fn transaction_examples() {
        let req = hdr(0x0A00_0001, 0x1234, 0x0A00_0002, 0x0050, 7, 0xDEAD_BEEF);
        assert_eq!(
            hash_transaction_header(&req, MessageKind::Request),
            Ok(HashValue(0xDEAD_AC88))
        );
        let zero_ack = hdr(0x0A00_0001, 0x1234, 0x0A00_0002, 0x0050, 7, 0);
        assert_eq!(
            hash_transaction_header(&zero_ack, MessageKind::Request),
            Ok(HashValue(0x0000_1267))
        );
        let mut no_ack = req;
        no_ack.ack_valid = false;
        assert_eq!(hash_transaction_header(&no_ack, MessageKind::Request), Err(MissingAck));
        // Responses do not need the ACK flag.
        assert!(hash_transaction_header(&no_ack, MessageKind::Response).is_ok());
    }

    #[test]
    fn feeder_examples() {
        let zero = hdr(0x0A00_0001, 0x1234, 0x0A00_0002, 0x0050, 0, 0);
        assert_eq!(feeder_hash(&zero, MessageKind::Request), Ok(HashValue(0x0000_1267)));
        let req = hdr(0x0A00_0001, 0x1234, 0x0A00_0002, 0x0050, 7, 0xDEAD_BEEF);
        assert_eq!(fold_bytes(0xDEAD_BEEF), 0x22);
        assert_eq!(feeder_hash(&req, MessageKind::Request), Ok(HashValue(0xDEAD_ACAA)));
        assert_eq!(consumer_index(HashValue(0xDEAD_ACAA), ConsumerCount::new(2).unwrap()), 0);
        assert_eq!(consumer_index(HashValue(0xDEAD_ACAA), ConsumerCount::new(3).unwrap()), 0xDEAD_ACAA % 3);
    }

    #[test]
    fn consumer_count() {
        assert!(ConsumerCount::new(0).is_none());
        for h in [0u32, 1, 0xFFFF_FFFF, 12345] {
            assert_eq!(consumer_index(HashValue(h), ConsumerCount::ONE), 0);
        }
    }

    proptest! {
        #[test]
        fn pairing_keystone(src in any::<u32>(), sp in any::<u16>(), dst in any::<u32>(),
                            dp in any::<u16>(), k in any::<u32>(), other in any::<u32>(),
                            n in 1usize..16) {
            let req = hdr(src, sp, dst, dp, other, k);
            let resp = hdr(dst, dp, src, sp, k, other.wrapping_add(1));
            prop_assert_eq!(
                hash_transaction_header(&req, MessageKind::Request),
                hash_transaction_header(&resp, MessageKind::Response)
            );
            let fr = feeder_hash(&req, MessageKind::Request).unwrap();
            let fs = feeder_hash(&resp, MessageKind::Response).unwrap();
            prop_assert_eq!(fr, fs);
            let n = ConsumerCount::new(n).unwrap();
            prop_assert_eq!(consumer_index(fr, n), consumer_index(fs, n));
        }

        #[test]
        fn matches_bitwise_oracle(src in any::<u32>(), sp in any::<u16>(), dst in any::<u32>(),
                                  dp in any::<u16>(), k in any::<u32>()) {
            let h = hdr(src, sp, dst, dp, 0, k);
            let base = [src, sp as u32, dst, dp as u32];
            prop_assert_eq!(hash_4tuple(src.into(), sp, dst.into(), dp).0, xor_oracle(&base));
            let with_k = [src, sp as u32, dst, dp as u32, k];
            prop_assert_eq!(hash_transaction_header(&h, MessageKind::Request).unwrap().0, xor_oracle(&with_k));
            let b = k.to_be_bytes().map(u32::from);
            let full = [src, sp as u32, dst, dp as u32, k, b[0], b[1], b[2], b[3]];
            prop_assert_eq!(feeder_hash(&h, MessageKind::Request).unwrap().0, xor_oracle(&full));
        }
    }
}
