//! Classic libpcap capture files.
//!
//! Both timestamp resolutions (magic `0xA1B2C3D4` for microseconds,
//! `0xA1B23C4D` for nanoseconds) are accepted in either byte order. Only
//! Ethernet (linktype 1) captures are supported. A truncated trailing record
//! ends iteration without an error.

use std::io::{self, Read, Write};

use crate::time::CaptureTimestamp;

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

/// Largest record length we are willing to believe. Anything bigger is
/// treated as a corrupt trailing record.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("unrecognized pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("capture shorter than the 24-byte global header")]
    TruncatedHeader,
    #[error("unsupported link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }
}

/// Parsed global header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    order: ByteOrder,
    pub nanosecond: bool,
    pub snaplen: u32,
    pub linktype: u32,
}

impl PcapHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, PcapError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader);
        }
        let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let (order, nanosecond) = match le {
            MAGIC_MICROS => (ByteOrder::Little, false),
            MAGIC_NANOS => (ByteOrder::Little, true),
            m if m.swap_bytes() == MAGIC_MICROS => (ByteOrder::Big, false),
            m if m.swap_bytes() == MAGIC_NANOS => (ByteOrder::Big, true),
            m => return Err(PcapError::BadMagic(m)),
        };
        let snaplen = order.u32(&bytes[16..20]);
        let linktype = order.u32(&bytes[20..24]) & 0x0FFF_FFFF;
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(linktype));
        }
        Ok(PcapHeader { order, nanosecond, snaplen, linktype })
    }

    /// Decodes a 16-byte record header into `(timestamp, captured length)`.
    /// Returns `None` for records that cannot be valid.
    fn record(&self, hdr: &[u8]) -> Option<(CaptureTimestamp, usize)> {
        let sec = self.order.u32(&hdr[0..4]) as u64;
        let frac = self.order.u32(&hdr[4..8]);
        let incl = self.order.u32(&hdr[8..12]);
        if incl > MAX_RECORD_LEN {
            return None;
        }
        let ts = if self.nanosecond {
            CaptureTimestamp::new(sec, frac)?
        } else {
            CaptureTimestamp::from_micros(sec, frac)?
        };
        Some((ts, incl as usize))
    }
}

/// Zero-copy iterator over the records of an in-memory capture.
#[derive(Debug, Clone)]
pub struct PcapSlice<'a> {
    header: PcapHeader,
    rest: &'a [u8],
}

/// Opens an in-memory capture.
pub fn read_pcap(bytes: &[u8]) -> Result<PcapSlice<'_>, PcapError> {
    let header = PcapHeader::parse(bytes)?;
    Ok(PcapSlice { header, rest: &bytes[GLOBAL_HEADER_LEN..] })
}

impl<'a> PcapSlice<'a> {
    pub fn header(&self) -> &PcapHeader {
        &self.header
    }
}

impl<'a> Iterator for PcapSlice<'a> {
    type Item = (CaptureTimestamp, &'a [u8]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.rest.len() < RECORD_HEADER_LEN {
            self.rest = &[];
            return None;
        }
        let Some((ts, len)) = self.header.record(&self.rest[..RECORD_HEADER_LEN]) else {
            self.rest = &[];
            return None;
        };
        let body = &self.rest[RECORD_HEADER_LEN..];
        if body.len() < len {
            self.rest = &[];
            return None;
        }
        let (frame, rest) = body.split_at(len);
        self.rest = rest;
        Some((ts, frame))
    }
}

/// Streaming reader over any `Read`; yields owned frames.
pub struct PcapReader<R> {
    header: PcapHeader,
    inner: R,
    record: [u8; RECORD_HEADER_LEN],
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut global = [0u8; GLOBAL_HEADER_LEN];
        let n = read_full(&mut inner, &mut global)?;
        if n < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader);
        }
        let header = PcapHeader::parse(&global)?;
        Ok(PcapReader { header, inner, record: [0; RECORD_HEADER_LEN], done: false })
    }

    pub fn header(&self) -> &PcapHeader {
        &self.header
    }

    /// Reads the next frame into `buf` (cleared first). Returns `Ok(None)` at
    /// end of input or at a truncated trailing record.
    pub fn next_into(&mut self, buf: &mut Vec<u8>) -> io::Result<Option<CaptureTimestamp>> {
        if self.done {
            return Ok(None);
        }
        if read_full(&mut self.inner, &mut self.record)? < RECORD_HEADER_LEN {
            self.done = true;
            return Ok(None);
        }
        let Some((ts, len)) = self.header.record(&self.record) else {
            self.done = true;
            return Ok(None);
        };
        buf.clear();
        buf.resize(len, 0);
        if read_full(&mut self.inner, buf)? < len {
            self.done = true;
            buf.clear();
            return Ok(None);
        }
        Ok(Some(ts))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = io::Result<(CaptureTimestamp, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = Vec::new();
        match self.next_into(&mut buf) {
            Ok(Some(ts)) => Some(Ok((ts, buf))),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes little-endian, nanosecond-resolution Ethernet captures.
pub struct PcapWriter<W> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut hdr = Vec::with_capacity(GLOBAL_HEADER_LEN);
        hdr.extend_from_slice(&MAGIC_NANOS.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&65_535u32.to_le_bytes());
        hdr.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner })
    }

    pub fn write_frame(&mut self, ts: CaptureTimestamp, frame: &[u8]) -> io::Result<()> {
        let mut rec = [0u8; RECORD_HEADER_LEN];
        rec[0..4].copy_from_slice(&(ts.seconds() as u32).to_le_bytes());
        rec[4..8].copy_from_slice(&ts.nanos().to_le_bytes());
        rec[8..12].copy_from_slice(&(frame.len() as u32).to_le_bytes());
        rec[12..16].copy_from_slice(&(frame.len() as u32).to_le_bytes());
        self.inner.write_all(&rec)?;
        self.inner.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(magic: u32, big_endian: bool) -> Vec<u8> {
        let words: [u32; 5] = [0x0004_0002, 0, 0, 65_535, 1];
        let mut v = Vec::new();
        let push = |v: &mut Vec<u8>, x: u32| {
            if big_endian {
                v.extend_from_slice(&x.to_be_bytes())
            } else {
                v.extend_from_slice(&x.to_le_bytes())
            }
        };
        push(&mut v, magic);
        // version 2.4 is two u16; write as one word in the chosen order
        if big_endian {
            v.extend_from_slice(&[0, 2, 0, 4]);
        } else {
            v.extend_from_slice(&[2, 0, 4, 0]);
        }
        for w in &words[1..] {
            push(&mut v, *w);
        }
        v
    }

    fn record(v: &mut Vec<u8>, big_endian: bool, sec: u32, frac: u32, data: &[u8]) {
        for x in [sec, frac, data.len() as u32, data.len() as u32] {
            if big_endian {
                v.extend_from_slice(&x.to_be_bytes())
            } else {
                v.extend_from_slice(&x.to_le_bytes())
            }
        }
        v.extend_from_slice(data);
    }

    #[test]
    fn empty_nanosecond_capture() {
        let bytes = global(MAGIC_NANOS, false);
        assert_eq!(read_pcap(&bytes).unwrap().count(), 0);
    }

    #[test]
    fn microseconds_are_widened() {
        for be in [false, true] {
            let mut bytes = global(MAGIC_MICROS, be);
            record(&mut bytes, be, 10, 500, b"abc");
            let frames: Vec<_> = read_pcap(&bytes).unwrap().collect();
            assert_eq!(frames.len(), 1);
            assert_eq!(frames[0].0, CaptureTimestamp::new(10, 500_000).unwrap());
            assert_eq!(frames[0].1, b"abc");
        }
    }

    #[test]
    fn big_endian_nanos() {
        let mut bytes = global(MAGIC_NANOS, true);
        record(&mut bytes, true, 7, 123_456_789, b"xy");
        let (ts, frame) = read_pcap(&bytes).unwrap().next().unwrap();
        assert_eq!(ts, CaptureTimestamp::new(7, 123_456_789).unwrap());
        assert_eq!(frame, b"xy");
    }

    #[test]
    fn truncated_trailing_record_stops_cleanly() {
        let mut bytes = global(MAGIC_NANOS, false);
        record(&mut bytes, false, 1, 0, b"first");
        record(&mut bytes, false, 2, 0, b"second");
        bytes.truncate(bytes.len() - 3);
        let frames: Vec<_> = read_pcap(&bytes).unwrap().collect();
        assert_eq!(frames.len(), 1);

        let streamed: Vec<_> = PcapReader::new(&bytes[..]).unwrap().collect();
        assert_eq!(streamed.len(), 1);
        assert_eq!(streamed[0].as_ref().unwrap().1, b"first");
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read_pcap(&[0u8; 10]), Err(PcapError::TruncatedHeader)));
        let mut bad = global(MAGIC_NANOS, false);
        bad[0] = 0;
        assert!(matches!(read_pcap(&bad), Err(PcapError::BadMagic(_))));
        let mut raw_ip = global(MAGIC_NANOS, false);
        raw_ip[20] = 101;
        assert!(matches!(read_pcap(&raw_ip), Err(PcapError::UnsupportedLinkType(101))));
        assert!(matches!(
            PcapReader::new(&[0u8; 3][..]),
            Err(PcapError::TruncatedHeader)
        ));
    }

    #[test]
    fn writer_round_trip() {
        let mut w = PcapWriter::new(Vec::new()).unwrap();
        let ts = CaptureTimestamp::new(1_393_978_285, 777_375_000).unwrap();
        w.write_frame(ts, b"frame").unwrap();
        let bytes = w.into_inner();
        let frames: Vec<_> = read_pcap(&bytes).unwrap().collect();
        assert_eq!(frames, vec![(ts, &b"frame"[..])]);
        assert!(read_pcap(&bytes).unwrap().header().nanosecond);
    }
}
