//! Transaction-affine load balancing across consumers.
//!
//! The feeder hash folds the request ACK / response SEQ into the 4-tuple
//! hash, so the two halves of a transaction always reach the same consumer
//! while one busy connection still spreads across all of them.

use std::sync::mpsc::{Receiver, SyncSender, TrySendError};

use crate::hashing::{consumer_index, feeder_hash, ConsumerCount, MissingAck};
use crate::http::{classify_http, HttpMessage, MessageKind};
use crate::packet::{parse_frame, PacketHeader};
use crate::time::CaptureTimestamp;

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Count and discard messages offered to a full queue.
    Drop,
    /// Wait for the consumer to make room.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeederConfig {
    pub consumers: ConsumerCount,
    pub queue_capacity: usize,
    pub overflow: OverflowPolicy,
}

impl FeederConfig {
    pub fn new(consumers: ConsumerCount) -> Self {
        FeederConfig {
            consumers,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            overflow: OverflowPolicy::Drop,
        }
    }
}

/// Consumer index for a message described by its header and kind.
#[inline]
pub fn dispatch_header(h: &PacketHeader, kind: MessageKind, n: ConsumerCount) -> Result<usize, MissingAck> {
    feeder_hash(h, kind).map(|v| consumer_index(v, n))
}

pub fn dispatch(msg: &HttpMessage, cfg: &FeederConfig) -> Result<usize, MissingAck> {
    dispatch_header(&msg.header, msg.kind(), cfg.consumers)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsumerShare {
    pub packets_dispatched: u64,
    pub drops: u64,
    /// Filled in from the consumer once it has finished.
    pub transactions_completed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeederStats {
    pub per_consumer: Vec<ConsumerShare>,
    /// Requests that could not be hashed (no ACK flag).
    pub unhashable: u64,
}

impl FeederStats {
    pub fn new(n: ConsumerCount) -> Self {
        FeederStats { per_consumer: vec![ConsumerShare::default(); n.get()], unhashable: 0 }
    }

    pub fn dispatched(&self) -> u64 {
        self.per_consumer.iter().map(|c| c.packets_dispatched).sum()
    }

    pub fn drops(&self) -> u64 {
        self.per_consumer.iter().map(|c| c.drops).sum()
    }

    pub fn transactions(&self) -> u64 {
        self.per_consumer.iter().map(|c| c.transactions_completed).sum()
    }

    /// Messages offered to the consumers (delivered or dropped).
    pub fn offered(&self) -> u64 {
        self.dispatched() + self.drops()
    }

    /// Fraction of dispatched packets each consumer received.
    pub fn packet_shares(&self) -> Vec<f64> {
        shares(self.per_consumer.iter().map(|c| c.packets_dispatched))
    }

    pub fn transaction_shares(&self) -> Vec<f64> {
        shares(self.per_consumer.iter().map(|c| c.transactions_completed))
    }
}

fn shares(counts: impl Iterator<Item = u64> + Clone) -> Vec<f64> {
    let total: u64 = counts.clone().sum();
    counts
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Outcome of offering a message to a sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    /// Queue full under [`OverflowPolicy::Drop`].
    Dropped,
    /// The receiving side is gone; the feeder stops.
    Closed,
}

/// Destination for one consumer's messages.
pub trait MessageSink {
    fn deliver(&mut self, msg: HttpMessage, policy: OverflowPolicy) -> Delivery;
}

impl MessageSink for Vec<HttpMessage> {
    fn deliver(&mut self, msg: HttpMessage, _: OverflowPolicy) -> Delivery {
        self.push(msg);
        Delivery::Delivered
    }
}

impl<F: FnMut(HttpMessage)> MessageSink for FnSink<F> {
    fn deliver(&mut self, msg: HttpMessage, _: OverflowPolicy) -> Delivery {
        (self.0)(msg);
        Delivery::Delivered
    }
}

/// Adapts a closure into an always-accepting sink.
pub struct FnSink<F>(pub F);

/// Producer end of a bounded single-consumer queue.
#[derive(Debug, Clone)]
pub struct QueueSender(SyncSender<HttpMessage>);

impl MessageSink for QueueSender {
    fn deliver(&mut self, msg: HttpMessage, policy: OverflowPolicy) -> Delivery {
        match policy {
            OverflowPolicy::Block => match self.0.send(msg) {
                Ok(()) => Delivery::Delivered,
                Err(_) => Delivery::Closed,
            },
            OverflowPolicy::Drop => match self.0.try_send(msg) {
                Ok(()) => Delivery::Delivered,
                Err(TrySendError::Full(_)) => Delivery::Dropped,
                Err(TrySendError::Disconnected(_)) => Delivery::Closed,
            },
        }
    }
}

/// Creates a bounded queue of `capacity` messages.
pub fn bounded_queue(capacity: usize) -> (QueueSender, Receiver<HttpMessage>) {
    let (tx, rx) = std::sync::mpsc::sync_channel(capacity.max(1));
    (QueueSender(tx), rx)
}

/// Dispatches every message from `source` to its designated sink, in source
/// order. `sinks.len()` must equal the configured consumer count.
pub fn run_feeder<I, S>(source: I, cfg: &FeederConfig, sinks: &mut [S]) -> FeederStats
where
    I: IntoIterator<Item = HttpMessage>,
    S: MessageSink,
{
    assert_eq!(sinks.len(), cfg.consumers.get(), "one sink per consumer");
    let mut stats = FeederStats::new(cfg.consumers);
    for msg in source {
        let Ok(idx) = dispatch(&msg, cfg) else {
            stats.unhashable += 1;
            continue;
        };
        match sinks[idx].deliver(msg, cfg.overflow) {
            Delivery::Delivered => stats.per_consumer[idx].packets_dispatched += 1,
            Delivery::Dropped => stats.per_consumer[idx].drops += 1,
            Delivery::Closed => {
                stats.per_consumer[idx].drops += 1;
                break;
            }
        }
    }
    stats
}

/// Counts of frames seen while classifying a capture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameCounters {
    pub frames: u64,
    pub bytes: u64,
    pub skipped: u64,
    pub not_http: u64,
    pub requests: u64,
    pub responses: u64,
}

impl FrameCounters {
    pub fn merge(&mut self, o: &FrameCounters) {
        self.frames += o.frames;
        self.bytes += o.bytes;
        self.skipped += o.skipped;
        self.not_http += o.not_http;
        self.requests += o.requests;
        self.responses += o.responses;
    }

    pub fn classified(&self) -> u64 {
        self.requests + self.responses
    }
}

/// Decodes and classifies one captured frame, updating `counters`.
#[inline]
pub fn classify_frame(ts: CaptureTimestamp, frame: &[u8], counters: &mut FrameCounters) -> Option<HttpMessage> {
    counters.frames += 1;
    counters.bytes += frame.len() as u64;
    let Ok(view) = parse_frame(frame, ts) else {
        counters.skipped += 1;
        return None;
    };
    match classify_http(&view) {
        Some(m) => {
            match m.kind() {
                MessageKind::Request => counters.requests += 1,
                MessageKind::Response => counters.responses += 1,
            }
            Some(m)
        }
        None => {
            counters.not_http += 1;
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::{MessageHead, Method, RequestHead, ResponseHead};
    use std::net::Ipv4Addr;

    fn pair(port: u16, k: u32) -> (HttpMessage, HttpMessage) {
        let c = Ipv4Addr::new(10, 1, 2, 3);
        let s = Ipv4Addr::new(10, 9, 9, 9);
        let h = |src, dst, sp, dp, seq, ack| PacketHeader {
            ts: CaptureTimestamp::ZERO,
            src_ip: src,
            dst_ip: dst,
            src_port: sp,
            dst_port: dp,
            seq,
            ack,
            ack_valid: true,
        };
        (
            HttpMessage {
                header: h(c, s, port, 80, 1, k),
                head: MessageHead::Request(RequestHead {
                    method: Method::Get,
                    uri: "/".into(),
                    host: None,
                    agent: None,
                }),
            },
            HttpMessage {
                header: h(s, c, 80, port, k, 2),
                head: MessageHead::Response(ResponseHead { code: 200, reason: None }),
            },
        )
    }

    #[test]
    fn single_consumer_always_zero() {
        let cfg = FeederConfig::new(ConsumerCount::ONE);
        for k in [0u32, 1, 0xFFFF_FFFF] {
            let (a, b) = pair(1234, k);
            assert_eq!(dispatch(&a, &cfg), Ok(0));
            assert_eq!(dispatch(&b, &cfg), Ok(0));
        }
    }

    #[test]
    fn empty_source() {
        let cfg = FeederConfig::new(ConsumerCount::new(3).unwrap());
        let mut sinks = vec![Vec::new(), Vec::new(), Vec::new()];
        let stats = run_feeder(Vec::new(), &cfg, &mut sinks);
        assert_eq!(stats, FeederStats::new(cfg.consumers));
        assert_eq!(stats.packet_shares(), vec![0.0; 3]);
    }

    #[test]
    fn one_transaction_goes_to_one_consumer() {
        let cfg = FeederConfig::new(ConsumerCount::new(2).unwrap());
        let (a, b) = pair(5555, 0x1234_5678);
        let mut sinks = vec![Vec::new(), Vec::new()];
        let stats = run_feeder(vec![a, b], &cfg, &mut sinks);
        let mut lens: Vec<_> = sinks.iter().map(Vec::len).collect();
        lens.sort();
        assert_eq!(lens, vec![0, 2]);
        assert_eq!(stats.dispatched(), 2);
    }

    #[test]
    fn per_consumer_order_preserved() {
        let cfg = FeederConfig::new(ConsumerCount::new(3).unwrap());
        let msgs: Vec<_> = (0..300u32).map(|k| pair(1000 + (k % 7) as u16, k * 7919).0).collect();
        let mut sinks = vec![Vec::new(), Vec::new(), Vec::new()];
        run_feeder(msgs.clone(), &cfg, &mut sinks);
        for (i, sink) in sinks.iter().enumerate() {
            let expected: Vec<_> =
                msgs.iter().filter(|m| dispatch(m, &cfg) == Ok(i)).cloned().collect();
            assert_eq!(sink, &expected);
        }
    }

    #[test]
    fn drop_policy_counts_overflow() {
        let cfg = FeederConfig {
            consumers: ConsumerCount::ONE,
            queue_capacity: 2,
            overflow: OverflowPolicy::Drop,
        };
        let (tx, rx) = bounded_queue(cfg.queue_capacity);
        let msgs: Vec<_> = (0..5).map(|k| pair(1, k).0).collect();
        let stats = run_feeder(msgs, &cfg, &mut [tx]);
        assert_eq!(stats.per_consumer[0].packets_dispatched, 2);
        assert_eq!(stats.per_consumer[0].drops, 3);
        assert_eq!(stats.offered(), 5);
        assert_eq!(rx.try_iter().count(), 2);
    }

    #[test]
    fn unhashable_requests_are_counted() {
        let cfg = FeederConfig::new(ConsumerCount::new(2).unwrap());
        let (mut a, b) = pair(1, 1);
        a.header.ack_valid = false;
        let mut sinks = vec![Vec::new(), Vec::new()];
        let stats = run_feeder(vec![a, b], &cfg, &mut sinks);
        assert_eq!(stats.unhashable, 1);
        assert_eq!(stats.dispatched(), 1);
    }
}
