//! Reassembly-free HTTP transaction analysis.
//!
//! HTTP requests and responses are recognized from the first packet of each
//! message and paired by TCP numbers alone: a response answers a request
//! when its SEQ equals the request's ACK on the reversed 4-tuple. A hash
//! over the 4-tuple and that number drives both the correlation table and
//! a load balancer that keeps every transaction on one consumer.

pub mod feeder;
pub mod hashing;
pub mod http;
pub mod matcher;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod record;
pub mod stats;
pub mod synthgen;
pub mod time;

pub use feeder::{dispatch, FeederConfig, FeederStats, OverflowPolicy};
pub use hashing::{consumer_index, feeder_hash, hash_4tuple, hash_transaction, ConsumerCount, HashValue};
pub use http::{classify_http, HttpMessage, MessageKind, Method};
pub use matcher::{Correlator, GcPolicy, MatchCounters, MatchTable, TableConfig};
pub use packet::{parse_frame, PacketHeader, PacketView};
pub use pcap::{read_pcap, PcapError, PcapReader, PcapWriter};
pub use pipeline::{analyze, AnalyzerConfig, BatchOutput, StreamConfig};
pub use record::{format_record, TransactionRecord};
pub use stats::{render_report, ReportFormat, StatsAccumulator};
pub use time::{CaptureTimestamp, ResponseTime};
