//! Wiring of frames → classifier → feeder → per-consumer correlators.
//!
//! Two drivers share the same stages:
//!
//! * the batch driver works on an in-memory capture. With the `parallel`
//!   feature, frame classification and the per-consumer correlators run on
//!   the rayon pool; otherwise everything runs on the calling thread. Both
//!   produce identical output.
//! * the streaming driver runs one feeder thread and one thread per
//!   consumer connected by bounded queues, and ships records to a writer
//!   over another bounded channel.

use std::io;
use std::sync::mpsc::{Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use crate::feeder::{
    bounded_queue, classify_frame, run_feeder, FeederConfig, FeederStats, FrameCounters, OverflowPolicy,
    DEFAULT_QUEUE_CAPACITY,
};
use crate::hashing::ConsumerCount;
use crate::http::HttpMessage;
use crate::matcher::{ConfigError, Correlator, GcPolicy, MatchCounters, TableConfig};
use crate::pcap::{read_pcap, PcapError};
use crate::record::TransactionRecord;
use crate::stats::{Binning, StatsAccumulator, StatsError, DEFAULT_SAMPLE_CAP};
use crate::time::CaptureTimestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzerConfig {
    pub consumers: ConsumerCount,
    pub table: TableConfig,
    pub gc: GcPolicy,
    pub binning: Binning,
    pub sample_cap: usize,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            consumers: ConsumerCount::ONE,
            table: TableConfig::default(),
            gc: GcPolicy::default(),
            binning: Binning::default(),
            sample_cap: DEFAULT_SAMPLE_CAP,
        }
    }
}

impl AnalyzerConfig {
    pub fn with_consumers(n: ConsumerCount) -> Self {
        AnalyzerConfig { consumers: n, ..AnalyzerConfig::default() }
    }

    fn correlators(&self) -> Result<Vec<Correlator>, ConfigError> {
        (0..self.consumers.get()).map(|_| Correlator::new(self.table, self.gc)).collect()
    }

    fn accumulator(&self) -> StatsAccumulator {
        StatsAccumulator::new(self.binning, self.sample_cap)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reading capture: {0}")]
    Io(#[from] io::Error),
}

/// What one consumer produced.
#[derive(Debug, Clone)]
pub struct ConsumerOutput {
    /// Records in emission order.
    pub records: Vec<TransactionRecord>,
    pub counters: MatchCounters,
    pub stats: StatsAccumulator,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub frames: FrameCounters,
    pub feeder: FeederStats,
    pub consumers: Vec<ConsumerOutput>,
}

impl BatchOutput {
    /// Records of consumer 0, then consumer 1, and so on.
    pub fn records(&self) -> impl Iterator<Item = &TransactionRecord> {
        self.consumers.iter().flat_map(|c| c.records.iter())
    }

    pub fn counters(&self) -> MatchCounters {
        let mut total = MatchCounters::default();
        for c in &self.consumers {
            total.merge(&c.counters);
        }
        total
    }

    pub fn merged_stats(&self) -> Result<StatsAccumulator, StatsError> {
        merge_stats(self.consumers.iter().map(|c| &c.stats))
    }
}

pub fn merge_stats<'a>(
    mut accs: impl Iterator<Item = &'a StatsAccumulator>,
) -> Result<StatsAccumulator, StatsError> {
    let mut out = accs.next().cloned().unwrap_or_default();
    for a in accs {
        out.merge_from(a)?;
    }
    Ok(out)
}

/// Classifies frames on the calling thread, preserving order.
pub fn classify_sequential<'a, I>(frames: I) -> (Vec<HttpMessage>, FrameCounters)
where
    I: IntoIterator<Item = (CaptureTimestamp, &'a [u8])>,
{
    let mut counters = FrameCounters::default();
    let msgs = frames
        .into_iter()
        .filter_map(|(ts, f)| classify_frame(ts, f, &mut counters))
        .collect();
    (msgs, counters)
}

#[cfg(feature = "parallel")]
const CLASSIFY_CHUNK: usize = 4096;

/// Classifies frames on the rayon pool, preserving order.
#[cfg(feature = "parallel")]
pub fn classify_parallel(frames: &[(CaptureTimestamp, &[u8])]) -> (Vec<HttpMessage>, FrameCounters) {
    use rayon::prelude::*;
    let parts: Vec<_> = frames
        .par_chunks(CLASSIFY_CHUNK)
        .map(|chunk| classify_sequential(chunk.iter().copied()))
        .collect();
    let mut counters = FrameCounters::default();
    let mut msgs = Vec::with_capacity(parts.iter().map(|p| p.0.len()).sum());
    for (m, c) in parts {
        msgs.extend(m);
        counters.merge(&c);
    }
    (msgs, counters)
}

/// Runs one consumer over its messages, then drains its table.
fn correlate(mut corr: Correlator, msgs: Vec<HttpMessage>, mut stats: StatsAccumulator) -> ConsumerOutput {
    let mut records = Vec::new();
    let mut emit = |r: TransactionRecord| {
        stats.record_transaction(&r);
        records.push(r);
    };
    for m in msgs {
        corr.process(m, &mut emit);
    }
    corr.finish(&mut emit);
    ConsumerOutput { records, counters: *corr.counters(), stats }
}

fn partition(msgs: Vec<HttpMessage>, cfg: &AnalyzerConfig) -> (Vec<Vec<HttpMessage>>, FeederStats) {
    let feeder = FeederConfig { overflow: OverflowPolicy::Block, ..FeederConfig::new(cfg.consumers) };
    let mut parts: Vec<Vec<HttpMessage>> = vec![Vec::new(); cfg.consumers.get()];
    let stats = run_feeder(msgs, &feeder, &mut parts);
    (parts, stats)
}

fn finish_batch(frames: FrameCounters, mut feeder: FeederStats, consumers: Vec<ConsumerOutput>) -> BatchOutput {
    for (share, c) in feeder.per_consumer.iter_mut().zip(&consumers) {
        share.transactions_completed = c.counters.matched;
    }
    BatchOutput { frames, feeder, consumers }
}

/// Analyzes already-classified messages on the calling thread.
pub fn analyze_messages_sequential(
    msgs: Vec<HttpMessage>,
    frames: FrameCounters,
    cfg: &AnalyzerConfig,
) -> Result<BatchOutput, ConfigError> {
    let corrs = cfg.correlators()?;
    let (parts, feeder) = partition(msgs, cfg);
    let outs = corrs
        .into_iter()
        .zip(parts)
        .map(|(c, p)| correlate(c, p, cfg.accumulator()))
        .collect();
    Ok(finish_batch(frames, feeder, outs))
}

/// Analyzes already-classified messages, one rayon task per consumer.
#[cfg(feature = "parallel")]
pub fn analyze_messages_parallel(
    msgs: Vec<HttpMessage>,
    frames: FrameCounters,
    cfg: &AnalyzerConfig,
) -> Result<BatchOutput, ConfigError> {
    use rayon::prelude::*;
    let corrs = cfg.correlators()?;
    let (parts, feeder) = partition(msgs, cfg);
    let outs = corrs
        .into_par_iter()
        .zip(parts)
        .map(|(c, p)| correlate(c, p, cfg.accumulator()))
        .collect();
    Ok(finish_batch(frames, feeder, outs))
}

/// Single-threaded batch analysis of an in-memory capture.
pub fn analyze_sequential(pcap: &[u8], cfg: &AnalyzerConfig) -> Result<BatchOutput, PipelineError> {
    let (msgs, frames) = classify_sequential(read_pcap(pcap)?);
    Ok(analyze_messages_sequential(msgs, frames, cfg)?)
}

/// Data-parallel batch analysis of an in-memory capture.
#[cfg(feature = "parallel")]
pub fn analyze_parallel(pcap: &[u8], cfg: &AnalyzerConfig) -> Result<BatchOutput, PipelineError> {
    let frames: Vec<_> = read_pcap(pcap)?.collect();
    let (msgs, counters) = classify_parallel(&frames);
    Ok(analyze_messages_parallel(msgs, counters, cfg)?)
}

/// Batch analysis using the parallel driver when it is compiled in.
pub fn analyze(pcap: &[u8], cfg: &AnalyzerConfig) -> Result<BatchOutput, PipelineError> {
    #[cfg(feature = "parallel")]
    {
        analyze_parallel(pcap, cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        analyze_sequential(pcap, cfg)
    }
}

pub const RECORD_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub analyzer: AnalyzerConfig,
    pub queue_capacity: usize,
    pub overflow: OverflowPolicy,
}

impl StreamConfig {
    /// Lossless offline replay: the feeder waits on full queues.
    pub fn offline(analyzer: AnalyzerConfig) -> Self {
        StreamConfig { analyzer, queue_capacity: DEFAULT_QUEUE_CAPACITY, overflow: OverflowPolicy::Block }
    }
}

#[derive(Debug, Clone)]
pub struct ConsumerSummary {
    pub counters: MatchCounters,
    pub stats: StatsAccumulator,
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub frames: FrameCounters,
    pub feeder: FeederStats,
    pub consumers: Vec<ConsumerSummary>,
    pub elapsed: Duration,
}

impl StreamOutput {
    pub fn counters(&self) -> MatchCounters {
        let mut total = MatchCounters::default();
        for c in &self.consumers {
            total.merge(&c.counters);
        }
        total
    }

    pub fn merged_stats(&self) -> Result<StatsAccumulator, StatsError> {
        merge_stats(self.consumers.iter().map(|c| &c.stats))
    }
}

/// Runs the threaded pipeline over `frames`, sending records in batches to
/// `records`. Consumers are drained once the source is exhausted. A source
/// error stops the feeder; consumers still drain and the error is returned
/// together with the partial output.
pub fn run_stream<I>(
    frames: I,
    cfg: &StreamConfig,
    records: &SyncSender<Vec<TransactionRecord>>,
) -> Result<(StreamOutput, Option<io::Error>), ConfigError>
where
    I: Iterator<Item = io::Result<(CaptureTimestamp, Vec<u8>)>> + Send,
{
    let started = Instant::now();
    let n = cfg.analyzer.consumers.get();
    let corrs = cfg.analyzer.correlators()?;
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded_queue(cfg.queue_capacity)).unzip();
    let feeder_cfg = FeederConfig {
        consumers: cfg.analyzer.consumers,
        queue_capacity: cfg.queue_capacity,
        overflow: cfg.overflow,
    };

    Ok(thread::scope(|s| {
        let handles: Vec<_> = corrs
            .into_iter()
            .zip(receivers)
            .map(|(corr, rx)| {
                let out = records.clone();
                let acc = cfg.analyzer.accumulator();
                s.spawn(move || consume(corr, rx, acc, out))
            })
            .collect();

        let mut counters = FrameCounters::default();
        let mut error = None;
        let mut sinks = senders;
        let source = frames.map_while(|r| match r {
            Ok(v) => Some(v),
            Err(e) => {
                error = Some(e);
                None
            }
        });
        let msgs = source.filter_map(|(ts, f)| classify_frame(ts, &f, &mut counters));
        let mut feeder = run_feeder(msgs, &feeder_cfg, &mut sinks);
        drop(sinks);

        let consumers: Vec<ConsumerSummary> =
            handles.into_iter().map(|h| h.join().expect("consumer thread panicked")).collect();
        for (share, c) in feeder.per_consumer.iter_mut().zip(&consumers) {
            share.transactions_completed = c.counters.matched;
        }
        let out = StreamOutput { frames: counters, feeder, consumers, elapsed: started.elapsed() };
        (out, error)
    }))
}

/// Checks that a stream configuration can be instantiated.
pub fn validate_config(cfg: &AnalyzerConfig) -> Result<(), ConfigError> {
    cfg.gc.validate()?;
    crate::matcher::MatchTable::new(cfg.table).map(|_| ())
}

fn consume(
    mut corr: Correlator,
    rx: Receiver<HttpMessage>,
    mut stats: StatsAccumulator,
    out: SyncSender<Vec<TransactionRecord>>,
) -> ConsumerSummary {
    let mut batch = Vec::with_capacity(RECORD_BATCH);
    let mut emit = |r: TransactionRecord| {
        stats.record_transaction(&r);
        batch.push(r);
        if batch.len() >= RECORD_BATCH {
            let _ = out.send(std::mem::replace(&mut batch, Vec::with_capacity(RECORD_BATCH)));
        }
    };
    for msg in rx {
        corr.process(msg, &mut emit);
    }
    corr.finish(&mut emit);
    if !batch.is_empty() {
        let _ = out.send(batch);
    }
    ConsumerSummary { counters: *corr.counters(), stats }
}

/// Convenience wrapper around [`run_stream`] that collects every record.
pub fn run_stream_collect<I>(
    frames: I,
    cfg: &StreamConfig,
) -> Result<(Vec<TransactionRecord>, StreamOutput, Option<io::Error>), ConfigError>
where
    I: Iterator<Item = io::Result<(CaptureTimestamp, Vec<u8>)>> + Send,
{
    let (tx, rx) = std::sync::mpsc::sync_channel(64);
    thread::scope(|s| {
        let writer = s.spawn(move || rx.into_iter().flatten().collect::<Vec<_>>());
        let res = run_stream(frames, cfg, &tx);
        drop(tx);
        let records = writer.join().expect("writer thread panicked");
        res.map(|(out, err)| (records, out, err))
    })
}
