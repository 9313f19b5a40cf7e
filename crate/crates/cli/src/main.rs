//! `hta`: offline HTTP transaction analyzer for classic PCAP captures.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, ValueEnum};
use hta_core::feeder::DEFAULT_QUEUE_CAPACITY;
use hta_core::matcher::{GcPolicy, TableConfig, DEFAULT_TABLE_SIZE};
use hta_core::pcap::PcapReader;
use hta_core::pipeline::{merge_stats, run_stream, validate_config, AnalyzerConfig, StreamConfig, StreamOutput};
use hta_core::record::{Deduplicator, TransactionRecord};
use hta_core::stats::{render_report, ReportFormat, StatsAccumulator, DEFAULT_SAMPLE_CAP};
use hta_core::{ConsumerCount, OverflowPolicy};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

/// Pairs HTTP requests and responses from the first packet of each message
/// and reports per-transaction records and aggregate statistics.
#[derive(Debug, Parser)]
#[command(name = "hta", version)]
struct Cli {
    /// Capture files (classic PCAP, Ethernet).
    #[arg(long = "input", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Consumers per input.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    consumers: u16,
    /// Cells in each consumer's match table.
    #[arg(long, default_value_t = DEFAULT_TABLE_SIZE)]
    table_size: usize,
    /// Messages each consumer may hold unmatched (defaults to the table size).
    #[arg(long)]
    pool_size: Option<usize>,
    /// Seconds of capture time after which an unmatched message is emitted.
    #[arg(long, default_value_t = 60.0)]
    gc_timeout: f64,
    /// Seconds of capture time between garbage-collection sweeps.
    #[arg(long, default_value_t = 1.0)]
    gc_sweep: f64,
    /// Where to write transaction records (`-` for stdout).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Where to write the statistics report (`-` for stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    report_format: Format,
    /// Drop records that repeat a (4-tuple, match number) key.
    #[arg(long)]
    dedup: bool,
    /// Write records sorted by first timestamp instead of emission order.
    #[arg(long)]
    sort_records: bool,
    /// Treat all inputs as one capture split into consecutive files.
    #[arg(long)]
    chunked: bool,
    /// Response-time samples kept exactly before falling back to the histogram.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    sample_cap: usize,
    /// Messages buffered per consumer queue.
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    /// Discard messages when a consumer queue is full instead of waiting.
    #[arg(long)]
    lossy: bool,
}

enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(e)) => {
            eprintln!("hta: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("hta: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn seconds(name: &str, v: f64) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| Failure::Config(anyhow!("--{name} must be a positive number of seconds, got {v}")))
}

fn config(cli: &Cli) -> Result<StreamConfig, Failure> {
    let analyzer = AnalyzerConfig {
        consumers: ConsumerCount::new(cli.consumers.into()).expect("clap enforces >= 1"),
        table: TableConfig { cells: cli.table_size, pool_capacity: cli.pool_size.unwrap_or(cli.table_size) },
        gc: GcPolicy { idle_timeout: seconds("gc-timeout", cli.gc_timeout)?, sweep_period: seconds("gc-sweep", cli.gc_sweep)? },
        sample_cap: cli.sample_cap,
        ..AnalyzerConfig::default()
    };
    validate_config(&analyzer).map_err(|e| Failure::Config(e.into()))?;
    if cli.queue_capacity == 0 {
        return Err(Failure::Config(anyhow!("--queue-capacity must be at least 1")));
    }
    Ok(StreamConfig {
        analyzer,
        queue_capacity: cli.queue_capacity,
        overflow: if cli.lossy { OverflowPolicy::Drop } else { OverflowPolicy::Block },
    })
}

type Reader = PcapReader<BufReader<File>>;

fn open(path: &Path) -> Result<Reader, Failure> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(Failure::Io)?;
    PcapReader::new(BufReader::with_capacity(1 << 20, file))
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Io)
}

fn create(path: &Path) -> Result<Box<dyn Write + Send>, Failure> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::Io)?;
    Ok(Box::new(BufWriter::new(f)))
}

/// Record output honoring `--dedup` and `--sort-records`.
struct RecordWriter {
    out: Option<Box<dyn Write + Send>>,
    dedup: Option<Deduplicator>,
    held: Option<Vec<TransactionRecord>>,
    line: String,
    written: u64,
}

impl RecordWriter {
    fn push(&mut self, rec: TransactionRecord) -> io::Result<()> {
        if let Some(d) = &mut self.dedup {
            if !d.admit(&rec) {
                return Ok(());
            }
        }
        match &mut self.held {
            Some(held) => held.push(rec),
            None => self.write(&rec)?,
        }
        Ok(())
    }

    fn write(&mut self, rec: &TransactionRecord) -> io::Result<()> {
        self.written += 1;
        if let Some(out) = &mut self.out {
            self.line.clear();
            rec.write_line(&mut self.line);
            out.write_all(self.line.as_bytes())?;
        }
        Ok(())
    }

    fn finish(&mut self) -> io::Result<()> {
        if let Some(mut held) = self.held.take() {
            held.sort_by_key(|r| (r.first_ts(), r.match_number));
            for r in &held {
                self.write(r)?;
            }
        }
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

struct SourceRun {
    label: String,
    output: StreamOutput,
    error: Option<io::Error>,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = config(cli)?;
    let readers: Vec<(String, Reader)> = cli
        .inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), open(p)?)))
        .collect::<Result<_, Failure>>()?;
    let mut writer = RecordWriter {
        out: cli.records.as_deref().map(create).transpose()?,
        dedup: cli.dedup.then(Deduplicator::default),
        held: cli.sort_records.then(Vec::new),
        line: String::with_capacity(256),
        written: 0,
    };

    let (tx, rx) = sync_channel::<Vec<TransactionRecord>>(64);
    let (runs, write_result) = thread::scope(|s| {
        let handles: Vec<_> = if cli.chunked {
            let label = format!("{} chunked files", readers.len());
            let frames = readers.into_iter().flat_map(|(_, r)| r);
            let tx = tx.clone();
            let cfg = &cfg;
            vec![s.spawn(move || source(label, frames, cfg, &tx))]
        } else {
            readers
                .into_iter()
                .map(|(label, r)| {
                    let tx = tx.clone();
                    let cfg = &cfg;
                    s.spawn(move || source(label, r, cfg, &tx))
                })
                .collect()
        };
        drop(tx);
        let mut write_result = Ok(());
        for batch in rx {
            for rec in batch {
                if write_result.is_ok() {
                    write_result = writer.push(rec);
                }
            }
        }
        if write_result.is_ok() {
            write_result = writer.finish();
        }
        let runs: Vec<SourceRun> = handles.into_iter().map(|h| h.join().expect("source thread panicked")).collect();
        (runs, write_result)
    });

    for r in &runs {
        print_source(r);
    }
    let stats = merge_stats(runs.iter().flat_map(|r| r.output.consumers.iter().map(|c| &c.stats)))
        .expect("consumers share one binning");
    print_totals(&runs, &writer);

    write_result.context("writing records").map_err(Failure::Io)?;
    if let Some(path) = &cli.report {
        write_report(path, &stats, cli.report_format)?;
    }
    if let Some(r) = runs.iter().find(|r| r.error.is_some()) {
        let e = r.error.as_ref().expect("checked");
        return Err(Failure::Io(anyhow!("reading {}: {e}", r.label)));
    }
    Ok(())
}

fn source<I>(
    label: String,
    frames: I,
    cfg: &StreamConfig,
    tx: &std::sync::mpsc::SyncSender<Vec<TransactionRecord>>,
) -> SourceRun
where
    I: Iterator<Item = io::Result<(hta_core::CaptureTimestamp, Vec<u8>)>> + Send,
{
    let (output, error) = run_stream(frames, cfg, tx).expect("configuration validated up front");
    SourceRun { label, output, error }
}

fn write_report(path: &Path, stats: &StatsAccumulator, format: Format) -> Result<(), Failure> {
    let format = match format {
        Format::Csv => ReportFormat::Csv,
        Format::Text => ReportFormat::Text,
    };
    let mut out = create(path)?;
    out.write_all(&render_report(stats, format))
        .and_then(|()| out.flush())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Io)
}

fn print_source(r: &SourceRun) {
    let o = &r.output;
    let secs = o.elapsed.as_secs_f64().max(1e-9);
    println!(
        "source {}: {} frames, {} bytes, {} HTTP messages ({} requests, {} responses), {} skipped, {:.3} s",
        r.label,
        o.frames.frames,
        o.frames.bytes,
        o.frames.classified(),
        o.frames.requests,
        o.frames.responses,
        o.frames.skipped,
        secs
    );
    println!(
        "  throughput: {:.0} packets/s, {:.0} bits/s, {:.0} HTTP messages/s",
        o.frames.frames as f64 / secs,
        o.frames.bytes as f64 * 8.0 / secs,
        o.frames.classified() as f64 / secs
    );
    let pkt = o.feeder.packet_shares();
    let txn = o.feeder.transaction_shares();
    for (i, c) in o.feeder.per_consumer.iter().enumerate() {
        println!(
            "  consumer {i}: packets {:.2}% ({}), transactions {:.2}% ({}), queue drops {}",
            pkt[i] * 100.0,
            c.packets_dispatched,
            txn[i] * 100.0,
            c.transactions_completed,
            c.drops
        );
    }
}

fn print_totals(runs: &[SourceRun], writer: &RecordWriter) {
    let mut m = hta_core::MatchCounters::default();
    let mut unhashable = 0;
    for r in runs {
        m.merge(&r.output.counters());
        unhashable += r.output.feeder.unhashable;
    }
    println!(
        "matched {}, unmatched {}, dropped {} (pool {}, no ACK {}), unhashable {}",
        m.matched,
        m.unmatched,
        m.dropped(),
        m.dropped_pool,
        m.dropped_missing_ack,
        unhashable
    );
    let removed = writer.dedup.as_ref().map_or(0, Deduplicator::dropped);
    println!("records {}, duplicates removed {}", writer.written, removed);
}
