//! `hta-synth`: writes a synthetic HTTP capture and its ground truth.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use hta_core::synthgen::{generate, FlowPopularity, RtDistribution, UrlLength, WorkloadSpec};

#[derive(Debug, Parser)]
#[command(name = "hta-synth", version)]
struct Cli {
    /// Output capture (nanosecond PCAP).
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth CSV, one row per transaction.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    transactions: usize,
    #[arg(long, default_value_t = 100)]
    flows: usize,
    /// Zipf exponent for flow popularity (uniform when absent).
    #[arg(long)]
    zipf: Option<f64>,
    /// Constant response time in seconds.
    #[arg(long, conflicts_with_all = ["rt_exp", "rt_empirical"])]
    rt_const: Option<f64>,
    /// Exponential response times with this rate per second.
    #[arg(long, conflicts_with = "rt_empirical")]
    rt_exp: Option<f64>,
    /// Response times in seconds, drawn uniformly from this list.
    #[arg(long, value_delimiter = ',')]
    rt_empirical: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    retransmit: f64,
    #[arg(long, default_value_t = 0.0)]
    reorder: f64,
    #[arg(long = "continue", default_value_t = 0.0)]
    continue_prob: f64,
    #[arg(long, default_value_t = 8)]
    url_min: usize,
    #[arg(long, default_value_t = 80)]
    url_max: usize,
    /// Mean spacing between transaction arrivals, in microseconds.
    #[arg(long, default_value_t = 100)]
    gap_us: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn secs(v: f64) -> Result<Duration, String> {
    Duration::try_from_secs_f64(v).map_err(|e| format!("bad duration {v}: {e}"))
}

fn spec(cli: &Cli) -> Result<WorkloadSpec, String> {
    let rt = if let Some(v) = cli.rt_const {
        RtDistribution::Constant(secs(v)?)
    } else if let Some(list) = &cli.rt_empirical {
        RtDistribution::Empirical(list.iter().map(|&v| secs(v)).collect::<Result<_, _>>()?)
    } else {
        RtDistribution::Exponential(cli.rt_exp.unwrap_or(10.0))
    };
    let spec = WorkloadSpec {
        transactions: cli.transactions,
        flows: cli.flows,
        popularity: cli.zipf.map_or(FlowPopularity::Uniform, FlowPopularity::Zipf),
        rt,
        retransmit_prob: cli.retransmit,
        reorder_prob: cli.reorder,
        continue_prob: cli.continue_prob,
        url_length: UrlLength::Uniform { min: cli.url_min, max: cli.url_max },
        mean_gap: Duration::from_micros(cli.gap_us),
        seed: cli.seed,
        ..WorkloadSpec::default()
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn write_outputs(cli: &Cli, spec: &WorkloadSpec) -> anyhow::Result<()> {
    let (pcap, truth) = generate(spec)?;
    std::fs::write(&cli.output, pcap).with_context(|| format!("writing {}", cli.output.display()))?;
    if let Some(path) = &cli.truth {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        truth.write_csv(&mut out)?;
        out.flush()?;
    }
    println!("{} transactions, {} retransmitted", truth.transactions.len(), truth.retransmissions());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = match spec(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("hta-synth: {e}");
            return ExitCode::from(2);
        }
    };
    match write_outputs(&cli, &spec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hta-synth: {e:#}");
            ExitCode::from(1)
        }
    }
}
