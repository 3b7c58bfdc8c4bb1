//! `fedvb` command-line runner.

use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedvb::config::{env_processes, load_config};
use fedvb::experiment::{agg_demo, partition_stats, run_experiment};
use fedvb::gauss_agg::AggregationMethod;

#[derive(Debug, Parser)]
#[command(
    name = "fedvb",
    version,
    about = "Federated variational Bayesian neural network simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment from a TOML config, once per seed.
    Run {
        config: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker-pool size; overrides FEDVB_PROCESSES and the config.
        #[arg(long)]
        processes: Option<usize>,
        /// Results CSV path; sidecar files are written next to it.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate scalar Gaussians with every rule and print (mean, variance).
    AggDemo {
        /// Client as `mean,variance`; repeat once per client.
        #[arg(
            long = "client",
            value_name = "MEAN,VAR",
            required = true,
            allow_hyphen_values = true
        )]
        clients: Vec<String>,
        /// Aggregation weights, comma-separated; uniform when omitted.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        /// Only print this rule (eaa, gaa, aalv, ppa, cf, point).
        #[arg(long)]
        method: Option<String>,
        /// Pooled sample count for ppa.
        #[arg(long, default_value_t = 100_000)]
        population: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print per-client label histograms of the training partition.
    PartitionStats {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_client(s: &str) -> Result<(f64, f64)> {
    let (m, v) = s
        .split_once(',')
        .with_context(|| format!("client `{s}`: expected MEAN,VAR"))?;
    let m: f64 = m
        .trim()
        .parse()
        .with_context(|| format!("client `{s}`: bad mean"))?;
    let v: f64 = v
        .trim()
        .parse()
        .with_context(|| format!("client `{s}`: bad variance"))?;
    Ok((m, v))
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    processes: Option<usize>,
    output: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(p) = processes
        .map(Ok)
        .or_else(|| env_processes().transpose())
        .transpose()?
    {
        cfg.processes = p;
    }
    if let Some(out) = output {
        cfg.output = out;
    }
    let seeds = match (seed, seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => list,
        (None, None) => cfg.seeds.clone(),
    };
    let report = run_experiment(&cfg, &seeds)?;
    let mut out = format!(
        "config {} | {} seed(s) | results {}\n",
        &report.config_hash[..12],
        report.runs.len(),
        report.paths.results.display()
    );
    for s in &report.summary {
        writeln!(
            out,
            "{:<12} {:.6} ± {:.6} (n={})",
            s.metric, s.mean, s.std_error, s.n
        )?;
    }
    emit(&out)
}

fn demo(
    clients: &[String],
    beta: Option<Vec<f64>>,
    method: Option<String>,
    population: usize,
    seed: u64,
) -> Result<()> {
    let clients = clients
        .iter()
        .map(|c| parse_client(c))
        .collect::<Result<Vec<_>>>()?;
    let betas = beta.unwrap_or_else(|| vec![1.0 / clients.len() as f64; clients.len()]);
    if betas.len() != clients.len() {
        bail!("{} clients but {} weights", clients.len(), betas.len());
    }
    let only = method
        .as_deref()
        .map(|m| AggregationMethod::from_tag(m, Some(population)))
        .transpose()?;
    let rows = agg_demo(&clients, &betas, population, seed)?;
    let mut out = format!("{:<6} {:>22} {:>22}\n", "rule", "mean", "variance");
    for row in rows {
        if only.is_some_and(|m| m.tag() != row.method.tag()) {
            continue;
        }
        let var = row
            .variance
            .map_or_else(|| "-".to_string(), |v| format!("{v:.15}"));
        writeln!(
            out,
            "{:<6} {:>22.15} {:>22}",
            row.method.tag(),
            row.mean,
            var
        )?;
    }
    emit(&out)
}

fn stats(config: PathBuf, seed: u64) -> Result<()> {
    let cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
    let hists = partition_stats(&cfg, seed)?;
    let classes = hists.first().map_or(0, Vec::len);
    let mut out = format!("{:>6} {:>7}", "client", "total");
    for c in 0..classes {
        write!(out, " {:>5}", format!("y{c}"))?;
    }
    out.push('\n');
    for (id, h) in hists.iter().enumerate() {
        write!(out, "{id:>6} {:>7}", h.iter().sum::<usize>())?;
        for n in h {
            write!(out, " {n:>5}")?;
        }
        out.push('\n');
    }
    emit(&out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            seeds,
            processes,
            output,
        } => run(config, seed, seeds, processes, output),
        Command::AggDemo {
            clients,
            beta,
            method,
            population,
            seed,
        } => demo(&clients, beta, method, population, seed),
        Command::PartitionStats { config, seed } => stats(config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
