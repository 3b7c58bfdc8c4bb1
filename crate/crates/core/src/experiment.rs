//! Experiment runner: datasets from config, one federated run per seed,
//! and the result files.
//!
//! For an output path `dir/name.csv` a run writes:
//!
//! - `dir/name.csv`: one row per evaluated round and seed (deterministic)
//! - `dir/name.timing.csv`: wall-clock seconds per round
//! - `dir/name.manifest.json`: config hash, seeds, code version, config
//! - `dir/name.seed<N>.ckpt`: final global model per seed
//! - `dir/name.seed<N>.bins.csv`: final reliability bins (with `write_bins`)

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{generate_synthetic, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::fedsim::{partition, run_federated};
use crate::gauss_agg::{aggregate, AggregationMethod, AggregationWeights, GaussianParams};
use crate::metrics::{MetricsReport, ReliabilityBins};
use crate::rng::{mix_seed, stream_seed, Stream};
use crate::vbnn::{encode_checkpoint, VbnnModel};

pub const RESULTS_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "round",
    "acc",
    "ece",
    "nll",
    "spread_norm",
    "aggregation",
    "beta_mode",
    "partition",
];

pub const TIMING_HEADER: [&str; 4] = ["run_id", "seed", "round", "tpc_seconds"];

pub const BINS_HEADER: [&str; 5] = ["bin_low", "bin_high", "count", "accuracy", "confidence"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn load_datasets(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::Synthetic {
            classes,
            dims,
            samples_per_class,
            test_samples_per_class,
            spread,
            data_seed,
        } => Ok((
            generate_synthetic(*classes, *dims, *samples_per_class, *spread, *data_seed)?,
            generate_synthetic(
                *classes,
                *dims,
                *test_samples_per_class,
                *spread,
                mix_seed(&[*data_seed, 1]),
            )?,
        )),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
    }
}

/// One evaluated round of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub run_id: String,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub spread_norm: Option<f64>,
    pub tpc_seconds: f64,
    pub aggregation: String,
    pub beta_mode: String,
    pub partition: String,
}

impl ResultsRow {
    fn results_record(&self) -> [String; 10] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.round.to_string(),
            format_float(self.accuracy),
            format_float(self.ece),
            format_float(self.nll),
            self.spread_norm.map(format_float).unwrap_or_default(),
            self.aggregation.clone(),
            self.beta_mode.clone(),
            self.partition.clone(),
        ]
    }

    fn timing_record(&self) -> [String; 4] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.round.to_string(),
            format_float(self.tpc_seconds),
        ]
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
        Error::usage(format!(
            "{}: bad field {} in row {:?}",
            path.display(),
            RESULTS_HEADER[i],
            rec
        ))
    })
}

/// Reads a results CSV back. Timing is not part of the file and reads as 0.
pub fn read_results(path: &Path) -> Result<Vec<ResultsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let spread = rec.get(6).unwrap_or("");
        rows.push(ResultsRow {
            run_id: rec.get(0).unwrap_or_default().to_string(),
            seed: parse_field(&rec, 1, path)?,
            round: parse_field(&rec, 2, path)?,
            accuracy: parse_field(&rec, 3, path)?,
            ece: parse_field(&rec, 4, path)?,
            nll: parse_field(&rec, 5, path)?,
            spread_norm: if spread.is_empty() {
                None
            } else {
                Some(parse_field(&rec, 6, path)?)
            },
            tpc_seconds: 0.0,
            aggregation: rec.get(7).unwrap_or_default().to_string(),
            beta_mode: rec.get(8).unwrap_or_default().to_string(),
            partition: rec.get(9).unwrap_or_default().to_string(),
        });
    }
    Ok(rows)
}

/// Locations of every file an experiment writes.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub results: PathBuf,
    pub timing: PathBuf,
    pub manifest: PathBuf,
    dir: PathBuf,
    stem: String,
}

impl OutputPaths {
    pub fn new(output: &Path) -> Self {
        let dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "results".into());
        Self {
            results: output.to_path_buf(),
            timing: dir.join(format!("{stem}.timing.csv")),
            manifest: dir.join(format!("{stem}.manifest.json")),
            dir,
            stem,
        }
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("{}.seed{seed}.ckpt", self.stem))
    }

    pub fn bins(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("{}.seed{seed}.bins.csv", self.stem))
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seeds: &'a [u64],
    code_version: &'a str,
    config: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub rows: Vec<ResultsRow>,
    pub final_model: VbnnModel,
    pub final_bins: ReliabilityBins,
}

impl RunOutcome {
    pub fn final_row(&self) -> &ResultsRow {
        self.rows.last().expect("final round is always evaluated")
    }
}

/// Mean and standard error (sample std / √n) of a final-round metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(runs: &[RunOutcome]) -> Vec<MetricSummary> {
    let finals: Vec<&ResultsRow> = runs.iter().map(|r| r.final_row()).collect();
    let mut columns: Vec<(&'static str, Vec<f64>)> = vec![
        ("acc", finals.iter().map(|r| r.accuracy).collect()),
        ("ece", finals.iter().map(|r| r.ece).collect()),
        ("nll", finals.iter().map(|r| r.nll).collect()),
    ];
    let spreads: Vec<f64> = finals.iter().filter_map(|r| r.spread_norm).collect();
    if spreads.len() == finals.len() {
        columns.push(("spread_norm", spreads));
    }
    columns.push((
        "tpc_seconds",
        finals.iter().map(|r| r.tpc_seconds).collect(),
    ));
    columns
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(metric, v)| {
            let (mean, std_error) = mean_and_std_error(&v);
            MetricSummary {
                metric,
                mean,
                std_error,
                n: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<MetricSummary>,
    pub paths: OutputPaths,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_bins(path: &Path, bins: &ReliabilityBins) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BINS_HEADER)?;
    for b in &bins.bins {
        w.write_record([
            format_float(b.low),
            format_float(b.high),
            b.count.to_string(),
            format_float(b.accuracy),
            format_float(b.confidence),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the configured experiment once per seed and writes every output
/// file. Rows are flushed as each round is scored.
pub fn run_experiment(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::usage("need at least one seed"));
    }
    let (train, test) = load_datasets(&cfg.dataset)?;
    let paths = OutputPaths::new(&cfg.output);
    create_parent(&paths.results)?;
    let config_hash = cfg.hash();

    let manifest = Manifest {
        config_hash: &config_hash,
        seeds,
        code_version: env!("CARGO_PKG_VERSION"),
        config: cfg.to_toml(),
    };
    let mut mf = File::create(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    writeln!(mf).map_err(|e| Error::io(&paths.manifest, e))?;

    let mut results = csv::Writer::from_path(&paths.results)?;
    results.write_record(RESULTS_HEADER)?;
    let mut timing = csv::Writer::from_path(&paths.timing)?;
    timing.write_record(TIMING_HEADER)?;

    let opts = cfg.simulation_options();
    let spec = cfg.partition_spec();
    let aggregation = cfg.aggregation_method().tag().to_string();
    let beta_mode = cfg.training.beta_mode.tag().to_string();
    let partition_kind = cfg.partition.kind.tag().to_string();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_id = format!("{}-s{seed}", &config_hash[..12]);
        let round_cfg = cfg.round_config(seed);
        let mut rows = Vec::new();
        let outcome = (|| {
            let run = run_federated(
                &round_cfg,
                &spec,
                &opts,
                &train,
                &test,
                |r: &MetricsReport| {
                    let row = ResultsRow {
                        run_id: run_id.clone(),
                        seed,
                        round: r.round,
                        accuracy: r.accuracy,
                        ece: r.ece,
                        nll: r.nll,
                        spread_norm: r.spread_norm,
                        tpc_seconds: r.tpc_seconds,
                        aggregation: aggregation.clone(),
                        beta_mode: beta_mode.clone(),
                        partition: partition_kind.clone(),
                    };
                    results.write_record(row.results_record())?;
                    results.flush().map_err(|e| Error::io(&paths.results, e))?;
                    timing.write_record(row.timing_record())?;
                    timing.flush().map_err(|e| Error::io(&paths.timing, e))?;
                    rows.push(row);
                    Ok(())
                },
            )?;
            let ckpt = paths.checkpoint(seed);
            fs::write(&ckpt, encode_checkpoint(&run.final_model))
                .map_err(|e| Error::io(&ckpt, e))?;
            if cfg.write_bins {
                write_bins(&paths.bins(seed), &run.final_bins)?;
            }
            Ok(run)
        })()
        .map_err(|e| Error::Run {
            seed,
            source: Box::new(e),
        })?;
        runs.push(RunOutcome {
            seed,
            rows,
            final_model: outcome.final_model,
            final_bins: outcome.final_bins,
        });
    }
    let summary = summarize(&runs);
    Ok(ExperimentReport {
        config_hash,
        runs,
        summary,
        paths,
    })
}

/// Per-client label histograms of the training partition for `seed`.
pub fn partition_stats(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let (train, _) = load_datasets(&cfg.dataset)?;
    let parts = partition(
        &train.labels,
        &cfg.partition_spec(),
        stream_seed(seed, Stream::Partition, &[]),
    )?;
    Ok(parts.iter().map(|p| train.label_histogram(p)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggDemoRow {
    pub method: AggregationMethod,
    pub mean: f64,
    /// `None` for the point average, which carries no variance.
    pub variance: Option<f64>,
}

/// Aggregates scalar Gaussians `(mean, variance)` with every rule.
pub fn agg_demo(
    clients: &[(f64, f64)],
    betas: &[f64],
    population: usize,
    seed: u64,
) -> Result<Vec<AggDemoRow>> {
    let weights = AggregationWeights::new(betas.to_vec())?;
    let params = clients
        .iter()
        .map(|&(m, v)| GaussianParams::from_variances(vec![1], vec![m], &[v]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&GaussianParams> = params.iter().collect();
    let methods = [
        AggregationMethod::Eaa,
        AggregationMethod::Gaa,
        AggregationMethod::Aalv,
        AggregationMethod::Ppa { population },
        AggregationMethod::Cf,
        AggregationMethod::Point,
    ];
    methods
        .into_iter()
        .map(|method| {
            let out = aggregate(method, &refs, &weights, seed)?;
            Ok(AggDemoRow {
                method,
                mean: out.mu()[0],
                variance: (!method.is_point()).then(|| out.variance(0)),
            })
        })
        .collect()
}
