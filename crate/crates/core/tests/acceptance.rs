//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use fedvb::config::{DatasetConfig, ExperimentConfig};
use fedvb::data::{generate_synthetic, Dataset};
use fedvb::experiment::run_experiment;
use fedvb::fedsim::{
    client_update, partition, run_federated, run_round, BetaMode, ClientState, PartitionKind,
    PartitionSpec, RoundConfig, ServerState, SimulationOptions, WorkerPool,
};
use fedvb::gauss_agg::{
    aggregate_aalv, aggregate_cf, aggregate_eaa, aggregate_gaa, aggregate_ppa, AggregationMethod,
    AggregationWeights, GaussianParams,
};
use fedvb::metrics::{accuracy, ece, nll, reliability_bins};
use fedvb::rng::rng_from_seed;
use fedvb::vbnn::{init_model, kl_to_prior, mlp_spec, ModelMode};
use rand::Rng;
use rand_distr::Exp1;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn scalar(mu: f64, var: f64) -> GaussianParams {
    GaussianParams::from_variances(vec![1], vec![mu], &[var]).unwrap()
}

fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Closed forms for {N(0,1), N(2,3)} at β = (½, ½); PPA against the
/// mixture moments (1, 3) with 3 standard errors.
fn closed_form_aggregation() -> Outcome {
    let start = Instant::now();
    let (a, b) = (scalar(0.0, 1.0), scalar(2.0, 3.0));
    let c = [&a, &b];
    let w = AggregationWeights::uniform(2)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for (tag, out, mu, var) in [
        ("eaa", aggregate_eaa(&c, &w)?, 1.0, 2.0),
        ("gaa", aggregate_gaa(&c, &w)?, 1.0, 1.0),
        ("aalv", aggregate_aalv(&c, &w)?, 1.0, 3f64.sqrt()),
        ("cf", aggregate_cf(&c, &w)?, 0.5, 0.75),
    ] {
        let hit = within(out.mu()[0], mu, 1e-9) && within(out.variance(0), var, 1e-9);
        ok &= hit;
        detail.push(format!("{tag}=({:.6},{:.6})", out.mu()[0], out.variance(0)));
    }
    let n = 1_000_000;
    let ppa = aggregate_ppa(&c, &w, n, 2024)?;
    // Mixture of N(0,1), N(2,3): mean 1, variance 3, fourth central moment 28.
    let se_mean = (3.0 / n as f64).sqrt();
    let se_var = ((28.0 - 9.0) / n as f64).sqrt();
    let ppa_ok =
        within(ppa.mu()[0], 1.0, 3.0 * se_mean) && within(ppa.variance(0), 3.0, 3.0 * se_var);
    ok &= ppa_ok;
    detail.push(format!("ppa=({:.5},{:.5})", ppa.mu()[0], ppa.variance(0)));
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    Ok((ok, format!("{} in {secs:.2}s", detail.join(" "))))
}

/// 1000 random instances: σ²_GAA < σ²_EAA and σ²_AALV ≤ σ²_EAA everywhere.
fn variance_ordering() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(7);
    let mut violations = 0;
    let dim = 8;
    for _ in 0..1000 {
        let k = rng.random_range(2..=20);
        let raw: Vec<f64> = (0..k)
            .map(|_| rng.sample::<f64, _>(Exp1).max(1e-300))
            .collect();
        let total: f64 = raw.iter().sum();
        let w = AggregationWeights::new(raw.iter().map(|r| r / total).collect())?;
        let clients = (0..k)
            .map(|_| {
                let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let var: Vec<f64> = (0..dim).map(|_| rng.random_range(1e-4..=10.0)).collect();
                GaussianParams::from_variances(vec![dim], mu, &var)
            })
            .collect::<fedvb::Result<Vec<_>>>()?;
        let refs: Vec<&GaussianParams> = clients.iter().collect();
        let (eaa, gaa, aalv) = (
            aggregate_eaa(&refs, &w)?,
            aggregate_gaa(&refs, &w)?,
            aggregate_aalv(&refs, &w)?,
        );
        for i in 0..dim {
            if !(gaa.variance(i) < eaa.variance(i) && aalv.variance(i) <= eaa.variance(i)) {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        violations == 0 && secs < 5.0,
        format!("{violations} violations over 1000 instances in {secs:.2}s"),
    ))
}

/// Analytic gradients against central differences, 4→5→3 variational MLP.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let err = common::gradient_check(4, &[5], 3, ModelMode::Variational, 0, 1e-4);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        err < 1e-3 && secs < 10.0,
        format!("max relative error {err:.3e} in {secs:.2}s"),
    ))
}

/// KL to N(0, 1) at three reference points, each tensor scalar set alike.
fn kl_closed_form() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (mu, alpha, per_scalar) in [
        (0.0, 0.0, 0.0),
        (1.0, 0.0, 0.5),
        (0.0, 1.0, 0.3591409142295225),
    ] {
        let mut model = init_model(&mlp_spec(2, &[], 2), ModelMode::Variational, 0)?;
        for t in model.tensors_mut() {
            t.mu_mut().fill(mu);
            t.alpha_mut().fill(alpha);
        }
        let scalars = model.num_parameters() as f64;
        let oracle = 0.5 * (mu * mu + f64::exp(alpha) - alpha - 1.0);
        let got = kl_to_prior(&model)? / scalars;
        ok &= within(got, per_scalar, 1e-9) && within(got, oracle, 1e-12);
        detail.push(format!("({mu},{alpha})->{got:.9}"));
    }
    Ok((ok, detail.join(" ")))
}

struct SpreadBench {
    train: Dataset,
    test: Dataset,
}

impl SpreadBench {
    fn new() -> fedvb::Result<Self> {
        Ok(Self {
            train: generate_synthetic(5, 20, 200, 1.0, 100)?,
            test: generate_synthetic(5, 20, 100, 1.0, 200)?,
        })
    }

    fn final_spread(
        &self,
        method: AggregationMethod,
        clients: usize,
        fraction: f64,
        rounds: usize,
        seed: u64,
    ) -> fedvb::Result<f64> {
        let cfg = RoundConfig {
            total_clients: clients,
            fraction,
            rounds,
            local_epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            aggregation: method,
            beta_mode: BetaMode::Proportional,
            seed,
        };
        let spec = PartitionSpec {
            kind: PartitionKind::Dirichlet,
            concentration: 0.5,
            num_clients: clients,
        };
        let opts = SimulationOptions {
            hidden: vec![32],
            eval_mc_samples: 10,
            eval_stride: rounds,
            ..SimulationOptions::default()
        };
        let run = run_federated(&cfg, &spec, &opts, &self.train, &self.test, |_| Ok(()))?;
        Ok(run
            .history
            .last()
            .and_then(|r| r.spread_norm)
            .expect("variational run"))
    }
}

const SPREAD_RULES: [(&str, AggregationMethod); 5] = [
    ("eaa", AggregationMethod::Eaa),
    ("gaa", AggregationMethod::Gaa),
    ("aalv", AggregationMethod::Aalv),
    ("ppa", AggregationMethod::Ppa { population: 1000 }),
    ("cf", AggregationMethod::Cf),
];

/// Per seed, spread norms of the five rules at 10 clients, T = 30.
fn ten_client_spreads(bench: &SpreadBench) -> fedvb::Result<Vec<[f64; 5]>> {
    (0..5u64)
        .map(|seed| {
            let mut out = [0.0; 5];
            for (slot, (_, m)) in out.iter_mut().zip(SPREAD_RULES) {
                *slot = bench.final_spread(m, 10, 1.0, 30, seed)?;
            }
            Ok(out)
        })
        .collect()
}

fn spread_ordering(spreads: &[[f64; 5]], secs: f64) -> Outcome {
    let mut hits = 0;
    let mut detail = Vec::new();
    for s in spreads {
        let [eaa, gaa, aalv, ppa, cf] = *s;
        if cf.max(aalv).max(gaa) < eaa.min(ppa) {
            hits += 1;
        }
        detail.push(format!(
            "eaa={eaa:.3} gaa={gaa:.2e} aalv={aalv:.3} (eaa-aalv={:.2e}) ppa={ppa:.3} cf={cf:.2e}",
            eaa - aalv
        ));
    }
    Ok((
        hits >= 4 && secs < 900.0,
        format!(
            "{hits}/5 seeds ordered in {secs:.1}s [{}]",
            detail.join("; ")
        ),
    ))
}

fn client_scaling(bench: &SpreadBench, ten: &[[f64; 5]]) -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut detail = Vec::new();
    for (seed, s) in ten.iter().enumerate() {
        let (eaa10, aalv10) = (s[0], s[2]);
        let eaa100 = bench.final_spread(AggregationMethod::Eaa, 100, 0.1, 60, seed as u64)?;
        let aalv100 = bench.final_spread(AggregationMethod::Aalv, 100, 0.1, 60, seed as u64)?;
        let ratio = aalv100.max(aalv10) / aalv100.min(aalv10);
        if eaa100 > eaa10 && ratio < 2.0 {
            hits += 1;
        }
        detail.push(format!("eaa {eaa10:.3}->{eaa100:.3} aalv x{ratio:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        hits >= 4 && secs < 2700.0,
        format!("{hits}/5 seeds in {secs:.1}s [{}]", detail.join("; ")),
    ))
}

/// One round of 10 clients at P = 1 and P = 10, each client update taking
/// at least a second.
fn parallel_speedup() -> Outcome {
    let train = generate_synthetic(10, 64, 100, 1.0, 5)?;
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        concentration: 1.0,
        num_clients: 10,
    };
    let clients: Vec<ClientState> = partition(&train.labels, &spec, 0)?
        .into_iter()
        .enumerate()
        .map(|(id, indices)| ClientState { id, indices })
        .collect();
    let mut cfg = RoundConfig {
        total_clients: 10,
        fraction: 1.0,
        rounds: 1,
        local_epochs: 1,
        batch_size: 16,
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-5,
        aggregation: AggregationMethod::Eaa,
        beta_mode: BetaMode::Uniform,
        seed: 3,
    };
    let global = init_model(&mlp_spec(64, &[256, 256], 10), ModelMode::Variational, 1)?;

    // Scale the epochs until one client update takes over a second.
    let per_client = loop {
        let probe = Instant::now();
        client_update(&global, &clients[0], &train, &cfg, 0)?;
        let secs = probe.elapsed().as_secs_f64();
        if secs >= 1.0 {
            break secs;
        }
        cfg.local_epochs = (cfg.local_epochs as f64 * 1.5 / secs).ceil() as usize;
    };

    let mut models = Vec::new();
    let mut tpc = Vec::new();
    for p in [1, 10] {
        let mut state = ServerState::new(global.clone());
        tpc.push(run_round(
            &mut state,
            &clients,
            &train,
            &cfg,
            &WorkerPool::new(p)?,
        )?);
        models.push(state.global);
    }
    let identical = models[0] == models[1];
    let ratio = tpc[1] / tpc[0];
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok((
        per_client >= 1.0 && ratio < 0.6 && identical,
        format!(
            "client update {per_client:.2}s, TPC P=1 {:.2}s, P=10 {:.2}s, ratio {ratio:.3}, bit-identical {identical}, {cpus} CPU(s) available",
            tpc[0], tpc[1]
        ),
    ))
}

/// Variational GAA (uniform β) and FedAvg on separable 3-class blobs, 10 IID clients, T = 20.
fn convergence_smoke() -> Outcome {
    let start = Instant::now();
    let train = generate_synthetic(3, 5, 100, 0.5, 31)?;
    let test = generate_synthetic(3, 5, 50, 0.5, 32)?;
    let spec = PartitionSpec {
        kind: PartitionKind::Iid,
        concentration: 1.0,
        num_clients: 10,
    };
    let opts = SimulationOptions {
        hidden: vec![32],
        eval_stride: 20,
        ..SimulationOptions::default()
    };
    let mut bayes_hits = 0;
    let mut avg_hits = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let cfg = |aggregation, beta_mode| RoundConfig {
            total_clients: 10,
            fraction: 1.0,
            rounds: 20,
            local_epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            aggregation,
            beta_mode,
            seed,
        };
        let bayes = run_federated(
            &cfg(AggregationMethod::Gaa, BetaMode::Uniform),
            &spec,
            &opts,
            &train,
            &test,
            |_| Ok(()),
        )?;
        let fedavg = run_federated(
            &cfg(AggregationMethod::Point, BetaMode::Proportional),
            &spec,
            &opts,
            &train,
            &test,
            |_| Ok(()),
        )?;
        let (f, a) = (
            bayes.history.last().unwrap(),
            fedavg.history.last().unwrap(),
        );
        if f.accuracy >= 0.9 && f.ece < 0.15 {
            bayes_hits += 1;
        }
        if a.accuracy >= 0.9 {
            avg_hits += 1;
        }
        detail.push(format!(
            "gaa acc={:.3} ece={:.3} fedavg acc={:.3}",
            f.accuracy, f.ece, a.accuracy
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        bayes_hits >= 4 && avg_hits >= 4 && secs < 600.0,
        format!(
            "gaa {bayes_hits}/5, fedavg {avg_hits}/5 in {secs:.1}s [{}]",
            detail.join("; ")
        ),
    ))
}

/// ECE against the brute-force binning oracle; NLL and tie-break fixtures.
fn metric_oracles() -> Outcome {
    let mut mismatches = 0;
    for f in 0..200u64 {
        let mut rng = rng_from_seed(f);
        let rows = rng.random_range(1..=100);
        let classes = rng.random_range(2..=10);
        let (probs, labels) = common::random_fixture(f, rows, classes);
        let oracle = common::brute_force_ece(&probs, &labels, classes, 15);
        if !within(ece(&probs, &labels, 15)?, oracle, 1e-12) {
            mismatches += 1;
        }
        let counts: usize = reliability_bins(&probs, &labels, 15)?
            .bins
            .iter()
            .map(|b| b.count)
            .sum();
        if counts != rows {
            mismatches += 1;
        }
    }
    let uniform = vec![0.1; 10 * 4];
    let nll_u = nll(&uniform, &[0, 3, 7, 9])?;
    let nll_ok = within(nll_u, 10f64.ln(), 1e-9);
    let ties = vec![0.25; 4 * 3];
    let tie_ok = accuracy(&ties, &[0, 0, 0])? == 1.0 && accuracy(&ties, &[1, 2, 3])? == 0.0;
    Ok((
        mismatches == 0 && nll_ok && tie_ok,
        format!("ece mismatches {mismatches}/200, uniform nll {nll_u:.12}, tie-break to lowest index {tie_ok}"),
    ))
}

/// Two full runs of one (config, seed) write byte-identical results.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synthetic {
            classes: 3,
            dims: 6,
            samples_per_class: 60,
            test_samples_per_class: 20,
            spread: 1.0,
            data_seed: 0,
        },
        ..ExperimentConfig::default()
    };
    cfg.partition.kind = PartitionKind::Dirichlet;
    cfg.partition.num_clients = 5;
    cfg.model.hidden = vec![16];
    cfg.training.aggregation = "ppa".into();
    cfg.training.population = Some(100);
    cfg.training.rounds = 4;
    cfg.training.local_epochs = 2;
    let mut bytes = Vec::new();
    for run in 0..2 {
        cfg.output = dir.path().join(format!("run{run}.csv"));
        let report = run_experiment(&cfg, &[0])?;
        bytes.push(fs::read(&report.paths.results)?);
    }
    let same = bytes[0] == bytes[1];
    Ok((
        same,
        format!("{} bytes each, identical {same}", bytes[0].len()),
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {id:>2} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    };
    report(1, "closed-form aggregation", closed_form_aggregation());
    report(2, "variance ordering", variance_ordering());
    report(3, "gradient check", gradient_check());
    report(4, "KL closed form", kl_closed_form());
    match SpreadBench::new() {
        Ok(bench) => {
            let start = Instant::now();
            match ten_client_spreads(&bench) {
                Ok(ten) => {
                    report(
                        5,
                        "spread ordering",
                        spread_ordering(&ten, start.elapsed().as_secs_f64()),
                    );
                    report(6, "client-scaling spread", client_scaling(&bench, &ten));
                }
                Err(e) => {
                    report(5, "spread ordering", Err(e.into()));
                    report(
                        6,
                        "client-scaling spread",
                        Err("ten-client runs failed".into()),
                    );
                }
            }
        }
        Err(e) => {
            report(5, "spread ordering", Err(e.to_string().into()));
            report(6, "client-scaling spread", Err(e.into()));
        }
    }
    report(7, "parallel speedup", parallel_speedup());
    report(8, "convergence smoke", convergence_smoke());
    report(9, "metric oracles", metric_oracles());
    report(10, "determinism", determinism());
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
