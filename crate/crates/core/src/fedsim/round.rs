use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::partition::{partition, PartitionSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gauss_agg::{aggregate, AggregationMethod, AggregationWeights};
use crate::metrics::{self, MetricsReport, ReliabilityBins, RoundTimer};
use crate::rng::{rng_from_seed, stream_rng, stream_seed, Stream};
use crate::vbnn::{
    self, backward, elbo_loss, init_model, mlp_spec, sgd_step, ModelMode, OptimizerState, VbnnModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// `β_k = 1/K`.
    Uniform,
    /// `β_k ∝ |D_k|` over the active set.
    Proportional,
}

impl BetaMode {
    pub fn tag(&self) -> &'static str {
        match self {
            BetaMode::Uniform => "uniform",
            BetaMode::Proportional => "proportional",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub total_clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aggregation: AggregationMethod,
    pub beta_mode: BetaMode,
    pub seed: u64,
}

impl RoundConfig {
    /// `K = max(1, round(C·γ))`.
    pub fn active_count(&self) -> usize {
        active_count(self.total_clients, self.fraction)
    }

    pub fn model_mode(&self) -> ModelMode {
        if self.aggregation.is_point() {
            ModelMode::Deterministic
        } else {
            ModelMode::Variational
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::usage("total_clients must be positive"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::usage(format!(
                "fraction {} is outside (0, 1]",
                self.fraction
            )));
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::usage(
                "rounds, local_epochs and batch_size must be positive",
            ));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::usage(
                "need lr > 0, momentum in [0, 1) and weight_decay >= 0",
            ));
        }
        if let AggregationMethod::Ppa { population } = self.aggregation {
            if population < self.active_count() {
                return Err(Error::usage(format!(
                    "ppa population {population} is smaller than the {} active clients",
                    self.active_count()
                )));
            }
        }
        Ok(())
    }
}

fn active_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).clamp(1, total.max(1))
}

/// Uniformly samples `K` distinct client ids for round `round`, sorted ascending.
pub fn sample_active_clients(
    total: usize,
    fraction: f64,
    round: usize,
    master_seed: u64,
) -> Vec<usize> {
    let k = active_count(total, fraction);
    if k >= total {
        return (0..total).collect();
    }
    let mut rng = stream_rng(master_seed, Stream::ClientSampling, &[round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, total, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Aggregation weights over the active clients, given their dataset sizes.
pub fn compute_betas(active_sizes: &[usize], mode: BetaMode) -> Result<AggregationWeights> {
    match mode {
        BetaMode::Uniform => AggregationWeights::uniform(active_sizes.len()),
        BetaMode::Proportional => AggregationWeights::proportional(active_sizes),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
}

/// Trains a copy of `global` for `local_epochs` epochs of minibatch SGD on
/// the client's partition and returns the local parameters.
///
/// Each minibatch uses one weight sample and scales the KL term by
/// `1 / |D_k|`, so the losses summed over one epoch equal
/// `(KL + Σ_i −log p(y_i | x_i, w)) / batch_size`.
pub fn client_update(
    global: &VbnnModel,
    client: &ClientState,
    data: &Dataset,
    cfg: &RoundConfig,
    rng_seed: u64,
) -> Result<VbnnModel> {
    if client.indices.is_empty() {
        return Err(Error::usage(format!("client {} has no data", client.id)));
    }
    let mut model = global.clone();
    let mut opt = OptimizerState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = rng_from_seed(rng_seed);
    let kl_scale = 1.0 / client.indices.len() as f64;
    let mut order = client.indices.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk);
            let sample = vbnn::pass_weights(&model, &mut rng)?;
            let (_, cache) = elbo_loss(&model, sample, &x, &y, kl_scale)?;
            let grads = backward(&model, &cache)?;
            sgd_step(&mut model, &mut opt, &grads)?;
        }
    }
    Ok(model)
}

/// Runs client updates either inline (`P = 1`) or on a dedicated pool.
#[derive(Debug)]
pub struct WorkerPool {
    pool: Option<rayon::ThreadPool>,
    size: usize,
}

impl WorkerPool {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::usage("worker pool size must be at least 1"));
        }
        let pool = if size == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(size)
                    .thread_name(|i| format!("fedvb-worker-{i}"))
                    .build()
                    .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?,
            )
        };
        Ok(Self { pool, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Maps `f` over `items`, preserving input order in the output.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().with_max_len(1).map(f).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: VbnnModel,
    /// Number of completed rounds.
    pub round: usize,
    pub history: Vec<MetricsReport>,
}

impl ServerState {
    pub fn new(global: VbnnModel) -> Self {
        Self {
            global,
            round: 0,
            history: Vec::new(),
        }
    }
}

/// One communication round. Returns the wall-clock seconds from client
/// sampling through installation of the new global model.
pub fn run_round(
    state: &mut ServerState,
    clients: &[ClientState],
    data: &Dataset,
    cfg: &RoundConfig,
    pool: &WorkerPool,
) -> Result<f64> {
    if state.round >= cfg.rounds {
        return Err(Error::usage(format!(
            "all {} rounds have already run",
            cfg.rounds
        )));
    }
    if clients.len() != cfg.total_clients {
        return Err(Error::usage(format!(
            "config expects {} clients, got {}",
            cfg.total_clients,
            clients.len()
        )));
    }
    let timer = RoundTimer::start();
    let t = state.round;
    let active = sample_active_clients(cfg.total_clients, cfg.fraction, t, cfg.seed);
    let global = &state.global;
    let results = pool.map(&active, |&id| {
        let seed = stream_seed(cfg.seed, Stream::ClientUpdate, &[t as u64, id as u64]);
        client_update(global, &clients[id], data, cfg, seed)
    });
    let mut locals = Vec::with_capacity(results.len());
    for (&id, res) in active.iter().zip(results) {
        locals.push(res.map_err(|e| Error::Client {
            client: id,
            round: t,
            source: Box::new(e),
        })?);
    }
    let sizes: Vec<usize> = active.iter().map(|&id| clients[id].indices.len()).collect();
    let betas = compute_betas(&sizes, cfg.beta_mode)?;
    let mut tensors = Vec::with_capacity(state.global.num_tensors());
    for i in 0..state.global.num_tensors() {
        let parts: Vec<_> = locals.iter().map(|m| m.tensor(i)).collect();
        let seed = stream_seed(cfg.seed, Stream::Aggregation, &[t as u64, i as u64]);
        tensors.push(aggregate(cfg.aggregation, &parts, &betas, seed)?);
    }
    state.global.install_tensors(tensors)?;
    state.round += 1;
    Ok(timer.elapsed_seconds())
}

/// Scores of a model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub spread_norm: Option<f64>,
    pub bins: ReliabilityBins,
}

pub fn evaluate(
    model: &VbnnModel,
    data: &Dataset,
    mc_samples: usize,
    ece_bins: usize,
    rng_seed: u64,
) -> Result<Evaluation> {
    let probs = vbnn::predict_proba(model, &data.inputs, mc_samples, rng_seed)?;
    let bins = metrics::reliability_bins(&probs, &data.labels, ece_bins)?;
    Ok(Evaluation {
        accuracy: metrics::accuracy(&probs, &data.labels)?,
        ece: bins.ece(),
        nll: metrics::nll(&probs, &data.labels)?,
        spread_norm: if model.is_variational() {
            Some(metrics::spread_norm(model)?)
        } else {
            None
        },
        bins,
    })
}

/// Settings of a simulation that are not part of the round protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub hidden: Vec<usize>,
    pub eval_mc_samples: usize,
    /// Evaluate every `eval_stride` rounds; the final round is always evaluated.
    pub eval_stride: usize,
    pub ece_bins: usize,
    pub processes: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            hidden: vec![400, 120, 84],
            eval_mc_samples: 10,
            eval_stride: 1,
            ece_bins: metrics::DEFAULT_ECE_BINS,
            processes: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub history: Vec<MetricsReport>,
    pub final_model: VbnnModel,
    pub final_bins: ReliabilityBins,
    pub partitions: Vec<Vec<usize>>,
}

/// Partitions `train`, then runs `cfg.rounds` rounds, evaluating on `test`.
/// `on_report` sees each evaluated round as soon as it is scored.
pub fn run_federated(
    cfg: &RoundConfig,
    partition_spec: &PartitionSpec,
    opts: &SimulationOptions,
    train: &Dataset,
    test: &Dataset,
    mut on_report: impl FnMut(&MetricsReport) -> Result<()>,
) -> Result<FederatedRun> {
    cfg.validate()?;
    if partition_spec.num_clients != cfg.total_clients {
        return Err(Error::usage(format!(
            "partition has {} clients but the round config has {}",
            partition_spec.num_clients, cfg.total_clients
        )));
    }
    if opts.eval_stride == 0 {
        return Err(Error::usage("eval_stride must be positive"));
    }
    if train.dim != test.dim {
        return Err(Error::shape(format!(
            "train inputs have width {} but test inputs have {}",
            train.dim, test.dim
        )));
    }
    let classes = train.classes.max(test.classes);
    let parts = partition(
        &train.labels,
        partition_spec,
        stream_seed(cfg.seed, Stream::Partition, &[]),
    )?;
    let clients: Vec<ClientState> = parts
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientState {
            id,
            indices: idx.clone(),
        })
        .collect();
    let specs = mlp_spec(train.dim, &opts.hidden, classes);
    let model = init_model(
        &specs,
        cfg.model_mode(),
        stream_seed(cfg.seed, Stream::Init, &[]),
    )?;
    let pool = WorkerPool::new(opts.processes)?;
    let mut state = ServerState::new(model);
    let mut final_bins = None;
    while state.round < cfg.rounds {
        let tpc_seconds = run_round(&mut state, &clients, train, cfg, &pool)?;
        let t = state.round;
        if t.is_multiple_of(opts.eval_stride) || t == cfg.rounds {
            let eval = evaluate(
                &state.global,
                test,
                opts.eval_mc_samples,
                opts.ece_bins,
                stream_seed(cfg.seed, Stream::Evaluation, &[t as u64]),
            )?;
            let report = MetricsReport {
                round: t,
                accuracy: eval.accuracy,
                ece: eval.ece,
                nll: eval.nll,
                spread_norm: eval.spread_norm,
                tpc_seconds,
            };
            on_report(&report)?;
            state.history.push(report);
            if t == cfg.rounds {
                final_bins = Some(eval.bins);
            }
        }
    }
    Ok(FederatedRun {
        history: state.history,
        final_model: state.global,
        final_bins: final_bins.expect("final round is always evaluated"),
        partitions: parts,
    })
}
