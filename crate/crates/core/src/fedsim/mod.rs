//! Federated optimization: partitioning, client sampling, local training,
//! server aggregation and the round loop.
//!
//! Clients are stateless between rounds. Each active client starts from a
//! copy of the global model, trains on its own partition with a random
//! stream derived from `(seed, round, client id)`, and hands back its local
//! parameters. The server collects them in ascending id order before
//! aggregating, so the result does not depend on the worker-pool size.

mod partition;
mod round;

pub use partition::{
    partition, partition_dirichlet, partition_iid, PartitionKind, PartitionSpec,
    DEFAULT_CONCENTRATION,
};
pub use round::{
    client_update, compute_betas, evaluate, run_federated, run_round, sample_active_clients,
    BetaMode, ClientState, Evaluation, FederatedRun, RoundConfig, ServerState, SimulationOptions,
    WorkerPool,
};
