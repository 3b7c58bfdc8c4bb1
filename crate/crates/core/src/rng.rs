//! Seed derivation for reproducible random streams.
//!
//! Every stochastic step (initialization, partitioning, client sampling,
//! local training, PPA sampling, evaluation) draws from its own stream,
//! keyed by the master seed plus a domain tag and coordinates such as the
//! round and client id. Streams never depend on scheduling, so results are
//! identical for any worker-pool size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// Domain tags separating the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    ClientSampling = 3,
    ClientUpdate = 4,
    Aggregation = 5,
    Evaluation = 6,
    Synthetic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

/// Seed for `stream` at the given coordinates under `master`.
pub fn stream_seed(master: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut parts = Vec::with_capacity(coords.len() + 2);
    parts.push(master);
    parts.push(stream as u64);
    parts.extend_from_slice(coords);
    mix_seed(&parts)
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, coords: &[u64]) -> SimRng {
    rng_from_seed(stream_seed(master, stream, coords))
}
