use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Default Dirichlet concentration for non-IID splits.
pub const DEFAULT_CONCENTRATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

impl PartitionKind {
    pub fn tag(&self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub concentration: f64,
    pub num_clients: usize,
}

fn check_sizes(n: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::usage("need at least one client"));
    }
    if clients > n {
        return Err(Error::usage(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    Ok(())
}

fn indices_by_label(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_label = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_label[y].push(i);
    }
    by_label
}

/// Label-balanced split: each label's shuffled indices are dealt round-robin,
/// continuing the deal across labels so client sizes also stay within one.
pub fn partition_iid(labels: &[usize], clients: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    check_sizes(labels.len(), clients)?;
    let mut rng = rng_from_seed(rng_seed);
    let mut parts = vec![Vec::new(); clients];
    let mut cursor = 0;
    for mut idx in indices_by_label(labels) {
        idx.shuffle(&mut rng);
        for i in idx {
            parts[cursor].push(i);
            cursor = (cursor + 1) % clients;
        }
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

/// Dirichlet label skew: for every label, client shares are drawn from
/// `Dir(concentration · 1_C)` and that label's shuffled indices are cut at
/// the rounded cumulative shares. Empty clients then take one sample from
/// the currently largest client.
pub fn partition_dirichlet(
    labels: &[usize],
    clients: usize,
    concentration: f64,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    check_sizes(labels.len(), clients)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::usage(format!(
            "dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::usage(format!("invalid concentration: {e}")))?;
    let mut rng = rng_from_seed(rng_seed);
    let mut parts = vec![Vec::new(); clients];
    for mut idx in indices_by_label(labels) {
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..clients).map(|_| rng.sample(gamma)).collect();
        let total: f64 = draws.iter().sum();
        let shares: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            // Every gamma draw underflowed: give the label to one client.
            let mut s = vec![0.0; clients];
            s[rng.random_range(0..clients)] = 1.0;
            s
        };
        let n = idx.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (k, share) in shares.iter().enumerate() {
            cumulative += share;
            let end = if k + 1 == clients {
                n
            } else {
                ((cumulative * n as f64).round() as usize).clamp(start, n)
            };
            parts[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        let largest = (0..clients)
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("clients > 0");
        let moved = parts[largest].pop().expect("largest client is non-empty");
        parts[empty].push(moved);
    }
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

pub fn partition(labels: &[usize], spec: &PartitionSpec, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    match spec.kind {
        PartitionKind::Iid => partition_iid(labels, spec.num_clients, rng_seed),
        PartitionKind::Dirichlet => {
            partition_dirichlet(labels, spec.num_clients, spec.concentration, rng_seed)
        }
    }
}
