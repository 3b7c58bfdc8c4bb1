//! Parametric aggregation of factorized Gaussian parameters.
//!
//! Every rule works element-wise: each scalar weight is an independent
//! univariate Gaussian stored as a mean and a log-variance (`alpha = ln σ²`).
//! The mean update is shared by EAA, GAA and AALV; the rules differ in how
//! the variances are combined. `POINT` averages means only and is what the
//! deterministic baselines use.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Floor applied to linear-space variances before taking the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Tolerance on `Σβ = 1`.
pub const BETA_SUM_TOLERANCE: f64 = 1e-9;

/// Means and log-variances of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    shape: Vec<usize>,
    mu: Vec<f64>,
    alpha: Vec<f64>,
}

impl GaussianParams {
    pub fn new(shape: Vec<usize>, mu: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if mu.len() != len || alpha.len() != len {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} values but got {} means and {} log-variances",
                mu.len(),
                alpha.len()
            )));
        }
        if let Some(bad) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(Error::usage(format!(
                "log-variance at index {bad} is not finite ({})",
                alpha[bad]
            )));
        }
        Ok(Self { shape, mu, alpha })
    }

    /// Builds parameters from linear-space variances.
    pub fn from_variances(shape: Vec<usize>, mu: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if let Some(bad) = variances.iter().position(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::usage(format!(
                "variance at index {bad} must be positive, got {}",
                variances[bad]
            )));
        }
        let alpha = variances.iter().map(|v| v.ln()).collect();
        Self::new(shape, mu, alpha)
    }

    /// Point parameters: the given means with the all-zero log-variance sentinel.
    pub fn point(shape: Vec<usize>, mu: Vec<f64>) -> Result<Self> {
        let alpha = vec![0.0; mu.len()];
        Self::new(shape, mu, alpha)
    }

    pub fn filled(shape: Vec<usize>, mu: f64, alpha: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            mu: vec![mu; len],
            alpha: vec![alpha; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.alpha.iter().map(|a| a.exp())
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.alpha[i].exp()
    }
}

/// Convex aggregation weights over the clients being combined.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    betas: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::usage("aggregation weights must not be empty"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b <= 1.0))
        {
            return Err(Error::usage(format!("beta[{i}] = {b} is outside (0, 1]")));
        }
        let sum: f64 = betas.iter().sum();
        if (sum - 1.0).abs() > BETA_SUM_TOLERANCE {
            return Err(Error::usage(format!("betas sum to {sum}, expected 1")));
        }
        Ok(Self { betas })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("uniform weights need at least one client"));
        }
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Weights proportional to `sizes`, normalized over the given set.
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::usage(
                "proportional weights need non-empty client datasets",
            ));
        }
        Self::new(sizes.iter().map(|&s| s as f64 / total as f64).collect())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.betas.iter().copied().fold(f64::MIN, f64::max)
    }
}

/// The server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMethod {
    /// Empirical arithmetic: weighted average of means and of variances.
    Eaa,
    /// Gaussian arithmetic (sum rule): variances weighted by β².
    Gaa,
    /// Arithmetic average of log-variances.
    Aalv,
    /// Population pooling: moments of a pooled sample of `population` draws.
    Ppa { population: usize },
    /// Weighted conflation of the client Gaussians.
    Cf,
    /// Weighted average of point weights (deterministic baselines).
    Point,
}

impl AggregationMethod {
    pub const GAUSSIAN_TAGS: [&'static str; 5] = ["eaa", "gaa", "aalv", "ppa", "cf"];

    pub fn tag(&self) -> &'static str {
        match self {
            AggregationMethod::Eaa => "eaa",
            AggregationMethod::Gaa => "gaa",
            AggregationMethod::Aalv => "aalv",
            AggregationMethod::Ppa { .. } => "ppa",
            AggregationMethod::Cf => "cf",
            AggregationMethod::Point => "point",
        }
    }

    /// Parses a lowercase tag; `ppa` takes its population from `population`.
    pub fn from_tag(tag: &str, population: Option<usize>) -> Result<Self> {
        Ok(match tag {
            "eaa" => AggregationMethod::Eaa,
            "gaa" => AggregationMethod::Gaa,
            "aalv" => AggregationMethod::Aalv,
            "cf" => AggregationMethod::Cf,
            "point" => AggregationMethod::Point,
            "ppa" => match population {
                Some(n) if n > 0 => AggregationMethod::Ppa { population: n },
                Some(_) => return Err(Error::usage("ppa population size must be positive")),
                None => return Err(Error::usage("ppa requires a population size")),
            },
            other => {
                return Err(Error::usage(format!(
                    "unknown aggregation method `{other}` (expected eaa|gaa|aalv|ppa|cf|point)"
                )))
            }
        })
    }

    pub fn is_point(&self) -> bool {
        matches!(self, AggregationMethod::Point)
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    /// Accepts plain tags and `ppa:<N>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("ppa", n)) => {
                let n = n
                    .parse()
                    .map_err(|_| Error::usage(format!("invalid ppa population `{n}`")))?;
                Self::from_tag("ppa", Some(n))
            }
            _ => Self::from_tag(s, None),
        }
    }
}

fn check_inputs(clients: &[&GaussianParams], w: &AggregationWeights) -> Result<()> {
    let first = clients
        .first()
        .ok_or_else(|| Error::usage("cannot aggregate an empty client list"))?;
    if clients.len() != w.len() {
        return Err(Error::shape(format!(
            "{} clients but {} aggregation weights",
            clients.len(),
            w.len()
        )));
    }
    for (k, c) in clients.iter().enumerate().skip(1) {
        if c.shape() != first.shape() {
            return Err(Error::shape(format!(
                "client {k} has shape {:?}, client 0 has {:?}",
                c.shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

fn floored_ln(variance: f64) -> f64 {
    variance.max(VARIANCE_FLOOR).ln()
}

fn weighted_means(clients: &[&GaussianParams], betas: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; clients[0].len()];
    for (c, &b) in clients.iter().zip(betas) {
        for (o, &m) in out.iter_mut().zip(c.mu()) {
            *o += b * m;
        }
    }
    out
}

/// Shared skeleton for the rules whose mean is `Σ β_k μ_k` and whose
/// variance is `Σ coeff(β_k) σ²_k`.
fn linear_variance_rule(
    clients: &[&GaussianParams],
    w: &AggregationWeights,
    coeff: impl Fn(f64) -> f64,
) -> Result<GaussianParams> {
    check_inputs(clients, w)?;
    let mu = weighted_means(clients, w.betas());
    let mut var = vec![0.0; mu.len()];
    for (c, &b) in clients.iter().zip(w.betas()) {
        let scale = coeff(b);
        for (v, a) in var.iter_mut().zip(c.alpha()) {
            *v += scale * a.exp();
        }
    }
    let alpha = var.into_iter().map(floored_ln).collect();
    GaussianParams::new(clients[0].shape().to_vec(), mu, alpha)
}

/// EAA: `μ = Σβμ`, `σ² = Σβσ²`.
pub fn aggregate_eaa(
    clients: &[&GaussianParams],
    w: &AggregationWeights,
) -> Result<GaussianParams> {
    linear_variance_rule(clients, w, |b| b)
}

/// GAA: `μ = Σβμ`, `σ² = Σβ²σ²`.
pub fn aggregate_gaa(
    clients: &[&GaussianParams],
    w: &AggregationWeights,
) -> Result<GaussianParams> {
    linear_variance_rule(clients, w, |b| b * b)
}

/// AALV: `μ = Σβμ`, `α = Σβα`.
pub fn aggregate_aalv(
    clients: &[&GaussianParams],
    w: &AggregationWeights,
) -> Result<GaussianParams> {
    check_inputs(clients, w)?;
    let mu = weighted_means(clients, w.betas());
    let mut alpha = vec![0.0; mu.len()];
    for (c, &b) in clients.iter().zip(w.betas()) {
        for (o, &a) in alpha.iter_mut().zip(c.alpha()) {
            *o += b * a;
        }
    }
    GaussianParams::new(clients[0].shape().to_vec(), mu, alpha)
}

/// Per-client draw counts for a pooled population of size `population`:
/// `round(population · β_k)`, at least one per client.
pub fn ppa_sample_counts(population: usize, w: &AggregationWeights) -> Vec<usize> {
    w.betas()
        .iter()
        .map(|b| ((population as f64 * b).round() as usize).max(1))
        .collect()
}

/// PPA: pool `round(n·β_k)` draws from every client per scalar and return the
/// sample mean and the biased (1/N) sample variance of the pool.
pub fn aggregate_ppa(
    clients: &[&GaussianParams],
    w: &AggregationWeights,
    population: usize,
    rng_seed: u64,
) -> Result<GaussianParams> {
    check_inputs(clients, w)?;
    if population < clients.len() {
        return Err(Error::usage(format!(
            "ppa population {population} is smaller than the {} clients",
            clients.len()
        )));
    }
    let counts = ppa_sample_counts(population, w);
    let pooled: usize = counts.iter().sum();
    let mut rng = rng_from_seed(rng_seed);
    let mut pool = Vec::with_capacity(pooled);
    let len = clients[0].len();
    let mut mu = Vec::with_capacity(len);
    let mut alpha = Vec::with_capacity(len);
    for j in 0..len {
        pool.clear();
        for (c, &count) in clients.iter().zip(&counts) {
            let m = c.mu()[j];
            let sd = (0.5 * c.alpha()[j]).exp();
            for _ in 0..count {
                let eps: f64 = rng.sample(StandardNormal);
                pool.push(m + sd * eps);
            }
        }
        let n = pool.len() as f64;
        let mean = pool.iter().sum::<f64>() / n;
        let var = pool.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        mu.push(mean);
        alpha.push(floored_ln(var));
    }
    GaussianParams::new(clients[0].shape().to_vec(), mu, alpha)
}

/// CF: precision-weighted mean `Σ(βμ/σ²)/Σ(β/σ²)` and variance
/// `β_max / Σ(β/σ²)`.
pub fn aggregate_cf(clients: &[&GaussianParams], w: &AggregationWeights) -> Result<GaussianParams> {
    check_inputs(clients, w)?;
    let len = clients[0].len();
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    for (c, &b) in clients.iter().zip(w.betas()) {
        for j in 0..len {
            let precision = (-c.alpha()[j]).exp();
            num[j] += b * c.mu()[j] * precision;
            den[j] += b * precision;
        }
    }
    let beta_max = w.max();
    let mu = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    let alpha = den.iter().map(|d| floored_ln(beta_max / d)).collect();
    GaussianParams::new(clients[0].shape().to_vec(), mu, alpha)
}

/// Element-wise `Σ β_k θ_k` over point-weight arrays.
pub fn aggregate_point(points: &[&[f64]], w: &AggregationWeights) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::usage("cannot aggregate an empty client list"))?;
    if points.len() != w.len() {
        return Err(Error::shape(format!(
            "{} clients but {} aggregation weights",
            points.len(),
            w.len()
        )));
    }
    if let Some(k) = points.iter().position(|p| p.len() != first.len()) {
        return Err(Error::shape(format!(
            "client {k} has {} values, client 0 has {}",
            points[k].len(),
            first.len()
        )));
    }
    let mut out = vec![0.0; first.len()];
    for (p, &b) in points.iter().zip(w.betas()) {
        for (o, &x) in out.iter_mut().zip(p.iter()) {
            *o += b * x;
        }
    }
    Ok(out)
}

/// Dispatches to the configured rule. `POINT` averages the means and
/// returns the all-zero log-variance sentinel.
pub fn aggregate(
    method: AggregationMethod,
    clients: &[&GaussianParams],
    w: &AggregationWeights,
    rng_seed: u64,
) -> Result<GaussianParams> {
    match method {
        AggregationMethod::Eaa => aggregate_eaa(clients, w),
        AggregationMethod::Gaa => aggregate_gaa(clients, w),
        AggregationMethod::Aalv => aggregate_aalv(clients, w),
        AggregationMethod::Ppa { population } => aggregate_ppa(clients, w, population, rng_seed),
        AggregationMethod::Cf => aggregate_cf(clients, w),
        AggregationMethod::Point => {
            check_inputs(clients, w)?;
            let points: Vec<&[f64]> = clients.iter().map(|c| c.mu()).collect();
            let mu = aggregate_point(&points, w)?;
            GaussianParams::point(clients[0].shape().to_vec(), mu)
        }
    }
}
