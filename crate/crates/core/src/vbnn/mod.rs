//! Variational Bayesian multilayer perceptron.
//!
//! Each scalar weight and bias is a Gaussian `N(μ, exp(α))` trained with the
//! reparameterization `w = μ + exp(α/2)·ε`. The same structure runs in
//! deterministic mode for the point-estimate baselines, in which case the
//! log-variances hold the all-zero sentinel and are never read.

mod checkpoint;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss_agg::GaussianParams;
use crate::rng::{rng_from_seed, SimRng};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    backward, cross_entropy, elbo_loss, sgd_step, ForwardCache, Gradients, OptimizerState,
};

/// Initial log-variance of every variational parameter (σ ≈ 0.082).
pub const INIT_LOG_VARIANCE: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// ReLU hidden layers followed by a linear logit layer.
pub fn mlp_spec(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(classes);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, d)| {
            let act = if i == last {
                Activation::None
            } else {
                Activation::Relu
            };
            LayerSpec::new(d[0], d[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Variational,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    pub weights: GaussianParams,
    pub biases: GaussianParams,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// An ordered stack of dense layers.
///
/// Parameter tensors are addressed in the fixed order
/// `[w0, b0, w1, b1, ...]`, which is also the order of gradients,
/// optimizer buffers and checkpoint payloads.
#[derive(Debug)]
pub struct VbnnModel {
    layers: Vec<DenseLayer>,
    mode: ModelMode,
    // Changes on every mutable access; forward caches record it.
    version: u64,
}

impl Clone for VbnnModel {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            mode: self.mode,
            version: next_version(),
        }
    }
}

impl PartialEq for VbnnModel {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.layers == other.layers
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::usage("a model needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::usage(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::usage(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    if specs.last().map(|s| s.activation) != Some(Activation::None) {
        return Err(Error::usage(
            "the final layer must emit raw logits (activation none)",
        ));
    }
    Ok(())
}

/// Builds a model with `μ ~ U[-1/√in, 1/√in]` and `α = -5` (variational) or
/// the zero sentinel (deterministic).
pub fn init_model(specs: &[LayerSpec], mode: ModelMode, rng_seed: u64) -> Result<VbnnModel> {
    validate_specs(specs)?;
    let mut rng = rng_from_seed(rng_seed);
    let alpha0 = match mode {
        ModelMode::Variational => INIT_LOG_VARIANCE,
        ModelMode::Deterministic => 0.0,
    };
    let layers = specs
        .iter()
        .map(|&spec| {
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            let mut draw = |shape: Vec<usize>| {
                let mut p = GaussianParams::filled(shape, 0.0, alpha0);
                for m in p.mu_mut() {
                    *m = rng.random_range(-bound..=bound);
                }
                p
            };
            let weights = draw(vec![spec.out_dim, spec.in_dim]);
            let biases = draw(vec![spec.out_dim]);
            DenseLayer {
                spec,
                weights,
                biases,
            }
        })
        .collect();
    Ok(VbnnModel {
        layers,
        mode,
        version: next_version(),
    })
}

impl VbnnModel {
    /// Assembles a model from explicit layers.
    pub fn from_layers(layers: Vec<DenseLayer>, mode: ModelMode) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.shape() != [l.spec.out_dim, l.spec.in_dim]
                || l.biases.shape() != [l.spec.out_dim]
            {
                return Err(Error::shape(format!(
                    "layer {i} tensors {:?}/{:?} do not match spec {}x{}",
                    l.weights.shape(),
                    l.biases.shape(),
                    l.spec.out_dim,
                    l.spec.in_dim
                )));
            }
        }
        Ok(Self {
            layers,
            mode,
            version: next_version(),
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn is_variational(&self) -> bool {
        self.mode == ModelMode::Variational
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &GaussianParams> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.biases])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut GaussianParams> {
        self.version = next_version();
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.biases])
    }

    pub fn tensor(&self, index: usize) -> &GaussianParams {
        let layer = &self.layers[index / 2];
        if index.is_multiple_of(2) {
            &layer.weights
        } else {
            &layer.biases
        }
    }

    /// Replaces every parameter tensor, keeping the layer structure.
    pub fn install_tensors(&mut self, tensors: Vec<GaussianParams>) -> Result<()> {
        if tensors.len() != self.num_tensors() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                self.num_tensors(),
                tensors.len()
            )));
        }
        for (i, (new, old)) in tensors.iter().zip(self.tensors()).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::shape(format!(
                    "tensor {i} has shape {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        for layer in &mut self.layers {
            layer.weights = it.next().expect("length checked");
            layer.biases = it.next().expect("length checked");
        }
        self.version = next_version();
        Ok(())
    }
}

/// Concrete weight values for one forward pass, plus the standard-normal
/// noise that produced them when sampled from a variational model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    values: Vec<Vec<f64>>,
    noise: Option<Vec<Vec<f64>>>,
}

impl WeightSample {
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn noise(&self) -> Option<&[Vec<f64>]> {
        self.noise.as_deref()
    }

    /// Builds `w = μ + σ·ε` from caller-supplied noise (one array per tensor).
    pub fn from_noise(model: &VbnnModel, noise: Vec<Vec<f64>>) -> Result<Self> {
        require_variational(model, "sampling weights")?;
        if noise.len() != model.num_tensors() {
            return Err(Error::shape(format!(
                "noise has {} tensors, model has {}",
                noise.len(),
                model.num_tensors()
            )));
        }
        let mut values = Vec::with_capacity(noise.len());
        for (i, (t, eps)) in model.tensors().zip(&noise).enumerate() {
            if eps.len() != t.len() {
                return Err(Error::shape(format!(
                    "noise tensor {i} has {} values, expected {}",
                    eps.len(),
                    t.len()
                )));
            }
            values.push(
                t.mu()
                    .iter()
                    .zip(t.alpha())
                    .zip(eps)
                    .map(|((m, a), e)| m + (0.5 * a).exp() * e)
                    .collect(),
            );
        }
        Ok(Self {
            values,
            noise: Some(noise),
        })
    }

    /// The mean weights, with no noise attached.
    pub fn point(model: &VbnnModel) -> Self {
        Self {
            values: model.tensors().map(|t| t.mu().to_vec()).collect(),
            noise: None,
        }
    }
}

fn require_variational(model: &VbnnModel, what: &str) -> Result<()> {
    if model.is_variational() {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} requires a variational model")))
    }
}

/// Draws one reparameterized weight sample using `rng`.
pub fn sample_weights_with(model: &VbnnModel, rng: &mut SimRng) -> Result<WeightSample> {
    require_variational(model, "sampling weights")?;
    let noise = model
        .tensors()
        .map(|t| (0..t.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    WeightSample::from_noise(model, noise)
}

pub fn sample_weights(model: &VbnnModel, rng_seed: u64) -> Result<WeightSample> {
    sample_weights_with(model, &mut rng_from_seed(rng_seed))
}

/// Weights used for a training or evaluation pass: a fresh sample for
/// variational models, the point weights otherwise.
pub(crate) fn pass_weights(model: &VbnnModel, rng: &mut SimRng) -> Result<WeightSample> {
    match model.mode {
        ModelMode::Variational => sample_weights_with(model, rng),
        ModelMode::Deterministic => Ok(WeightSample::point(model)),
    }
}

pub(crate) fn check_batch(
    model: &VbnnModel,
    sample: &WeightSample,
    inputs: &[f64],
) -> Result<usize> {
    let d = model.input_dim();
    if !inputs.len().is_multiple_of(d) {
        return Err(Error::shape(format!(
            "input buffer of {} values is not a multiple of the input dimension {d}",
            inputs.len()
        )));
    }
    if sample.values.len() != model.num_tensors()
        || sample
            .values
            .iter()
            .zip(model.tensors())
            .any(|(v, t)| v.len() != t.len())
    {
        return Err(Error::shape(
            "weight sample does not match the model layout",
        ));
    }
    Ok(inputs.len() / d)
}

/// Computes `out = x·Wᵀ + b` for a row-major batch.
pub(crate) fn affine(
    x: &[f64],
    rows: usize,
    weights: &[f64],
    bias: &[f64],
    spec: &LayerSpec,
) -> Vec<f64> {
    let (n_in, n_out) = (spec.in_dim, spec.out_dim);
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let orow = &mut out[r * n_out..(r + 1) * n_out];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &weights[o * n_in..(o + 1) * n_in];
            *slot = xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + bias[o];
        }
    }
    out
}

/// Logits for a batch of row-major inputs.
pub fn forward(model: &VbnnModel, sample: &WeightSample, inputs: &[f64]) -> Result<Vec<f64>> {
    let rows = check_batch(model, sample, inputs)?;
    let mut act = inputs.to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = affine(
            &act,
            rows,
            &sample.values[2 * l],
            &sample.values[2 * l + 1],
            &layer.spec,
        );
        if layer.spec.activation == Activation::Relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        act = z;
    }
    Ok(act)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(logits: &mut [f64], classes: usize) {
    for row in logits.chunks_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// `KL(q‖N(0,1))` summed over every scalar parameter.
pub fn kl_to_prior(model: &VbnnModel) -> Result<f64> {
    require_variational(model, "the KL term")?;
    Ok(model
        .tensors()
        .flat_map(|t| t.mu().iter().zip(t.alpha()))
        .map(|(m, a)| 0.5 * (m * m + a.exp() - a - 1.0))
        .sum())
}

/// Monte Carlo predictive distribution averaged over `samples` weight draws.
pub fn predict_proba(
    model: &VbnnModel,
    inputs: &[f64],
    samples: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::usage("predict_proba needs at least one sample"));
    }
    let classes = model.output_dim();
    if model.mode == ModelMode::Deterministic {
        let mut probs = forward(model, &WeightSample::point(model), inputs)?;
        softmax_rows(&mut probs, classes);
        return Ok(probs);
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut acc: Option<Vec<f64>> = None;
    for _ in 0..samples {
        let sample = sample_weights_with(model, &mut rng)?;
        let mut p = forward(model, &sample, inputs)?;
        softmax_rows(&mut p, classes);
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => a.iter_mut().zip(&p).for_each(|(x, y)| *x += y),
        }
    }
    let mut probs = acc.expect("samples >= 1");
    let inv = 1.0 / samples as f64;
    probs.iter_mut().for_each(|v| *v *= inv);
    Ok(probs)
}
