//! Loss, exact gradients and the SGD-with-momentum update.

use super::{
    affine, check_batch, kl_to_prior, softmax_rows, Activation, ModelMode, VbnnModel, WeightSample,
};
use crate::error::{Error, Result};

/// Intermediates of one loss evaluation, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_version: u64,
    rows: usize,
    kl_scale: f64,
    sample: WeightSample,
    /// Input to each layer (post-activation of the previous one).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Gradients with respect to every `μ` and `α`, in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub mu: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &VbnnModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            mu: zeros.clone(),
            alpha: zeros,
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{rows} input rows but {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::usage(format!(
            "label {bad} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// One-sample estimate of the local objective:
/// `kl_scale · KL(q‖p) + mean_i −log softmax(f(x_i))[y_i]`.
///
/// Deterministic models have no KL term and `kl_scale` is ignored.
pub fn elbo_loss(
    model: &VbnnModel,
    sample: WeightSample,
    inputs: &[f64],
    labels: &[usize],
    kl_scale: f64,
) -> Result<(f64, ForwardCache)> {
    let rows = check_batch(model, &sample, inputs)?;
    let classes = model.output_dim();
    check_labels(labels, rows, classes)?;
    if rows == 0 {
        return Err(Error::usage("empty batch"));
    }

    let mut layer_inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut act = inputs.to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        let z = affine(
            &act,
            rows,
            &sample.values[2 * l],
            &sample.values[2 * l + 1],
            &layer.spec,
        );
        let next = match layer.spec.activation {
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::None => z.clone(),
        };
        layer_inputs.push(std::mem::replace(&mut act, next));
        pre_activations.push(z);
    }
    let nll = cross_entropy(&act, labels, classes);
    let mut probs = act;
    softmax_rows(&mut probs, classes);

    let kl = match model.mode {
        ModelMode::Variational if kl_scale != 0.0 => kl_scale * kl_to_prior(model)?,
        _ => 0.0,
    };
    let cache = ForwardCache {
        model_version: model.version,
        rows,
        kl_scale,
        sample,
        layer_inputs,
        pre_activations,
        probs,
        labels: labels.to_vec(),
    };
    Ok((kl + nll, cache))
}

/// Exact gradients of [`elbo_loss`] for the cached pass.
///
/// The likelihood gradient reaches `μ` directly and `α` through
/// `∂w/∂α = ½σε`; the KL term adds `μ` and `½(σ² − 1)` scaled by `kl_scale`.
pub fn backward(model: &VbnnModel, cache: &ForwardCache) -> Result<Gradients> {
    if cache.model_version != model.version {
        return Err(Error::usage(
            "forward cache is stale: the model changed after the loss was computed",
        ));
    }
    let classes = model.output_dim();
    let rows = cache.rows;
    let inv_rows = 1.0 / rows as f64;

    let mut delta = cache.probs.clone();
    for (r, &y) in cache.labels.iter().enumerate() {
        delta[r * classes + y] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv_rows);

    let n_layers = model.layers.len();
    let mut weight_grads: Vec<Vec<f64>> = vec![Vec::new(); 2 * n_layers];
    for l in (0..n_layers).rev() {
        let spec = model.layers[l].spec;
        let (n_in, n_out) = (spec.in_dim, spec.out_dim);
        let x = &cache.layer_inputs[l];
        let mut gw = vec![0.0; n_out * n_in];
        let mut gb = vec![0.0; n_out];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let d = delta[r * n_out + o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, xv) in row.iter_mut().zip(xr) {
                    *g += d * xv;
                }
            }
        }
        if l > 0 {
            let w = &cache.sample.values[2 * l];
            let prev_z = &cache.pre_activations[l - 1];
            let relu = model.layers[l - 1].spec.activation == Activation::Relu;
            let mut next = vec![0.0; rows * n_in];
            for r in 0..rows {
                let nrow = &mut next[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let d = delta[r * n_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    for (nv, wv) in nrow.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *nv += d * wv;
                    }
                }
                if relu {
                    for (nv, z) in nrow.iter_mut().zip(&prev_z[r * n_in..(r + 1) * n_in]) {
                        if *z <= 0.0 {
                            *nv = 0.0;
                        }
                    }
                }
            }
            delta = next;
        }
        weight_grads[2 * l] = gw;
        weight_grads[2 * l + 1] = gb;
    }

    let mut grads = Gradients {
        mu: Vec::with_capacity(weight_grads.len()),
        alpha: Vec::with_capacity(weight_grads.len()),
    };
    match (model.mode, cache.sample.noise()) {
        (ModelMode::Variational, Some(noise)) => {
            let kl = cache.kl_scale;
            for ((gw, t), eps) in weight_grads.into_iter().zip(model.tensors()).zip(noise) {
                let mut g_mu = gw.clone();
                let mut g_alpha = vec![0.0; gw.len()];
                for j in 0..gw.len() {
                    let a = t.alpha()[j];
                    let sd = (0.5 * a).exp();
                    g_alpha[j] = gw[j] * 0.5 * sd * eps[j];
                    if kl != 0.0 {
                        g_mu[j] += kl * t.mu()[j];
                        g_alpha[j] += kl * 0.5 * (sd * sd - 1.0);
                    }
                }
                grads.mu.push(g_mu);
                grads.alpha.push(g_alpha);
            }
        }
        (ModelMode::Variational, None) => {
            return Err(Error::usage(
                "variational backward pass needs a sampled weight snapshot",
            ))
        }
        (ModelMode::Deterministic, _) => {
            for gw in weight_grads {
                grads.alpha.push(vec![0.0; gw.len()]);
                grads.mu.push(gw);
            }
        }
    }
    Ok(grads)
}

/// SGD with momentum and weight decay on the means.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity_mu: Vec<Vec<f64>>,
    velocity_alpha: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &VbnnModel, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            momentum,
            weight_decay,
            velocity_mu: zeros.clone(),
            velocity_alpha: zeros,
        }
    }
}

/// `v ← m·v + g + wd·θ; θ ← θ − η·v`. Weight decay is applied to `μ` only;
/// `α` is left untouched for deterministic models.
pub fn sgd_step(model: &mut VbnnModel, opt: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    let layout_ok = grads.mu.len() == model.num_tensors()
        && grads.alpha.len() == model.num_tensors()
        && opt.velocity_mu.len() == model.num_tensors()
        && model.tensors().enumerate().all(|(i, t)| {
            grads.mu[i].len() == t.len()
                && grads.alpha[i].len() == t.len()
                && opt.velocity_mu[i].len() == t.len()
        });
    if !layout_ok {
        return Err(Error::shape(
            "gradients or optimizer state do not match the model layout",
        ));
    }
    let variational = model.is_variational();
    let (lr, momentum, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for (i, t) in model.tensors_mut().enumerate() {
        let v = &mut opt.velocity_mu[i];
        for ((theta, vel), g) in t.mu_mut().iter_mut().zip(v.iter_mut()).zip(&grads.mu[i]) {
            *vel = momentum * *vel + g + wd * *theta;
            *theta -= lr * *vel;
        }
        if variational {
            let v = &mut opt.velocity_alpha[i];
            for ((theta, vel), g) in t
                .alpha_mut()
                .iter_mut()
                .zip(v.iter_mut())
                .zip(&grads.alpha[i])
            {
                *vel = momentum * *vel + g;
                *theta -= lr * *vel;
            }
        }
    }
    Ok(())
}
