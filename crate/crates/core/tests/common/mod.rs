#![allow(dead_code)]

use fedvb::data::Dataset;
use fedvb::rng::rng_from_seed;
use fedvb::vbnn::{backward, elbo_loss, init_model, mlp_spec, ModelMode, VbnnModel, WeightSample};
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
/// every `μ` and `α` of a freshly initialised MLP, with the weight noise held
/// fixed so the loss is a smooth function of the parameters.
pub fn gradient_check(
    input: usize,
    hidden: &[usize],
    classes: usize,
    mode: ModelMode,
    seed: u64,
    h: f64,
) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut model = init_model(&mlp_spec(input, hidden, classes), mode, seed).unwrap();
    if mode == ModelMode::Variational {
        for t in model.tensors_mut() {
            for a in t.alpha_mut() {
                *a = rng.random_range(-2.0..0.0);
            }
        }
    }
    let rows = 6;
    let x: Vec<f64> = (0..rows * input)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let noise: Vec<Vec<f64>> = model
        .tensors()
        .map(|t| (0..t.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let kl_scale = 0.05;

    let loss = |m: &VbnnModel| {
        let sample = match mode {
            ModelMode::Variational => WeightSample::from_noise(m, noise.clone()).unwrap(),
            ModelMode::Deterministic => WeightSample::point(m),
        };
        elbo_loss(m, sample, &x, &y, kl_scale).unwrap()
    };
    let (_, cache) = loss(&model);
    let grads = backward(&model, &cache).unwrap();

    let perturbed = |t: usize, i: usize, on_alpha: bool, delta: f64| {
        let mut m = model.clone();
        let tensor = m.tensors_mut().nth(t).unwrap();
        let slot = if on_alpha {
            &mut tensor.alpha_mut()[i]
        } else {
            &mut tensor.mu_mut()[i]
        };
        *slot += delta;
        loss(&m).0
    };
    let mut worst: f64 = 0.0;
    for t in 0..model.num_tensors() {
        for i in 0..model.tensor(t).len() {
            let mut targets = vec![(false, grads.mu[t][i])];
            if mode == ModelMode::Variational {
                targets.push((true, grads.alpha[t][i]));
            }
            for (on_alpha, analytic) in targets {
                let numeric =
                    (perturbed(t, i, on_alpha, h) - perturbed(t, i, on_alpha, -h)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    worst
}

/// Reference ECE: every bin scanned separately with explicit interval tests.
pub fn brute_force_ece(probs: &[f64], labels: &[usize], classes: usize, bins: usize) -> f64 {
    let n = labels.len() as f64;
    let rows: Vec<(f64, bool)> = probs
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            (row[best], best == y)
        })
        .collect();
    let mut total = 0.0;
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let members: Vec<&(f64, bool)> = rows
            .iter()
            .filter(|(c, _)| {
                if m == 0 {
                    *c >= 0.0 && *c <= hi
                } else {
                    *c > lo && *c <= hi
                }
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / k;
        let conf = members.iter().map(|(c, _)| c).sum::<f64>() / k;
        total += k / n * (acc - conf).abs();
    }
    total
}

/// Random probability rows (some with exact ties) and labels.
pub fn random_fixture(seed: u64, rows: usize, classes: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let mut probs = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw: Vec<f64> = if rng.random_bool(0.1) {
            vec![1.0; classes]
        } else {
            (0..classes).map(|_| rng.random::<f64>().powi(3)).collect()
        };
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / s));
    }
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (probs, labels)
}

pub fn nearest_mean_accuracy(d: &Dataset) -> f64 {
    let mut means = vec![vec![0.0; d.dim]; d.classes];
    let mut counts = vec![0.0; d.classes];
    for i in 0..d.len() {
        counts[d.labels[i]] += 1.0;
        for (m, x) in means[d.labels[i]].iter_mut().zip(d.row(i)) {
            *m += x;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let correct = (0..d.len())
        .filter(|&i| {
            let dist = |m: &Vec<f64>| {
                m.iter()
                    .zip(d.row(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            };
            let best = (0..d.classes)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == d.labels[i]
        })
        .count();
    correct as f64 / d.len() as f64
}
