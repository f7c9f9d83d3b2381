//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use fsdd::learner::{loss_and_grad, Batch, Dense, Embedder, EmbedderKind, Params};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn test_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Average cosine between `query` and each support vector of a class.
pub fn mean_of_cosines(query: &[f64], support: &[Vec<f64>]) -> f64 {
    support.iter().map(|s| cosine(query, s)).sum::<f64>() / support.len() as f64
}

/// First index of the maximum.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy pairing by rescanning all remaining pairs for the most similar one
/// after every merge.
pub fn greedy_pairs_bruteforce(protos: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut alive: Vec<bool> = vec![true; protos.len()];
    let mut merges = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                if !alive[i] || !alive[j] {
                    continue;
                }
                let s = cosine(&protos[i], &protos[j]);
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                alive[i] = false;
                alive[j] = false;
                merges.push((i, j));
            }
            None => return merges,
        }
    }
}

pub fn random_params<R: Rng>(rng: &mut R, kind: EmbedderKind, in_dim: usize, out_dim: usize, hidden: usize, classes: usize) -> Params {
    let embedder = Embedder::init(kind, in_dim, out_dim, hidden, rng);
    let mut head = Dense::zeros(classes, out_dim);
    head.data.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    Params { embedder, head }
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, in_dim: usize, classes: usize) -> Batch {
    Batch {
        inputs: (0..n).map(|_| (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        targets: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

/// Central finite differences of the loss over every parameter.
pub fn numeric_gradient(params: &Params, batch: &Batch, scale: f64, h: f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        probe.set_flat(&plus);
        let lp = loss_and_grad(&probe, batch, scale).unwrap().0;
        let mut minus = flat.clone();
        minus[i] -= h;
        probe.set_flat(&minus);
        let lm = loss_and_grad(&probe, batch, scale).unwrap().0;
        grad.push((lp - lm) / (2.0 * h));
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Worst relative error over `instances` random linear/MLP problems with
/// dims ≤ 8 and at most 5 classes.
pub fn gradient_check(instances: usize, seed: u64) -> f64 {
    let mut rng = test_rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let kind = if t % 2 == 0 { EmbedderKind::Linear } else { EmbedderKind::Mlp1 };
        let in_dim = rng.random_range(1..=8);
        let out_dim = rng.random_range(2..=8);
        let hidden = rng.random_range(2..=8);
        let classes = rng.random_range(2..=5);
        let n = rng.random_range(1..=6);
        let scale = rng.random_range(1.0..12.0);
        let params = random_params(&mut rng, kind, in_dim, out_dim, hidden, classes);
        let batch = random_batch(&mut rng, n, in_dim, classes);
        let analytic = loss_and_grad(&params, &batch, scale).unwrap().1.flatten();
        let numeric = numeric_gradient(&params, &batch, scale, 1e-6);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Orthogonal matrix from Gram–Schmidt on a Gaussian-ish random matrix.
pub fn random_rotation<R: Rng>(rng: &mut R, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

pub fn rotate(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}
