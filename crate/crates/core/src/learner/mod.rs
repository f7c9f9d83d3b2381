//! A small trainable embedder optimized with a cosine classifier.
//!
//! Logits are `s · cos(f(x), w_c)` with a fixed scale `s` and no bias; the
//! loss is softmax cross-entropy averaged over the batch. Training uses SGD
//! with momentum and weight decay over batches drawn by a class-balanced
//! sampler. Only the embedder is kept: the classifier head is discarded
//! once training ends.

mod embedder;

use serde::{Deserialize, Serialize};

pub use embedder::{load_model, save_model, Dense, Embedder, EmbedderKind, Layer};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::stats::class_prototype;
use crate::vector::{argmax, dot, normalized, widen};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Logit temperature `s`.
    pub cosine_scale: f64,
    pub seed: u64,
    /// Epochs at which the learning rate is divided by `lr_divisor`.
    pub lr_milestones: Vec<usize>,
    pub lr_divisor: f64,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// Output dimension; `None` means `min(in_dim, 64)`.
    pub out_dim: Option<usize>,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine_scale: 10.0,
            seed: 0,
            lr_milestones: vec![20, 25],
            lr_divisor: 10.0,
            warmup_steps: 0,
            out_dim: None,
            hidden: 128,
        }
    }
}

impl TrainConfig {
    pub fn resolved_out_dim(&self, in_dim: usize) -> usize {
        self.out_dim.unwrap_or(in_dim.min(64))
    }

    fn validate(&self, n: usize) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("cosine_scale", self.cosine_scale),
            ("lr_divisor", self.lr_divisor),
            ("hidden", self.hidden as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.learning_rate < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning_rate, momentum and weight_decay must be non-negative"));
        }
        if self.batch_size > n {
            return Err(Error::invalid(format!("batch_size {} exceeds dataset size {n}", self.batch_size)));
        }
        if self.out_dim == Some(0) {
            return Err(Error::invalid("out_dim must be positive"));
        }
        Ok(())
    }
}

/// Everything `loss_and_grad` differentiates: the embedder and one weight
/// row per class. Gradients use the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub embedder: Embedder,
    pub head: Dense,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.embedder.tensors_mut();
        t.push(&mut self.head.data);
        t
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.embedder.tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect();
        out.extend_from_slice(&self.head.data);
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }
}

/// Inputs with head-row targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

/// `y = x / ||x||` backpropagated: `(g − (g·y) y) / ||x||`.
fn normalize_backward(grad: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let gy = dot(grad, unit);
    grad.iter().zip(unit).map(|(g, y)| (g - gy * y) / norm).collect()
}

fn unit_with_norm(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = dot(v, v).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::ZeroVector);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Mean cross-entropy of scaled cosine logits and its exact gradient with
/// respect to every parameter.
pub fn loss_and_grad(params: &Params, batch: &Batch, cosine_scale: f64) -> Result<(f64, Params)> {
    if batch.inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let s = cosine_scale;
    let classes = params.head.rows;
    let inv_b = 1.0 / batch.inputs.len() as f64;
    let mut heads = Vec::with_capacity(classes);
    for c in 0..classes {
        heads.push(unit_with_norm(params.head.row(c))?);
    }
    let mut grads = params.zeros_like();
    let mut head_unit_grad = Dense::zeros(classes, params.head.cols);
    let mut loss = 0.0;

    for (x, &target) in batch.inputs.iter().zip(&batch.targets) {
        if target >= classes {
            return Err(Error::invalid(format!("target {target} out of range for {classes} classes")));
        }
        // forward
        let (hidden_pre, z) = match &params.embedder {
            Embedder::Mlp1 { hidden, output } => {
                let a = hidden.forward(x);
                let h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
                (Some((a, h.clone())), output.forward(&h))
            }
            e => (None, e.forward(x)),
        };
        let (u, z_norm) = unit_with_norm(&z)?;
        let logits: Vec<f64> = heads.iter().map(|(w, _)| s * dot(&u, w)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += (log_z - logits[target]) * inv_b;

        // backward through softmax
        let mut du = vec![0.0; u.len()];
        for (c, (w, _)) in heads.iter().enumerate() {
            let p = (logits[c] - log_z).exp();
            let dl = (p - if c == target { 1.0 } else { 0.0 }) * inv_b;
            if dl == 0.0 {
                continue;
            }
            du.iter_mut().zip(w).for_each(|(d, wi)| *d += s * dl * wi);
            head_unit_grad.row_mut(c).iter_mut().zip(&u).for_each(|(g, ui)| *g += s * dl * ui);
        }
        let dz = normalize_backward(&du, &u, z_norm);

        match (&params.embedder, &mut grads.embedder) {
            (Embedder::Identity { .. }, _) => {}
            (Embedder::Linear { .. }, Embedder::Linear { layer: g }) => {
                g.weight.add_outer(&dz, x);
                g.bias.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
            }
            (Embedder::Mlp1 { output, .. }, Embedder::Mlp1 { hidden: gh, output: go }) => {
                let (a, h) = hidden_pre.as_ref().expect("mlp forward");
                go.weight.add_outer(&dz, h);
                go.bias.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
                let dh = output.weight.mul_t_vec(&dz);
                let da: Vec<f64> = dh.iter().zip(a).map(|(d, &ai)| if ai > 0.0 { *d } else { 0.0 }).collect();
                gh.weight.add_outer(&da, x);
                gh.bias.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            }
            _ => unreachable!("gradient shape follows parameters"),
        }
    }

    for (c, (w, n)) in heads.iter().enumerate() {
        let g = normalize_backward(head_unit_grad.row(c), w, *n);
        grads.head.row_mut(c).copy_from_slice(&g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    Ok((loss, grads))
}

/// Draws records so that every class appears equally often per epoch (to
/// within one), regardless of class sizes.
pub struct BalancedSampler {
    members: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rng: SeededRng,
}

impl BalancedSampler {
    pub fn new(members: Vec<Vec<usize>>, rng: SeededRng) -> Self {
        let mut s = Self {
            cursor: vec![0; members.len()],
            members,
            rng,
        };
        for c in 0..s.members.len() {
            rng::shuffle(&mut s.rng, &mut s.members[c]);
        }
        s
    }

    fn draw_from(&mut self, class: usize) -> usize {
        if self.cursor[class] == self.members[class].len() {
            rng::shuffle(&mut self.rng, &mut self.members[class]);
            self.cursor[class] = 0;
        }
        let r = self.members[class][self.cursor[class]];
        self.cursor[class] += 1;
        r
    }

    /// `n` (record, class index) draws: whole rounds over all classes in a
    /// shuffled order, then a partial round over distinct random classes.
    pub fn epoch(&mut self, n: usize) -> Vec<(usize, usize)> {
        let classes = self.members.len();
        let mut slots = Vec::with_capacity(n);
        for _ in 0..n / classes {
            let mut order: Vec<usize> = (0..classes).collect();
            rng::shuffle(&mut self.rng, &mut order);
            slots.extend(order);
        }
        let extra = rng::sample_without_replacement(&mut self.rng, classes, n % classes);
        slots.extend(extra);
        slots.into_iter().map(|c| (self.draw_from(c), c)).collect()
    }
}

/// Result of [`train`]: the embedder plus what was discarded or logged.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub embedder: Embedder,
    /// Head rows follow `class_ids`.
    pub head: Dense,
    pub class_ids: Vec<u32>,
    /// Batch loss at every optimizer step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Predicted class ids under the trained cosine head.
    pub fn predict(&self, ds: &EmbeddingDataset) -> Result<Vec<u32>> {
        let heads: Vec<Vec<f64>> = (0..self.head.rows)
            .map(|c| normalized(self.head.row(c)).ok_or(Error::ZeroVector))
            .collect::<Result<_>>()?;
        (0..ds.len())
            .map(|r| {
                let u = self.embedder.embed_vector(&ds.vector_f64(r))?;
                let scores: Vec<f64> = heads.iter().map(|w| dot(&u, w)).collect();
                Ok(self.class_ids[argmax(&scores)])
            })
            .collect()
    }

    pub fn accuracy(&self, ds: &EmbeddingDataset) -> Result<f64> {
        let pred = self.predict(ds)?;
        let correct = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / ds.len().max(1) as f64)
    }
}

fn learning_rate(cfg: &TrainConfig, epoch: usize, step: usize) -> f64 {
    let drops = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    let mut lr = cfg.learning_rate / cfg.lr_divisor.powi(drops as i32);
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        lr *= (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    lr
}

/// Trains an embedder of `kind` on `base`, keeping the head and loss log.
pub fn train(base: &EmbeddingDataset, cfg: &TrainConfig, kind: EmbedderKind) -> Result<TrainOutcome> {
    let groups: Vec<(u32, Vec<usize>)> = base.members_by_class().into_iter().collect();
    if groups.len() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    if let Some((c, _)) = groups.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::ClassTooSmall { class: *c, have: 0, need: 1 });
    }
    cfg.validate(base.len())?;
    let class_ids: Vec<u32> = groups.iter().map(|g| g.0).collect();
    let in_dim = base.dim();
    let out_dim = match kind {
        EmbedderKind::Identity => in_dim,
        _ => cfg.resolved_out_dim(in_dim),
    };
    let mut init_rng = rng::keyed(cfg.seed, 1);
    let embedder = Embedder::init(kind, in_dim, out_dim, cfg.hidden, &mut init_rng);

    let inputs: Vec<Vec<f64>> = (0..base.len()).map(|r| widen(base.vector(r))).collect();
    let mut head = Dense::zeros(groups.len(), out_dim);
    for (c, (_, members)) in groups.iter().enumerate() {
        let feats: Vec<Vec<f64>> = members.iter().map(|&r| embedder.forward(&inputs[r])).collect();
        head.row_mut(c).copy_from_slice(&class_prototype(&feats)?);
    }
    let mut params = Params { embedder, head };

    let mut losses = Vec::new();
    if kind != EmbedderKind::Identity {
        let mut sampler = BalancedSampler::new(groups.iter().map(|g| g.1.clone()).collect(), rng::keyed(cfg.seed, 2));
        let mut velocity = params.zeros_like();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let draws = sampler.epoch(base.len());
            for chunk in draws.chunks(cfg.batch_size) {
                let batch = Batch {
                    inputs: chunk.iter().map(|&(r, _)| inputs[r].clone()).collect(),
                    targets: chunk.iter().map(|&(_, c)| c).collect(),
                };
                let (loss, mut grads) = loss_and_grad(&params, &batch, cfg.cosine_scale).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration: step },
                    other => other,
                })?;
                losses.push(loss);
                let lr = learning_rate(cfg, epoch, step);
                for ((p, g), v) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors_mut())
                    .zip(velocity.tensors_mut())
                {
                    for ((pi, gi), vi) in p.iter_mut().zip(g.iter_mut()).zip(v.iter_mut()) {
                        *gi += cfg.weight_decay * *pi;
                        *vi = cfg.momentum * *vi + *gi;
                        *pi -= lr * *vi;
                    }
                }
                step += 1;
            }
        }
    }
    Ok(TrainOutcome {
        embedder: params.embedder,
        head: params.head,
        class_ids,
        losses,
    })
}

/// Trains and returns only the embedder.
pub fn train_embedder(base: &EmbeddingDataset, cfg: &TrainConfig, kind: EmbedderKind) -> Result<Embedder> {
    train(base, cfg, kind).map(|o| o.embedder)
}

/// Maps every vector through `embedder` and normalizes it.
pub fn embed(embedder: &Embedder, ds: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    if ds.dim() != embedder.in_dim() {
        return Err(Error::SizeMismatch {
            what: "embedder input dimension".into(),
            expected: embedder.in_dim(),
            found: ds.dim(),
        });
    }
    let mut data = Vec::with_capacity(ds.len() * embedder.out_dim());
    for r in 0..ds.len() {
        let u = embedder.embed_vector(&ds.vector_f64(r)).map_err(|_| Error::NonFinite { record: r })?;
        data.extend(u.into_iter().map(|v| v as f32));
    }
    ds.with_vectors(embedder.out_dim(), data)
}
