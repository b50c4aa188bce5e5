//! Linear probes, weighted k-NN and the continual-learning metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::losses::soft_cross_entropy;
use crate::nn::{EncoderState, Linear};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub label_fraction: f64,
    /// One probe per task over that task's classes instead of a single probe
    /// over everything seen in the evaluation splits.
    pub task_aware: bool,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { label_fraction: 1.0, task_aware: false, epochs: 100, lr: 0.3, momentum: 0.9, batch_size: 64, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config("probe.label_fraction", "must lie in (0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("probe.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("probe.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Class-stratified labeled subset: each class keeps `round(f·n_c)` of its
/// samples after a seeded shuffle, so smaller fractions are nested in larger
/// ones for the same seed.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = Vec::new();
    for (c, mut idx) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        let keep = (fraction * idx.len() as f64).round() as usize;
        if keep == 0 {
            return Err(Error::Stratification(format!("class {c} has no labeled example at fraction {fraction}")));
        }
        out.extend_from_slice(&idx[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Softmax cross-entropy of a dense layer over constant one-hot targets.
pub fn probe_loss(g: &mut Graph, x: Var, weight: Var, bias: Var, targets: &Tensor) -> Result<Var> {
    let h = g.matmul(x, weight)?;
    let logits = g.add(h, bias)?;
    soft_cross_entropy(g, logits, targets)
}

/// A trained linear classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeState {
    pub layer: Linear,
    /// Class id of every output column.
    pub classes: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ProbeState {
    fn standardize(&self, features: &Tensor) -> Tensor {
        let d = features.cols();
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if features.rank() != 2 || features.cols() != self.mean.len() {
            return Err(shape_err!("probe expects {} features, got {:?}", self.mean.len(), features.shape()));
        }
        let x = self.standardize(features);
        let c = self.classes.len();
        let w = &self.layer.weight;
        let b = self.layer.bias.data();
        let mut preds = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..c {
                let s = b[k] + row.iter().enumerate().map(|(j, v)| v * w.data()[j * c + k]).sum::<f64>();
                if s > best.0 {
                    best = (s, k);
                }
            }
            preds.push(self.classes[best.1]);
        }
        Ok(preds)
    }
}

/// Multinomial logistic regression trained with momentum SGD and a cosine
/// schedule on a stratified fraction of the data. Features are constants.
pub fn train_linear_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeState> {
    cfg.validate()?;
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(shape_err!("{} labels for features {:?}", labels.len(), features.shape()));
    }
    if labels.is_empty() {
        return Err(Error::Stratification("no labeled examples".into()));
    }
    let subset = stratified_subset(labels, cfg.label_fraction, cfg.seed)?;
    let x = features.select_rows(&subset);
    let y: Vec<usize> = subset.iter().map(|&i| labels[i]).collect();
    let mut classes = y.clone();
    classes.sort_unstable();
    classes.dedup();
    let col: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(k, &c)| (c, k)).collect();

    let (n, d, c) = (x.rows(), x.cols(), classes.len());
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in scale.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let scale: Vec<f64> = scale.into_iter().map(|v| (v + 1e-8).sqrt()).collect();
    let mut probe = ProbeState {
        layer: Linear { weight: Tensor::zeros(&[d, c]), bias: Tensor::zeros(&[c]) },
        classes,
        mean,
        scale,
    };
    let xs = probe.standardize(&x);

    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd,
        global_lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: 0.0,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bs = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let mut targets = Tensor::zeros(&[batch.len(), c]);
            for (r, &i) in batch.iter().enumerate() {
                targets.data_mut()[r * c + col[&y[i]]] = 1.0;
            }
            let mut g = Graph::new();
            let xb = g.constant(xs.select_rows(batch));
            let w = g.param(probe.layer.weight.clone());
            let b = g.param(probe.layer.bias.clone());
            let loss = probe_loss(&mut g, xb, w, b, &targets)?;
            let mut grads = g.backward(loss)?;
            let gw = grads.take(w).expect("param gradient");
            let gb = grads.take(b).expect("param gradient");
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut [&mut probe.layer.weight, &mut probe.layer.bias], &[gw, gb], lr)?;
            step += 1;
        }
    }
    Ok(probe)
}

/// Top-1 accuracy.
pub fn evaluate_probe(probe: &ProbeState, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty evaluation set".into()));
    }
    let preds = probe.predict(features)?;
    Ok(accuracy(&preds, labels))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Weighted k-NN on cosine similarity: every neighbor votes `exp(sim/τ)` for
/// its class; ties go to the smaller class id.
pub fn knn_evaluate(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    k: usize,
    tau: f64,
) -> Result<f64> {
    if k == 0 || k > train_labels.len() {
        return Err(Error::config("knn.k", format!("k = {k} with {} training samples", train_labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::config("knn.temperature", "must be > 0"));
    }
    if train_feats.rows() != train_labels.len() || test_feats.rows() != test_labels.len() || train_feats.cols() != test_feats.cols() {
        return Err(shape_err!("k-NN inputs {:?} / {:?}", train_feats.shape(), test_feats.shape()));
    }
    if test_labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty evaluation set".into()));
    }
    let train = unit_rows(train_feats);
    let test = unit_rows(test_feats);
    let mut preds = Vec::with_capacity(test.len());
    for q in &test {
        let mut sims: Vec<(f64, usize)> =
            train.iter().enumerate().map(|(j, r)| (r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), j)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, f64> = BTreeMap::new();
        for &(s, j) in &sims[..k] {
            *votes.entry(train_labels[j]).or_default() += (s / tau).exp();
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (&c, &v) in &votes {
            if v > best.0 {
                best = (v, c);
            }
        }
        preds.push(best.1);
    }
    Ok(accuracy(&preds, test_labels))
}

/// `A[j][k]`: accuracy on task `k` after training on task `j` (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    pub cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(t: usize) -> Self {
        AccuracyMatrix { cells: vec![vec![None; t]; t] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(shape_err!("accuracy matrix must be square"));
        }
        Ok(AccuracyMatrix { cells: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect() })
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, j: usize, k: usize, v: f64) {
        self.cells[j][k] = Some(v);
    }

    pub fn get(&self, j: usize, k: usize) -> Result<f64> {
        self.cells
            .get(j)
            .and_then(|r| r.get(k))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("accuracy cell ({}, {}) is missing", j + 1, k + 1)))
    }

    /// Mean accuracy over tasks `0..=j` after training task `j`.
    pub fn seen_average(&self, j: usize) -> Result<f64> {
        let mut s = 0.0;
        for k in 0..=j {
            s += self.get(j, k)?;
        }
        Ok(s / (j + 1) as f64)
    }
}

/// `A = (1/T) Σ_i A[T][i]`.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::UndefinedMetric("empty accuracy matrix".into()));
    }
    let mut s = 0.0;
    for i in 0..t {
        s += m.get(t - 1, i)?;
    }
    Ok(s / t as f64)
}

/// `F = 1/(T−1) Σ_{i<T} max_t (A[t][i] − A[T][i])`, unclamped.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    let mut s = 0.0;
    for i in 0..t - 1 {
        let last = m.get(t - 1, i)?;
        let mut best = f64::NEG_INFINITY;
        for j in 0..t {
            best = best.max(m.get(j, i)? - last);
        }
        s += best;
    }
    Ok(s / (t - 1) as f64)
}

/// `FT = 1/(T−1) Σ_{i≥2} (A[i−1][i] − R_i)`; `random[i]` is `R` for task `i`.
pub fn forward_transfer(m: &AccuracyMatrix, random: &[f64]) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric("forward transfer needs at least two tasks".into()));
    }
    if random.len() != t {
        return Err(Error::Contract(format!("{} random baselines for {t} tasks", random.len())));
    }
    let mut s = 0.0;
    for i in 1..t {
        s += m.get(i - 1, i)? - random[i];
    }
    Ok(s / (t - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub forward_transfer: Option<f64>,
    pub random_baseline: Vec<f64>,
    /// Final-row accuracies.
    pub per_task: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(m: &AccuracyMatrix, random: &[f64]) -> Result<Self> {
        let t = m.tasks();
        let per_task = (0..t).map(|k| m.get(t - 1, k)).collect::<Result<Vec<_>>>()?;
        let (f, ft) = if t >= 2 { (Some(forgetting(m)?), Some(forward_transfer(m, random)?)) } else { (None, None) };
        Ok(MetricsReport {
            average_accuracy: average_accuracy(m)?,
            forgetting: f,
            forward_transfer: ft,
            random_baseline: random.to_vec(),
            per_task,
        })
    }
}

/// Probe accuracies of `encoder` on every task. `train[k]` trains the probe
/// and `eval[k]` scores it; task-agnostic mode fits one probe on the union of
/// all training splits.
pub fn evaluate_tasks(encoder: &EncoderState, train: &[LabeledDataset], eval: &[LabeledDataset], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    if train.len() != eval.len() {
        return Err(shape_err!("{} probe-training splits for {} evaluation splits", train.len(), eval.len()));
    }
    let feats = |d: &LabeledDataset| encoder.features(&d.samples);
    if cfg.task_aware {
        use rayon::prelude::*;
        train
            .par_iter()
            .zip(eval.par_iter())
            .map(|(tr, ev)| {
                let probe = train_linear_probe(&feats(tr)?, &tr.labels, cfg)?;
                evaluate_probe(&probe, &feats(ev)?, &ev.labels)
            })
            .collect()
    } else {
        let all = LabeledDataset::concat(&train.iter().collect::<Vec<_>>())?;
        let probe = train_linear_probe(&feats(&all)?, &all.labels, cfg)?;
        eval.iter().map(|ev| evaluate_probe(&probe, &feats(ev)?, &ev.labels)).collect()
    }
}
