//! Self-supervised objectives: InfoNCE, negative cosine, prototype
//! cross-entropy with Sinkhorn-Knopp targets, and Barlow Twins
//! cross-correlation. Every loss is a scalar node on the caller's graph.

use serde::{Deserialize, Serialize};

use crate::autograd::{l2_normalize, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::prototype_scores;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub barlow_offdiag_weight: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    pub include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.2,
            barlow_offdiag_weight: 5e-3,
            sinkhorn_iters: 3,
            sinkhorn_eps: 0.05,
            include_positive_in_denominator: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("losses.temperature", "must be > 0"));
        }
        if !(self.barlow_offdiag_weight > 0.0) {
            return Err(Error::config("losses.barlow_offdiag_weight", "must be > 0"));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::config("losses.sinkhorn_iters", "must be >= 1"));
        }
        if !(self.sinkhorn_eps > 0.0) {
            return Err(Error::config("losses.sinkhorn_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Soft assignments of a batch to prototypes; rows are distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix(Tensor);

impl AssignmentMatrix {
    pub const ROW_TOL: f64 = 1e-6;

    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(shape_err!("assignments must be batch×K, got {:?}", t.shape()));
        }
        for i in 0..t.rows() {
            let row = t.row(i);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Contract(format!("assignment row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOL {
                return Err(Error::Contract(format!("assignment row {i} sums to {s}")));
            }
        }
        Ok(AssignmentMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn check_pair(g: &Graph, a: Var, b: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(shape_err!("paired projections {:?} vs {:?}", sa, sb));
    }
    Ok((sa[0], sa[1]))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config("losses.temperature", "must be > 0"))
    }
}

/// Per-row maximum over the entries selected by `mask` (all when `None`),
/// as an `n × 1` constant used to shift log-sum-exp.
fn row_max(t: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let k = t.cols();
    let data = (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .filter(|(j, _)| mask.map_or(true, |m| m.data()[i * k + j] != 0.0))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Tensor::new(vec![t.rows(), 1], data).expect("sized")
}

/// Mean over rows of `−s_pos + log Σ_j mask_ij exp(s_ij)`.
fn masked_cross_entropy(g: &mut Graph, logits: Var, positive: &Tensor, mask: &Tensor) -> Result<Var> {
    for i in 0..mask.rows() {
        if mask.row(i).iter().all(|&m| m == 0.0) {
            return Err(Error::DegenerateInput(format!("anchor {i} has an empty denominator")));
        }
    }
    let n = g.shape(logits)[0];
    let pos_mask = g.constant(positive.clone());
    let picked = g.mul(logits, pos_mask)?;
    let pos = g.sum(picked, Some(1))?;
    let shift = g.constant(row_max(g.value(logits), Some(mask)));
    let shifted = g.sub(logits, shift)?;
    let e = g.exp(shifted)?;
    let m = g.constant(mask.clone());
    let masked = g.mul(e, m)?;
    let denom = g.sum(masked, Some(1))?;
    let lse = g.log(denom)?;
    let lse = g.add(lse, shift)?;
    let per = g.sub(lse, pos)?;
    let total = g.sum(per, None)?;
    g.scale(total, 1.0 / n as f64)
}

/// InfoNCE with anchors `za` and positives `zb`, similarities as cosine over
/// temperature. Without explicit `negatives` every anchor contrasts against
/// the other samples of both views (`2N − 2` negatives); with them, every
/// anchor uses exactly the rows of `negatives`.
pub fn infonce_loss(g: &mut Graph, za: Var, zb: Var, negatives: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    check_tau(cfg.temperature)?;
    let (n, d) = check_pair(g, za, zb)?;
    let an = l2_normalize(g, za, 1)?;
    let bn = l2_normalize(g, zb, 1)?;
    let (keys, cols) = match negatives {
        None => {
            if n < 2 {
                return Err(Error::DegenerateInput("in-batch negatives need a batch of at least 2".into()));
            }
            (g.concat(&[bn, an], 0)?, 2 * n)
        }
        Some(neg) => {
            let s = g.shape(neg);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err!("negatives {:?} do not match feature dim {}", s, d));
            }
            let m = s[0];
            let nn = l2_normalize(g, neg, 1)?;
            (g.concat(&[bn, nn], 0)?, n + m)
        }
    };
    let kt = g.transpose(keys)?;
    let sim = g.matmul(an, kt)?;
    let logits = g.scale(sim, 1.0 / cfg.temperature)?;

    let mut positive = Tensor::zeros(&[n, cols]);
    let mut mask = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        positive.data_mut()[i * cols + i] = 1.0;
        for j in 0..cols {
            let include = if j < n {
                if j == i {
                    cfg.include_positive_in_denominator
                } else {
                    negatives.is_none()
                }
            } else {
                negatives.is_some() || j - n != i
            };
            if include {
                mask.data_mut()[i * cols + j] = 1.0;
            }
        }
    }
    masked_cross_entropy(g, logits, &positive, &mask)
}

/// Mean of `−cos(q_i, z_i)`; `z` is treated as a stop-gradient target.
pub fn negative_cosine_loss(g: &mut Graph, q: Var, z: Var) -> Result<Var> {
    let (n, _) = check_pair(g, q, z)?;
    let z = if g.requires_grad(z) { g.detach(z) } else { z };
    let qn = l2_normalize(g, q, 1)?;
    let zn = l2_normalize(g, z, 1)?;
    let prod = g.mul(qn, zn)?;
    let total = g.sum(prod, None)?;
    g.scale(total, -1.0 / n as f64)
}

/// Balanced soft assignments of a batch to prototypes from raw scores.
///
/// `exp(scores / eps)` is alternately rescaled so every prototype column
/// carries `batch / K` mass and every sample row sums to one; the final step
/// is always the row normalization. A single-sample batch has no batch-side
/// constraint and reduces to the row softmax.
pub fn sinkhorn_assignments(scores: &Tensor, cfg: &LossConfig) -> Result<AssignmentMatrix> {
    if cfg.sinkhorn_iters == 0 {
        return Err(Error::config("losses.sinkhorn_iters", "must be >= 1"));
    }
    if scores.rank() != 2 || scores.cols() == 0 {
        return Err(shape_err!("scores must be batch×K, got {:?}", scores.shape()));
    }
    if !scores.is_finite() {
        return Err(Error::Domain("non-finite prototype scores".into()));
    }
    let (b, k) = (scores.rows(), scores.cols());
    let mut q = scores.clone();
    for i in 0..b {
        let row = &mut q.data_mut()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = ((*v - max) / cfg.sinkhorn_eps).exp());
    }
    let normalize_rows = |q: &mut Tensor| {
        for row in q.data_mut().chunks_exact_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    };
    if b > 1 {
        let target = b as f64 / k as f64;
        for _ in 0..cfg.sinkhorn_iters {
            let mut colsum = vec![0.0; k];
            for row in q.data().chunks_exact(k) {
                colsum.iter_mut().zip(row).for_each(|(c, v)| *c += v);
            }
            for row in q.data_mut().chunks_exact_mut(k) {
                row.iter_mut().zip(&colsum).for_each(|(v, c)| *v *= target / c);
            }
            normalize_rows(&mut q);
        }
    } else {
        normalize_rows(&mut q);
    }
    if !q.is_finite() {
        return Err(Error::Domain("Sinkhorn iteration produced non-finite values".into()));
    }
    // Rounding can leave entries a hair outside [0, 1]; clamp before validation.
    q.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    AssignmentMatrix::new(q)
}

/// `−Σ_d a_d log softmax_d(sim(z, c_d) / τ)`, averaged over the batch.
pub fn prototype_ce_loss(g: &mut Graph, za: Var, targets: &AssignmentMatrix, bank: Var, cfg: &LossConfig) -> Result<Var> {
    check_tau(cfg.temperature)?;
    let targets = AssignmentMatrix::new(targets.tensor().clone())?;
    let scores = prototype_scores(g, za, bank, cfg.temperature)?;
    soft_cross_entropy(g, scores, targets.tensor())
}

/// Cross-entropy of constant target rows against `softmax(logits)`.
pub(crate) fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(shape_err!("targets {:?} vs logits {:?}", targets.shape(), g.shape(logits)));
    }
    let n = targets.rows();
    let shift = g.constant(row_max(g.value(logits), None));
    let shifted = g.sub(logits, shift)?;
    let e = g.exp(shifted)?;
    let denom = g.sum(e, Some(1))?;
    let lse = g.log(denom)?;
    let logp = g.sub(shifted, lse)?;
    let t = g.constant(targets.clone());
    let weighted = g.mul(logp, t)?;
    let total = g.sum(weighted, None)?;
    g.scale(total, -1.0 / n as f64)
}

/// Pearson cross-correlation between the columns of `za` and `zb`: each
/// feature is mean-centered over the batch and scaled to unit norm.
pub fn cross_correlation(g: &mut Graph, za: Var, zb: Var) -> Result<Var> {
    let (n, _) = check_pair(g, za, zb)?;
    if n < 2 {
        return Err(Error::DegenerateInput("cross-correlation needs a batch of at least 2".into()));
    }
    let center_normalize = |g: &mut Graph, z: Var| -> Result<Var> {
        let mu = g.mean(z, Some(0))?;
        let c = g.sub(z, mu)?;
        l2_normalize(g, c, 0).map_err(|_| Error::DegenerateInput("constant feature dimension".into()))
    };
    let a = center_normalize(g, za)?;
    let b = center_normalize(g, zb)?;
    let at = g.transpose(a)?;
    g.matmul(at, b)
}

/// `Σ_u (1 − C_uu)² + λ Σ_u Σ_{v≠u} C_uv²`.
pub fn barlow_twins_loss(g: &mut Graph, za: Var, zb: Var, cfg: &LossConfig) -> Result<Var> {
    if !(cfg.barlow_offdiag_weight > 0.0) {
        return Err(Error::config("losses.barlow_offdiag_weight", "must be > 0"));
    }
    let c = cross_correlation(g, za, zb)?;
    barlow_from_correlation(g, c, cfg.barlow_offdiag_weight)
}

pub(crate) fn barlow_from_correlation(g: &mut Graph, c: Var, lambda: f64) -> Result<Var> {
    let d = g.shape(c)[0];
    let eye = Tensor::eye(d);
    let off = eye.map(|v| lambda * (1.0 - v));
    let ones = g.constant(Tensor::full(&[d, d], 1.0));
    let diff = g.sub(ones, c)?;
    let diff2 = g.pow2(diff);
    let eye = g.constant(eye);
    let on = g.mul(diff2, eye)?;
    let c2 = g.pow2(c);
    let offw = g.constant(off);
    let offv = g.mul(c2, offw)?;
    let both = g.add(on, offv)?;
    g.sum(both, None)
}
