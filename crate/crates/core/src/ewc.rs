//! Elastic weight consolidation with importance from the SSL loss.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Diagonal Fisher estimate and the anchor parameters it was taken at, in
/// [`crate::nn::EncoderState::params_mut`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    pub importance: Vec<Tensor>,
    pub anchors: Vec<Tensor>,
}

impl FisherDiagonal {
    pub fn new(importance: Vec<Tensor>, anchors: Vec<Tensor>) -> Result<Self> {
        if importance.len() != anchors.len() {
            return Err(shape_err!("{} importance tensors for {} anchors", importance.len(), anchors.len()));
        }
        for (i, (f, a)) in importance.iter().zip(&anchors).enumerate() {
            if f.shape() != a.shape() {
                return Err(shape_err!("fisher {i}: {:?} vs anchor {:?}", f.shape(), a.shape()));
            }
            if f.data().iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Contract(format!("fisher {i} has a negative or NaN entry")));
            }
        }
        Ok(FisherDiagonal { importance, anchors })
    }

    /// Mean of squared per-batch gradients.
    pub fn from_squared_grads(batches: &[Vec<Tensor>], anchors: Vec<Tensor>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::config("training.fisher_batches", "must be at least 1"));
        }
        let inv = 1.0 / batches.len() as f64;
        let mut importance: Vec<Tensor> = anchors.iter().map(|a| Tensor::zeros(a.shape())).collect();
        for grads in batches {
            if grads.len() != importance.len() {
                return Err(shape_err!("{} gradients for {} parameters", grads.len(), importance.len()));
            }
            for (acc, g) in importance.iter_mut().zip(grads) {
                if acc.shape() != g.shape() {
                    return Err(shape_err!("gradient {:?} vs parameter {:?}", g.shape(), acc.shape()));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * v * inv;
                }
            }
        }
        FisherDiagonal::new(importance, anchors)
    }
}

/// `(λ/2) Σ_i F_i (θ_i − θ*_i)²` on the graph.
pub fn ewc_penalty(g: &mut Graph, params: &[Var], fisher: &FisherDiagonal, lambda: f64) -> Result<Var> {
    if params.len() != fisher.anchors.len() {
        return Err(shape_err!("{} parameters for a fisher over {}", params.len(), fisher.anchors.len()));
    }
    let mut total: Option<Var> = None;
    for ((&p, f), a) in params.iter().zip(&fisher.importance).zip(&fisher.anchors) {
        if g.shape(p) != a.shape() {
            return Err(shape_err!("parameter {:?} vs anchor {:?}", g.shape(p), a.shape()));
        }
        let anchor = g.constant(a.clone());
        let diff = g.sub(p, anchor)?;
        let sq = g.pow2(diff);
        let w = g.constant(f.clone());
        let weighted = g.mul(sq, w)?;
        let s = g.sum(weighted, None)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    g.scale(total, lambda / 2.0)
}

/// Value of the penalty for concrete parameters.
pub fn ewc_penalty_value(params: &[&Tensor], fisher: &FisherDiagonal, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant((*p).clone())).collect();
    let v = ewc_penalty(&mut g, &vars, fisher, lambda)?;
    Ok(g.value(v).item())
}
