//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! value, and [`Graph::backward`] walks the tape in reverse. Leaves are either
//! trainable ([`Graph::param`]) or constant ([`Graph::constant`]); constants
//! and everything computed only from constants never receive gradient.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Smallest slice norm accepted by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;
/// Added to the variance inside the square root by [`standardize`].
pub const EPS_STD: f64 = 1e-8;

/// Scales every slice along `axis` to unit Euclidean norm.
pub fn l2_normalize(g: &mut Graph, z: Var, axis: usize) -> Result<Var> {
    let sq = g.pow2(z);
    let ss = g.sum(sq, Some(axis))?;
    if let Some(min) = g.value(ss).data().iter().copied().reduce(f64::min) {
        if min.sqrt() < EPS_NORM {
            return Err(Error::DegenerateInput(format!(
                "slice norm {:.3e} below {EPS_NORM:e}",
                min.sqrt()
            )));
        }
    }
    let norm = g.sqrt(ss)?;
    g.div(z, norm)
}

/// Centers every feature along `batch_axis` and divides by `sqrt(var + EPS_STD)`
/// (population variance).
pub fn standardize(g: &mut Graph, z: Var, batch_axis: usize) -> Result<Var> {
    let extent = g.shape(z).get(batch_axis).copied().unwrap_or(0);
    if extent < 2 {
        return Err(Error::DegenerateInput(format!("batch extent {extent} < 2")));
    }
    let mu = g.mean(z, Some(batch_axis))?;
    let centered = g.sub(z, mu)?;
    let sq = g.pow2(centered);
    let var = g.mean(sq, Some(batch_axis))?;
    if g.value(var).data().iter().any(|v| v.sqrt() < EPS_STD) {
        return Err(Error::DegenerateInput("constant feature dimension".into()));
    }
    let shifted = g.add_scalar(var, EPS_STD)?;
    let std = g.sqrt(shifted)?;
    g.div(centered, std)
}

/// Central-difference estimate of `∂f/∂x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain(format!("non-finite evaluation at coordinate {i}")));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Mixed absolute/relative closeness used by every gradient check.
pub fn allclose(a: &Tensor, b: &Tensor, rtol: f64, atol: f64) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= atol + rtol * y.abs().max(x.abs()))
}
