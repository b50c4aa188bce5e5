//! Finite-difference verification of analytic gradients.
//!
//! [`check`] compares [`Graph::backward`] against central differences for
//! every trainable input of a scalar function and verifies that constant
//! inputs receive no gradient at all. [`suite`] runs the full battery used by
//! the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_difference_gradient, Graph, Tensor, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-7;

/// One input of a checked function.
#[derive(Clone, Debug)]
pub struct Input {
    pub value: Tensor,
    /// Constant inputs must come back with no gradient.
    pub trainable: bool,
}

impl Input {
    pub fn param(value: Tensor) -> Self {
        Input { value, trainable: true }
    }

    pub fn constant(value: Tensor) -> Self {
        Input { value, trainable: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    /// Largest `|analytic − numeric| − rtol·max(|a|,|n|)` excess over `atol`
    /// (non-positive when passing).
    pub worst_excess: f64,
    pub max_abs_err: f64,
    /// Norm of any gradient that reached a constant input (must be 0).
    pub leaked_to_constants: f64,
}

pub fn check<F>(inputs: &[Input], f: F, rtol: f64, atol: f64) -> Result<Outcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|i| g.leaf(i.value.clone(), i.trainable)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut out = Outcome { passed: true, worst_excess: f64::NEG_INFINITY, max_abs_err: 0.0, leaked_to_constants: 0.0 };
    for (k, input) in inputs.iter().enumerate() {
        if !input.trainable {
            out.leaked_to_constants += grads.norm(vars[k]);
            continue;
        }
        let analytic = grads.get_or_zeros(&g, vars[k]);
        let numeric = finite_difference_gradient(
            |t| {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, i)| g.constant(if j == k { t.clone() } else { i.value.clone() }))
                    .collect();
                let l = f(&mut g, &vs)?;
                Ok(g.value(l).item())
            },
            &input.value,
            STEP,
        )?;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = (a - n).abs();
            out.max_abs_err = out.max_abs_err.max(err);
            out.worst_excess = out.worst_excess.max(err - atol - rtol * a.abs().max(n.abs()));
        }
    }
    out.passed = out.worst_excess <= 0.0 && out.leaked_to_constants == 0.0;
    Ok(out)
}

pub fn check_default<F>(inputs: &[Input], f: F) -> Result<Outcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(inputs, f, RTOL, ATOL)
}

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Result of one named entry of [`suite`].
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    pub worst_abs_err: f64,
    pub error: Option<String>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.error.is_none()
    }
}

pub(crate) type CaseFn = Box<dyn Fn(u64) -> Result<Outcome> + Sync>;

/// Runs every registered check over `instances` seeds.
pub fn suite(instances: usize) -> Vec<SuiteRow> {
    use rayon::prelude::*;
    crate::gradcheck_cases::cases()
        .into_par_iter()
        .map(|(name, case)| {
            let mut row = SuiteRow { name: name.to_string(), instances, failures: 0, worst_abs_err: 0.0, error: None };
            for seed in 0..instances as u64 {
                match case(seed) {
                    Ok(o) => {
                        row.worst_abs_err = row.worst_abs_err.max(o.max_abs_err);
                        if !o.passed {
                            row.failures += 1;
                        }
                    }
                    Err(e) => {
                        row.error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            row
        })
        .collect()
}
