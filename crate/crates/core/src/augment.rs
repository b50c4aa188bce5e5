//! Stochastic view generation in input-vector space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Each transform fires independently with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub noise_sigma: f64,
    pub noise_prob: f64,
    pub mask_rate: f64,
    pub mask_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_prob: f64,
    /// Largest rotation angle (radians) applied to each coordinate pair.
    pub rotate_max_angle: f64,
    pub rotate_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            noise_sigma: 0.5,
            noise_prob: 1.0,
            mask_rate: 0.2,
            mask_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            scale_prob: 0.5,
            rotate_max_angle: 0.3,
            rotate_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Every probability zero.
    pub fn identity() -> Self {
        AugmentPolicy { noise_prob: 0.0, mask_prob: 0.0, scale_prob: 0.0, rotate_prob: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("noise_prob", self.noise_prob),
            ("mask_prob", self.mask_prob),
            ("scale_prob", self.scale_prob),
            ("rotate_prob", self.rotate_prob),
            ("mask_rate", self.mask_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name}"), "must lie in [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("augment.noise_sigma", "must be finite and non-negative"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::config("augment.scale_min", "need 0 < scale_min <= scale_max"));
        }
        if !(self.rotate_max_angle >= 0.0 && self.rotate_max_angle.is_finite()) {
            return Err(Error::config("augment.rotate_max_angle", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, sample, draw, view)` coordinate.
fn view_rng(seed: u64, sample: u64, draw: u64, view: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(splitmix(seed) ^ sample) ^ draw) ^ view);
    ChaCha8Rng::seed_from_u64(s)
}

fn augment_one(x: &[f64], p: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = x.to_vec();
    if p.rotate_prob > 0.0 && rng.gen_bool(p.rotate_prob) {
        for k in 0..v.len() / 2 {
            let a = rng.gen_range(-1.0..=1.0) * p.rotate_max_angle;
            let (c, s) = (a.cos(), a.sin());
            let (xi, xj) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = c * xi - s * xj;
            v[2 * k + 1] = s * xi + c * xj;
        }
    }
    if p.scale_prob > 0.0 && rng.gen_bool(p.scale_prob) {
        let s = if p.scale_max > p.scale_min { rng.gen_range(p.scale_min..p.scale_max) } else { p.scale_min };
        v.iter_mut().for_each(|a| *a *= s);
    }
    if p.mask_prob > 0.0 && rng.gen_bool(p.mask_prob) {
        for a in v.iter_mut() {
            if rng.gen_bool(p.mask_rate) {
                *a = 0.0;
            }
        }
    }
    if p.noise_prob > 0.0 && rng.gen_bool(p.noise_prob) {
        let n = Normal::new(0.0, p.noise_sigma).expect("validated sigma");
        v.iter_mut().for_each(|a| *a += n.sample(rng));
    }
    v
}

/// Two independent augmentations of `x`. The result depends only on
/// `(seed, sample_index, draw_index)`.
pub fn augment_pair(x: &[f64], policy: &AugmentPolicy, seed: u64, sample_index: u64, draw_index: u64) -> (Vec<f64>, Vec<f64>) {
    let a = augment_one(x, policy, &mut view_rng(seed, sample_index, draw_index, 0));
    let b = augment_one(x, policy, &mut view_rng(seed, sample_index, draw_index, 1));
    (a, b)
}

/// Views for a minibatch: rows `indices` of `samples`, drawn at `step`.
pub fn augment_batch(samples: &Tensor, indices: &[usize], policy: &AugmentPolicy, seed: u64, step: u64) -> Result<(Tensor, Tensor)> {
    let d = samples.cols();
    let mut a = Vec::with_capacity(indices.len() * d);
    let mut b = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let (va, vb) = augment_pair(samples.row(i), policy, seed, i as u64, step);
        a.extend(va);
        b.extend(vb);
    }
    Ok((Tensor::new(vec![indices.len(), d], a)?, Tensor::new(vec![indices.len(), d], b)?))
}
