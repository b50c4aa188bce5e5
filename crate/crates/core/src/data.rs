//! Datasets: the in-memory [`LabeledDataset`], the synthetic generator, the
//! CIFAR-100 binary reader and the `CSFE` feature dump.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::checkpoint::Reader;
use crate::error::{shape_err, Error, Result};

/// Samples with labels. Labels are only used to split scenarios and to
/// evaluate; training code never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub domain_ids: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, domain_ids: Option<Vec<usize>>) -> Result<Self> {
        if samples.rank() != 2 || samples.rows() != labels.len() {
            return Err(shape_err!("{} labels for samples of shape {:?}", labels.len(), samples.shape()));
        }
        if let Some(d) = &domain_ids {
            if d.len() != labels.len() {
                return Err(shape_err!("{} domain ids for {} samples", d.len(), labels.len()));
            }
        }
        Ok(LabeledDataset { samples, labels, domain_ids })
    }

    pub fn empty(dim: usize) -> Self {
        LabeledDataset { samples: Tensor::zeros(&[0, dim]), labels: Vec::new(), domain_ids: None }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledDataset {
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domain_ids: self.domain_ids.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }

    /// Concatenates datasets with equal dimension.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let dim = parts.first().map(|p| p.dim()).unwrap_or(0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let with_domains = parts.iter().all(|p| p.domain_ids.is_some());
        let mut domains = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(shape_err!("cannot concatenate dims {} and {}", dim, p.dim()));
            }
            data.extend_from_slice(p.samples.data());
            labels.extend_from_slice(&p.labels);
            if let Some(d) = &p.domain_ids {
                domains.extend_from_slice(d);
            }
        }
        let n = labels.len();
        LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, with_domains.then_some(domains))
    }

    /// Indices grouped by label, in sample order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        m
    }

    /// Stratified split: within each class a seeded shuffle puts
    /// `round(holdout·n_c)` samples into the second part (at least one sample
    /// stays in the first).
    pub fn stratified_split(&self, holdout: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for (_, mut idx) in self.by_class() {
            idx.shuffle(&mut rng);
            let h = ((holdout * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
            held.extend_from_slice(&idx[..h]);
            keep.extend_from_slice(&idx[h..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        (self.subset(&keep), self.subset(&held))
    }
}

/// Parameters of the class-conditional Gaussian generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    pub n_domains: usize,
    pub domain_shift_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 8,
            samples_per_class: 200,
            input_dim: 32,
            cluster_std: 1.0,
            n_domains: 1,
            domain_shift_strength: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("samples_per_class", self.samples_per_class),
            ("input_dim", self.input_dim),
            ("n_domains", self.n_domains),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("data.{name}"), "must be positive"));
            }
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::config("data.cluster_std", "must be finite and non-negative"));
        }
        if !(self.domain_shift_strength >= 0.0 && self.domain_shift_strength.is_finite()) {
            return Err(Error::config("data.domain_shift_strength", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Radius of the sphere the class means are drawn on.
    pub fn radius(&self) -> f64 {
        4.0 * self.cluster_std
    }
}

/// Orthogonal map built from Givens rotations on consecutive coordinate
/// pairs, each with a random angle in `[-strength·π/2, strength·π/2]`,
/// composed over a random coordinate permutation.
struct DomainTransform {
    perm: Vec<usize>,
    angles: Vec<f64>,
    offset: Vec<f64>,
}

impl DomainTransform {
    fn sample(dim: usize, strength: f64, radius: f64, rng: &mut impl Rng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let angles = (0..dim / 2).map(|_| rng.gen_range(-1.0..1.0) * strength * std::f64::consts::FRAC_PI_2).collect();
        let dir = unit_vector(dim, rng);
        let offset = dir.iter().map(|v| v * strength * radius * 0.5).collect();
        DomainTransform { perm, angles, offset }
    }

    fn apply(&self, x: &mut [f64]) {
        for (k, &a) in self.angles.iter().enumerate() {
            let (i, j) = (self.perm[2 * k], self.perm[2 * k + 1]);
            let (c, s) = (a.cos(), a.sin());
            let (xi, xj) = (x[i], x[j]);
            x[i] = c * xi - s * xj;
            x[j] = s * xi + c * xj;
        }
        for (v, o) in x.iter_mut().zip(&self.offset) {
            *v += o;
        }
    }
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Class-conditional Gaussian clusters with means on a sphere of radius
/// `4·cluster_std`. With several domains, domain `d > 0` applies its own
/// orthogonal transform and offset; domain sizes decrease with the index.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.input_dim;
    let r = spec.radius();
    let means: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| unit_vector(dim, &mut rng).into_iter().map(|v| v * r).collect()).collect();
    let transforms: Vec<DomainTransform> = (1..spec.n_domains)
        .map(|_| DomainTransform::sample(dim, spec.domain_shift_strength, r.max(1.0), &mut rng))
        .collect();
    let shares = domain_shares(spec.samples_per_class, spec.n_domains);

    let n = spec.n_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for (d, &count) in shares.iter().enumerate() {
            for _ in 0..count {
                let mut x: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.cluster_std * z
                    })
                    .collect();
                if d > 0 {
                    transforms[d - 1].apply(&mut x);
                }
                data.extend_from_slice(&x);
                labels.push(c);
                domains.push(d);
            }
        }
    }
    let domain_ids = (spec.n_domains > 1).then_some(domains);
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, domain_ids)
}

/// Splits `n` samples over domains with weights `D, D−1, …, 1` using largest
/// remainders (ties to the lower domain).
fn domain_shares(n: usize, domains: usize) -> Vec<usize> {
    let total: usize = (1..=domains).sum();
    let exact: Vec<f64> = (0..domains).map(|d| n as f64 * (domains - d) as f64 / total as f64).collect();
    let mut shares: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - shares.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..domains).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for d in order {
        if rest == 0 {
            break;
        }
        shares[d] += 1;
        rest -= 1;
    }
    shares
}

pub const CIFAR_RECORD: usize = 3074;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_CLASSES: usize = 100;

/// Decodes CIFAR-100 binary records: coarse label, fine label, then the R, G
/// and B planes of a 32×32 image. Pixels are scaled to `[0, 1]`; the fine
/// label is the class.
pub fn decode_cifar100(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let (coarse, fine) = (rec[0] as usize, rec[1] as usize);
        if coarse >= CIFAR_CLASSES || fine >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i}: label out of range (coarse {coarse}, fine {fine})")));
        }
        labels.push(fine);
        data.extend(rec[2..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(Tensor::new(vec![n, CIFAR_PIXELS], data)?, labels, None)
}

pub fn read_cifar100_binary(path: &Path) -> Result<LabeledDataset> {
    decode_cifar100(&std::fs::read(path)?)
}

pub const FEATURE_MAGIC: &[u8; 4] = b"CSFE";

/// `"CSFE" | count u32 | dim u32 | f64 rows | u32 labels`, little-endian.
pub fn encode_features(features: &Tensor, labels: &[usize]) -> Result<Vec<u8>> {
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(shape_err!("{} labels for features of shape {:?}", labels.len(), features.shape()));
    }
    let mut out = Vec::with_capacity(12 + features.numel() * 8 + labels.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit u32")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("bad feature-dump magic".into()));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let values = r.f64s(n * d)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after feature dump".into()));
    }
    Ok((Tensor::new(vec![n, d], values)?, labels))
}

pub fn write_features(path: &Path, features: &Tensor, labels: &[usize]) -> Result<()> {
    std::fs::write(path, encode_features(features, labels)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shares_follow_weights() {
        assert_eq!(domain_shares(100, 1), vec![100]);
        assert_eq!(domain_shares(60, 3), vec![30, 20, 10]);
        let s = domain_shares(7, 3);
        assert_eq!(s.iter().sum::<usize>(), 7);
        assert!(s[0] >= s[1] && s[1] >= s[2]);
    }

    #[test]
    fn domain_transform_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = DomainTransform::sample(7, 1.0, 2.0, &mut rng);
        let mut a = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0, -2.0];
        let mut b = vec![0.0, 1.0, 1.0, -0.5, 2.0, 1.0, 0.0];
        let d0: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        t.apply(&mut a);
        t.apply(&mut b);
        let d1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let ds = generate_synthetic(&SyntheticSpec { samples_per_class: 10, ..Default::default() }).unwrap();
        let (a, b) = ds.stratified_split(0.2, 1);
        assert_eq!(a.len() + b.len(), ds.len());
        assert_eq!(b.len(), 16);
        assert_eq!(a.classes(), ds.classes());
    }
}
