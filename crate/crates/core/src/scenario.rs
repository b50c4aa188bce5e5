//! Class-, data- and domain-incremental task streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "class")]
    ClassInc,
    #[serde(alias = "data")]
    DataInc,
    #[serde(alias = "domain")]
    DomainInc,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class" | "class_inc" => Some(Regime::ClassInc),
            "data" | "data_inc" => Some(Regime::DataInc),
            "domain" | "domain_inc" => Some(Regime::DomainInc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::ClassInc => "class_inc",
            Regime::DataInc => "data_inc",
            Regime::DomainInc => "domain_inc",
        }
    }
}

/// How the tasks were cut, so the same cut can be applied to another split.
#[derive(Clone, Debug, PartialEq)]
pub enum Partition {
    Classes(Vec<Vec<usize>>),
    /// Sample indices per task (data-incremental).
    Samples(Vec<Vec<usize>>),
    Domains(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub regime: Regime,
    pub tasks: Vec<LabeledDataset>,
    /// Classes present in each task.
    pub class_sets: Vec<Vec<usize>>,
    pub partition: Partition,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Applies the class/domain cut of this stream to another dataset (e.g.
    /// the held-out evaluation split). Data-incremental streams re-chunk the
    /// other dataset with `seed`.
    pub fn cut(&self, other: &LabeledDataset, seed: u64) -> Result<Vec<LabeledDataset>> {
        match &self.partition {
            Partition::Classes(sets) => Ok(sets
                .iter()
                .map(|set| {
                    let idx: Vec<usize> = (0..other.len()).filter(|&i| set.contains(&other.labels[i])).collect();
                    other.subset(&idx)
                })
                .collect()),
            Partition::Samples(_) => Ok(split_data_incremental(other, self.len(), seed)?.tasks),
            Partition::Domains(order) => {
                let ids = other.domain_ids.as_ref().ok_or_else(|| Error::config("data.n_domains", "missing domain ids"))?;
                Ok(order
                    .iter()
                    .map(|&d| {
                        let idx: Vec<usize> = (0..other.len()).filter(|&i| ids[i] == d).collect();
                        other.subset(&idx)
                    })
                    .collect())
            }
        }
    }
}

fn check_t(t: usize, available: usize, what: &str) -> Result<()> {
    if t == 0 {
        return Err(Error::config("scenario.tasks", "must be at least 1"));
    }
    if t > available {
        return Err(Error::config("scenario.tasks", format!("{t} tasks but only {available} {what}")));
    }
    Ok(())
}

/// Near-equal contiguous chunks; the first `n % t` chunks get one extra item.
fn chunks<T: Clone>(items: &[T], t: usize) -> Vec<Vec<T>> {
    let (base, extra) = (items.len() / t, items.len() % t);
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for k in 0..t {
        let len = base + usize::from(k < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

pub fn split_class_incremental(ds: &LabeledDataset, t: usize, seed: u64) -> Result<TaskStream> {
    let mut classes = ds.classes();
    check_t(t, classes.len(), "classes")?;
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sets = chunks(&classes, t);
    for s in &mut sets {
        s.sort_unstable();
    }
    let tasks = sets
        .iter()
        .map(|set| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| set.contains(&ds.labels[i])).collect();
            ds.subset(&idx)
        })
        .collect();
    Ok(TaskStream { regime: Regime::ClassInc, tasks, class_sets: sets.clone(), partition: Partition::Classes(sets) })
}

pub fn split_data_incremental(ds: &LabeledDataset, t: usize, seed: u64) -> Result<TaskStream> {
    check_t(t, ds.len(), "samples")?;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = chunks(&idx, t);
    for p in &mut parts {
        p.sort_unstable();
    }
    let tasks: Vec<LabeledDataset> = parts.iter().map(|p| ds.subset(p)).collect();
    let class_sets = tasks.iter().map(|d| d.classes()).collect();
    Ok(TaskStream { regime: Regime::DataInc, tasks, class_sets, partition: Partition::Samples(parts) })
}

/// One task per domain, larger domains first (ties by domain id). The seed
/// is accepted for interface symmetry; the order is deterministic.
pub fn split_domain_incremental(ds: &LabeledDataset, _seed: u64) -> Result<TaskStream> {
    let ids = ds.domain_ids.as_ref().ok_or_else(|| Error::config("data.n_domains", "dataset has no domain ids"))?;
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    for &d in ids {
        *counts.entry(d).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::config("data", "dataset is empty"));
    }
    let mut order: Vec<(usize, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let domains: Vec<usize> = order.into_iter().map(|(d, _)| d).collect();
    let tasks: Vec<LabeledDataset> = domains
        .iter()
        .map(|&d| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ids[i] == d).collect();
            ds.subset(&idx)
        })
        .collect();
    let class_sets = tasks.iter().map(|d| d.classes()).collect();
    Ok(TaskStream { regime: Regime::DomainInc, tasks, class_sets, partition: Partition::Domains(domains) })
}

pub fn split(ds: &LabeledDataset, regime: Regime, t: usize, seed: u64) -> Result<TaskStream> {
    match regime {
        Regime::ClassInc => split_class_incremental(ds, t, seed),
        Regime::DataInc => split_data_incremental(ds, t, seed),
        Regime::DomainInc => split_domain_incremental(ds, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_sizes() {
        let c = chunks(&(0..7).collect::<Vec<_>>(), 3);
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }
}
