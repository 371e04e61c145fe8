//! Memory rectification bank.
//!
//! Each client summarizes its identities by class centers, rectified by
//! averaging the `K` embeddings closest to the plain mean. The server then
//! averages the rectified centers of every identity over exactly the clients
//! that hold it. An identity no client holds has no entry at all: presence is
//! a map key, never a zero-vector sentinel.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Plain per-identity means plus the sample indices behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    pub client_id: usize,
    pub centers: BTreeMap<usize, Vec<f64>>,
    /// Indices into the embedding list, ascending.
    pub members: BTreeMap<usize, Vec<usize>>,
}

/// Rectified centers uploaded by one client.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMemory {
    pub client_id: usize,
    pub centers: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

impl LocalMemory {
    pub fn empty(client_id: usize) -> Self {
        Self {
            client_id,
            centers: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.centers.values().next().map(Vec::len)
    }
}

/// Server-side per-identity centers averaged across clients.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMemory {
    centers: BTreeMap<usize, Vec<f64>>,
    contributor_counts: BTreeMap<usize, usize>,
    epoch: usize,
}

impl GlobalMemory {
    /// The memory before the first aggregation.
    pub fn empty() -> Self {
        Self {
            centers: BTreeMap::new(),
            contributor_counts: BTreeMap::new(),
            epoch: 0,
        }
    }

    pub fn new(
        centers: BTreeMap<usize, Vec<f64>>,
        contributor_counts: BTreeMap<usize, usize>,
        epoch: usize,
    ) -> Result<Self> {
        if centers.keys().ne(contributor_counts.keys()) {
            return Err(Error::State("center and contributor identities differ".into()));
        }
        if contributor_counts.values().any(|&c| c == 0) {
            return Err(Error::State("stored identity with zero contributors".into()));
        }
        let mut dims = centers.values().map(Vec::len);
        if let Some(d) = dims.next() {
            if dims.any(|x| x != d) {
                return Err(Error::State("global centers have mixed dimensions".into()));
            }
        }
        Ok(Self {
            centers,
            contributor_counts,
            epoch,
        })
    }

    pub fn center(&self, identity: usize) -> Option<&Vec<f64>> {
        self.centers.get(&identity)
    }

    pub fn centers(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.centers
    }

    pub fn contributor_counts(&self) -> &BTreeMap<usize, usize> {
        &self.contributor_counts
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Per-identity mean of the given embeddings.
pub fn class_means(embeddings: &[(Vec<f64>, usize)], client_id: usize) -> Result<ClassMeans> {
    if embeddings.is_empty() {
        return Err(Error::Input("class means of an empty embedding set".into()));
    }
    let dim = embeddings[0].0.len();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (z, y)) in embeddings.iter().enumerate() {
        if z.len() != dim {
            return Err(Error::Input(format!(
                "embedding {i} has dimension {} instead of {dim}",
                z.len()
            )));
        }
        members.entry(*y).or_default().push(i);
    }
    let centers = members
        .iter()
        .map(|(&k, idx)| (k, mean_of(idx.iter().map(|&i| embeddings[i].0.as_slice()), dim)))
        .collect();
    Ok(ClassMeans {
        client_id,
        centers,
        members,
    })
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    sum
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Replaces each center by the mean of its `k_top` nearest members when the
/// identity has at least `k_top` samples. Distance ties go to the lower
/// sample index.
pub fn rectify_topk(
    means: &ClassMeans,
    embeddings: &[(Vec<f64>, usize)],
    k_top: usize,
) -> Result<LocalMemory> {
    if k_top < 1 {
        return Err(Error::Config("top-K must be at least 1".into()));
    }
    let mut memory = LocalMemory::empty(means.client_id);
    for (&k, center) in &means.centers {
        let idx = means
            .members
            .get(&k)
            .ok_or_else(|| Error::Input(format!("no members recorded for identity {k}")))?;
        if idx.iter().any(|&i| i >= embeddings.len() || embeddings[i].1 != k) {
            return Err(Error::Input(format!(
                "class means for identity {k} were not built from these embeddings"
            )));
        }
        let rectified = if idx.len() < k_top {
            center.clone()
        } else {
            let mut ranked: Vec<(f64, usize)> = idx
                .iter()
                .map(|&i| (squared_distance(&embeddings[i].0, center), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            mean_of(
                ranked[..k_top].iter().map(|&(_, i)| embeddings[i].0.as_slice()),
                center.len(),
            )
        };
        if rectified.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite center for identity {k}")));
        }
        memory.centers.insert(k, rectified);
        memory.counts.insert(k, idx.len());
    }
    Ok(memory)
}

/// Class means followed by top-K rectification.
pub fn build_local_memory(
    embeddings: &[(Vec<f64>, usize)],
    client_id: usize,
    k_top: usize,
) -> Result<LocalMemory> {
    let means = class_means(embeddings, client_id)?;
    rectify_topk(&means, embeddings, k_top)
}

/// Masked mean of the local centers of each identity over the clients that
/// hold it.
pub fn aggregate_global(locals: &[LocalMemory], epoch: usize) -> Result<GlobalMemory> {
    if locals.is_empty() {
        return Err(Error::State("no local memories to aggregate".into()));
    }
    let mut dim = None;
    for local in locals {
        for (k, c) in &local.centers {
            match dim {
                None => dim = Some(c.len()),
                Some(d) if d != c.len() => {
                    return Err(Error::State(format!(
                        "client {} center for identity {k} has dimension {} instead of {d}",
                        local.client_id,
                        c.len()
                    )))
                }
                _ => {}
            }
        }
    }
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    // accumulate in client-id order so the result does not depend on upload order
    let mut ordered: Vec<&LocalMemory> = locals.iter().collect();
    ordered.sort_by_key(|m| m.client_id);
    for local in ordered {
        for (&k, c) in &local.centers {
            let sum = sums.entry(k).or_insert_with(|| vec![0.0; c.len()]);
            for (s, x) in sum.iter_mut().zip(c) {
                *s += x;
            }
            *counts.entry(k).or_default() += 1;
        }
    }
    for (k, sum) in sums.iter_mut() {
        let n = counts[k] as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    GlobalMemory::new(sums, counts, epoch)
}
