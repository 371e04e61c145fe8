use rand::seq::index;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Record indices into one client's dataset, with their identity labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Identity-only PK sampling: `p` distinct identities, then `k` images of
/// each regardless of modality. Images are drawn without replacement when an
/// identity has at least `k`, otherwise uniformly with replacement.
pub fn pk_sample<R: Rng + ?Sized>(client: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    let by_identity: Vec<(usize, Vec<usize>)> = client.indices_by_identity().into_iter().collect();
    if by_identity.len() < p {
        return Err(Error::Sampling(format!(
            "dataset {} has {} identities, fewer than P = {p}",
            client.name,
            by_identity.len()
        )));
    }
    let mut batch = Batch {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
    };
    for pick in index::sample(rng, by_identity.len(), p) {
        let (identity, members) = &by_identity[pick];
        if members.len() >= k {
            for j in index::sample(rng, members.len(), k) {
                batch.indices.push(members[j]);
            }
        } else {
            for _ in 0..k {
                batch.indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        batch.labels.extend(std::iter::repeat_n(*identity, k));
    }
    Ok(batch)
}
