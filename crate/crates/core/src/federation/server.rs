//! Server side of a round. Everything here is written against uploaded
//! artifacts only: parameter vectors, local memories and scalar statistics.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::client::{ClientUpload, LossStats};
use crate::error::{Error, Result};
use crate::memory::{aggregate_global, GlobalMemory, LocalMemory};
use crate::model::ParameterVector;

mod sealed {
    pub trait Sealed {}
}

/// Types allowed to cross the client/server boundary. Sealed: the set is
/// fixed by this crate.
pub trait WireSafe: sealed::Sealed {}

macro_rules! wire_safe {
    ($($t:ty),*) => {
        $(impl sealed::Sealed for $t {} impl WireSafe for $t {})*
    };
}

wire_safe!(ParameterVector, LocalMemory, GlobalMemory, LossStats, ClientUpload, Broadcast, usize, u64, f64);

impl<T: WireSafe> sealed::Sealed for [T] {}
impl<T: WireSafe> WireSafe for [T] {}
impl<T: WireSafe> sealed::Sealed for Vec<T> {}
impl<T: WireSafe> WireSafe for Vec<T> {}
impl<T: WireSafe + ?Sized> sealed::Sealed for &T {}
impl<T: WireSafe + ?Sized> WireSafe for &T {}
impl<A: WireSafe, B: WireSafe> sealed::Sealed for (A, B) {}
impl<A: WireSafe, B: WireSafe> WireSafe for (A, B) {}

/// What every client downloads at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    /// Rounds aggregated so far; 0 for the initial model.
    pub version: usize,
    pub params: ParameterVector,
    pub memory: GlobalMemory,
}

/// Combines client parameters into the next global model.
pub trait AggregationStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// `locals` pairs each client's parameters with its sample count;
    /// `previous` is the global model the round started from.
    fn aggregate(&self, locals: &[(ParameterVector, usize)], previous: &ParameterVector) -> Result<ParameterVector>;
}

/// Sample-count weighted average.
#[derive(Clone, Copy, Debug, Default)]
pub struct WeightedAverage;

impl AggregationStrategy for WeightedAverage {
    fn name(&self) -> &'static str {
        "weighted_avg"
    }

    fn aggregate(&self, locals: &[(ParameterVector, usize)], _previous: &ParameterVector) -> Result<ParameterVector> {
        aggregate_params(locals)
    }
}

fn canonical(a: &(ParameterVector, usize), b: &(ParameterVector, usize)) -> Ordering {
    a.1.cmp(&b.1).then_with(|| {
        a.0.values
            .iter()
            .zip(&b.0.values)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// `Σ (N_m / N) · θ_m` in 64-bit arithmetic.
///
/// Inputs are put in a canonical order first and the sum is taken as an
/// offset from the first vector, so the result does not depend on client
/// order and identical inputs come back unchanged.
pub fn aggregate_params(locals: &[(ParameterVector, usize)]) -> Result<ParameterVector> {
    let first = locals
        .first()
        .ok_or_else(|| Error::State("no client parameters to aggregate".into()))?;
    for (p, n) in locals {
        if p.layout != first.0.layout {
            return Err(Error::State("client parameter layouts differ".into()));
        }
        if *n == 0 {
            return Err(Error::State("client with zero samples in aggregation".into()));
        }
    }
    let mut order: Vec<&(ParameterVector, usize)> = locals.iter().collect();
    order.sort_by(|a, b| canonical(a, b));
    let total: f64 = locals.iter().map(|(_, n)| *n as f64).sum();
    let base = &order[0].0.values;
    let mut out = base.clone();
    for (p, n) in &order[1..] {
        let w = *n as f64 / total;
        for ((o, x), b) in out.iter_mut().zip(&p.values).zip(base) {
            *o += w * (x - b);
        }
    }
    ParameterVector::new(out, first.0.layout.clone())
}

/// Global model, global memory and their version.
pub struct Server {
    strategy: Box<dyn AggregationStrategy>,
    params: ParameterVector,
    memory: GlobalMemory,
    version: usize,
}

impl Server {
    pub fn new(initial: ParameterVector, strategy: Box<dyn AggregationStrategy>) -> Self {
        Self {
            strategy,
            params: initial,
            memory: GlobalMemory::empty(),
            version: 0,
        }
    }

    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            version: self.version,
            params: self.params.clone(),
            memory: self.memory.clone(),
        }
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn memory(&self) -> &GlobalMemory {
        &self.memory
    }

    pub fn version(&self) -> usize {
        self.version
    }

    /// Closes a round. Every upload must have started from the current
    /// version; client ids must be distinct.
    pub fn aggregate(&mut self, uploads: &[ClientUpload]) -> Result<()> {
        if uploads.is_empty() {
            return Err(Error::State("round closed without uploads".into()));
        }
        let mut ids = BTreeSet::new();
        for u in uploads {
            if u.base_version != self.version {
                return Err(Error::State(format!(
                    "client {} trained from version {} but the server is at {}",
                    u.client_id, u.base_version, self.version
                )));
            }
            if !ids.insert(u.client_id) {
                return Err(Error::State(format!("client {} uploaded twice", u.client_id)));
            }
        }
        let mut sorted: Vec<&ClientUpload> = uploads.iter().collect();
        sorted.sort_by_key(|u| u.client_id);
        let locals: Vec<(ParameterVector, usize)> = sorted.iter().map(|u| (u.params.clone(), u.num_samples)).collect();
        let memories: Vec<LocalMemory> = sorted.iter().map(|u| u.memory.clone()).collect();
        let params = self.strategy.aggregate(&locals, &self.params)?;
        let memory = aggregate_global(&memories, self.version + 1)?;
        self.params = params;
        self.memory = memory;
        self.version += 1;
        Ok(())
    }
}
