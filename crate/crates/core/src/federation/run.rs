use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{client_train_epoch, ClientState, ClientUpload, LossStats};
use super::server::{Broadcast, Server, WeightedAverage};
use super::{AggregationKind, FederationConfig, LocalRegularizer};
use crate::data::{PartitionSpec, Protocol};
use crate::error::{Error, Result};
use crate::memory::GlobalMemory;
use crate::model::{init_params, EncoderConfig, ParameterVector};

/// Order in which clients of a round are trained. Results do not depend on it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    Parallel,
    /// Sequential in the given order of client indices.
    Order(Vec<usize>),
}

/// Called after each aggregated round.
pub trait RoundObserver {
    fn on_round(&mut self, report: &RoundReport, global: &Broadcast) -> Result<()>;
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Overrides `FederationConfig::parallel` when set.
    pub schedule: Option<Schedule>,
    pub observer: Option<&'a mut dyn RoundObserver>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub num_samples: usize,
    pub base_version: usize,
    pub stats: LossStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub epoch: usize,
    pub clients: Vec<ClientRoundStats>,
    pub global_param_norm: f64,
    /// Identities held by the global memory after this round.
    pub memory_coverage: usize,
}

impl RoundReport {
    pub const CSV_HEADER: &'static str =
        "epoch,client_id,num_samples,base_version,batches,loss_id,loss_cir,loss_mrb,loss_total,global_param_norm,memory_coverage";

    /// One delimited row per client, in `CSV_HEADER` order.
    pub fn csv_rows(&self) -> Vec<String> {
        self.clients
            .iter()
            .map(|c| {
                format!(
                    "{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                    self.epoch,
                    c.client_id,
                    c.num_samples,
                    c.base_version,
                    c.stats.batches,
                    c.stats.id,
                    c.stats.cir,
                    c.stats.mrb,
                    c.stats.total,
                    self.global_param_norm,
                    self.memory_coverage
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOutcome {
    pub params: ParameterVector,
    pub memory: GlobalMemory,
    pub reports: Vec<RoundReport>,
}

/// Seeded initial model sized for the partition's images and label space.
pub fn initial_model(partition: &PartitionSpec, cfg: &FederationConfig) -> Result<ParameterVector> {
    let first = partition
        .clients
        .first()
        .ok_or_else(|| Error::Config("partition has no clients".into()))?;
    let (height, width) = first.image_shape();
    if let Some(c) = partition.clients.iter().find(|c| c.image_shape() != (height, width)) {
        return Err(Error::Config(format!(
            "client {} has images of shape {:?}, expected {:?}",
            c.name,
            c.image_shape(),
            (height, width)
        )));
    }
    let enc = EncoderConfig::for_image(height, width, cfg.hidden_dims.clone(), cfg.embed_dim, partition.num_classes);
    Ok(init_params(&enc, cfg.seed)?.params)
}

fn make_clients(partition: &PartitionSpec, initial: &ParameterVector, seed: u64) -> Vec<ClientState> {
    partition
        .clients
        .iter()
        .enumerate()
        .map(|(i, ds)| ClientState::new(i, Arc::new(ds.clone()), initial, seed))
        .collect()
}

fn report(epoch: usize, uploads: &[ClientUpload], params: &ParameterVector, memory: &GlobalMemory) -> RoundReport {
    RoundReport {
        epoch,
        clients: uploads
            .iter()
            .map(|u| ClientRoundStats {
                client_id: u.client_id,
                num_samples: u.num_samples,
                base_version: u.base_version,
                stats: u.stats,
            })
            .collect(),
        global_param_norm: params.norm(),
        memory_coverage: memory.len(),
    }
}

fn train_round(
    clients: &mut [ClientState],
    global: &Broadcast,
    cfg: &FederationConfig,
    schedule: &Schedule,
) -> Result<Vec<ClientUpload>> {
    let results: Vec<Result<ClientUpload>> = match schedule {
        Schedule::Sequential => clients.iter_mut().map(|c| client_train_epoch(c, global, cfg)).collect(),
        Schedule::Parallel => clients.par_iter_mut().map(|c| client_train_epoch(c, global, cfg)).collect(),
        Schedule::Order(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..clients.len()).collect::<Vec<_>>() {
                return Err(Error::Config("schedule order is not a permutation of the clients".into()));
            }
            let mut slots: Vec<Option<Result<ClientUpload>>> = (0..clients.len()).map(|_| None).collect();
            for &i in order {
                slots[i] = Some(client_train_epoch(&mut clients[i], global, cfg));
            }
            slots.into_iter().map(|s| s.expect("every client scheduled")).collect()
        }
    };
    results.into_iter().collect()
}

/// Federated training over the clients of a CI or EI partition.
pub fn run_dppt(partition: &PartitionSpec, cfg: &FederationConfig) -> Result<TrainingOutcome> {
    run_dppt_with(partition, cfg, RunOptions::default())
}

pub fn run_dppt_with(partition: &PartitionSpec, cfg: &FederationConfig, options: RunOptions<'_>) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if partition.protocol == Protocol::Es {
        return Err(Error::Config("entity sharing trains centrally; use run_erm".into()));
    }
    if partition.protocol != cfg.protocol {
        return Err(Error::Config(format!(
            "partition built for {} but the config selects {}",
            partition.protocol, cfg.protocol
        )));
    }
    let initial = initial_model(partition, cfg)?;
    let AggregationKind::WeightedAvg = cfg.aggregation;
    let mut server = Server::new(initial.clone(), Box::new(WeightedAverage));
    let mut clients = make_clients(partition, &initial, cfg.seed);
    let schedule = options.schedule.unwrap_or(if cfg.parallel { Schedule::Parallel } else { Schedule::Sequential });
    let mut observer = options.observer;
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let global = server.broadcast();
        let round = |source| Error::Round {
            round: epoch,
            source: Box::new(source),
        };
        let uploads = train_round(&mut clients, &global, cfg, &schedule).map_err(round)?;
        server.aggregate(&uploads).map_err(round)?;
        let r = report(epoch, &uploads, server.params(), server.memory());
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_round(&r, &server.broadcast())?;
        }
        reports.push(r);
    }
    Ok(TrainingOutcome {
        params: server.params().clone(),
        memory: server.memory().clone(),
        reports,
    })
}

/// Centralized baseline on the merged client of an ES partition: identity
/// and circle losses only, no memory term and no parameter exchange.
pub fn run_erm(partition: &PartitionSpec, cfg: &FederationConfig, mut observer: Option<&mut dyn RoundObserver>) -> Result<TrainingOutcome> {
    if partition.protocol != Protocol::Es || cfg.protocol != Protocol::Es {
        return Err(Error::Config("run_erm needs an entity-sharing partition and config".into()));
    }
    if partition.clients.len() != 1 {
        return Err(Error::Config(format!(
            "entity sharing expects one merged client, got {}",
            partition.clients.len()
        )));
    }
    let mut cfg = cfg.clone();
    cfg.loss.lambda_mrb = 0.0;
    cfg.local_regularizer = LocalRegularizer::None;
    cfg.validate()?;
    let initial = initial_model(partition, &cfg)?;
    let mut client = make_clients(partition, &initial, cfg.seed).remove(0);
    let mut params = initial;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let global = Broadcast {
            version: epoch - 1,
            params,
            memory: GlobalMemory::empty(),
        };
        let upload = client_train_epoch(&mut client, &global, &cfg).map_err(|e| Error::Round {
            round: epoch,
            source: Box::new(e),
        })?;
        params = upload.params.clone();
        let r = report(epoch, std::slice::from_ref(&upload), &params, &GlobalMemory::empty());
        if let Some(obs) = observer.as_deref_mut() {
            let view = Broadcast {
                version: epoch,
                params: params.clone(),
                memory: GlobalMemory::empty(),
            };
            obs.on_round(&r, &view)?;
        }
        reports.push(r);
    }
    Ok(TrainingOutcome {
        params,
        memory: GlobalMemory::empty(),
        reports,
    })
}
