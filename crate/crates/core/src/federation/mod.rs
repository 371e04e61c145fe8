//! Federated training rounds and the centralized baseline.
//!
//! Each round every client downloads the global model and memory, trains
//! locally, and uploads parameters, rectified class centers and loss
//! statistics. The server averages parameters weighted by client dataset
//! size and averages centers over the clients holding each identity.

mod client;
mod run;
mod server;

pub use client::{client_train_epoch, ClientState, ClientUpload, LossStats};
pub use run::{initial_model, run_dppt, run_dppt_with, run_erm, ClientRoundStats, RoundObserver, RoundReport, RunOptions, Schedule, TrainingOutcome};
pub use server::{aggregate_params, AggregationStrategy, Broadcast, Server, WeightedAverage, WireSafe};

use serde::{Deserialize, Serialize};

use crate::data::{Augmentation, Protocol, DEFAULT_AUG_PROB};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    #[default]
    WeightedAvg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalRegularizer {
    #[default]
    None,
    /// Penalizes distance to the downloaded global model by `loss.prox_mu`.
    Proximal,
}

/// How a client builds the memory it uploads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryUpdate {
    /// One forward pass over all training records after the last batch.
    #[default]
    EndOfEpoch,
    /// The embeddings computed during the epoch's batches.
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub protocol: Protocol,
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity in a batch.
    pub k_samples: usize,
    /// Local steps per epoch; `None` means `ceil(N_m / (p · k_samples))`.
    pub batches_per_epoch: Option<usize>,
    pub top_k: usize,
    pub max_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aggregation: AggregationKind,
    pub local_regularizer: LocalRegularizer,
    pub memory_update: MemoryUpdate,
    pub augmentation: Augmentation,
    pub aug_prob: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Train clients of a round on the rayon pool.
    pub parallel: bool,
}

impl FederationConfig {
    /// Defaults for `protocol`: 50 epochs for camera independence, 30 otherwise.
    pub fn for_protocol(protocol: Protocol) -> Self {
        Self {
            protocol,
            epochs: if protocol == Protocol::Ci { 50 } else { 30 },
            p: 8,
            k_samples: 8,
            batches_per_epoch: None,
            top_k: 4,
            max_lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            aggregation: AggregationKind::WeightedAvg,
            local_regularizer: LocalRegularizer::None,
            memory_update: MemoryUpdate::EndOfEpoch,
            augmentation: Augmentation::Channel,
            aug_prob: DEFAULT_AUG_PROB,
            hidden_dims: vec![64],
            embed_dim: 32,
            loss: LossConfig::default(),
            seed: 0,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("p", self.p),
            ("k_samples", self.k_samples),
            ("top_k", self.top_k),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::Config(format!("aug_prob must lie in [0, 1], got {}", self.aug_prob)));
        }
        if self.local_regularizer == LocalRegularizer::Proximal && self.loss.prox_mu <= 0.0 {
            return Err(Error::Config("the proximal regularizer needs loss.prox_mu > 0".into()));
        }
        Ok(())
    }

    /// Local steps per epoch for a client holding `records` samples.
    pub fn batches_for(&self, records: usize) -> usize {
        self.batches_per_epoch
            .unwrap_or_else(|| records.div_ceil(self.p * self.k_samples))
    }

    /// Proximal weight actually used by local training.
    pub(crate) fn effective_prox_mu(&self) -> f64 {
        match self.local_regularizer {
            LocalRegularizer::None => 0.0,
            LocalRegularizer::Proximal => self.loss.prox_mu,
        }
    }
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self::for_protocol(Protocol::Ci)
    }
}
