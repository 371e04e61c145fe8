use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::server::Broadcast;
use super::{FederationConfig, MemoryUpdate};
use crate::data::{normalize_input, pk_sample, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::embed_dataset;
use crate::losses::{circle_loss, BatchLoss, identity_loss, mrb_loss, proximal_term, total_loss, LossConfig, LossParts};
use crate::memory::{build_local_memory, LocalMemory};
use crate::model::{backward, forward_batch, one_cycle_lr, sgd_step, ModelState, ParameterVector};

/// Mean per-batch loss terms over one local epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub batches: usize,
    pub id: f64,
    pub cir: f64,
    pub mrb: f64,
    pub total: f64,
}

/// Private state of one client. Only [`ClientUpload`] leaves it.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ModelState,
    pub dataset: Arc<Dataset>,
    pub local_memory: LocalMemory,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// Client starting from `initial`, with random stream `client_id + 1` of
    /// `seed` (stream 0 is left to model initialization).
    pub fn new(client_id: usize, dataset: Arc<Dataset>, initial: &ParameterVector, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(client_id as u64 + 1);
        Self {
            client_id,
            model: ModelState::from_params(initial.clone()),
            dataset,
            local_memory: LocalMemory::empty(client_id),
            rng,
        }
    }
}

/// Everything a client sends to the server after a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    /// Version of the global model and memory this round started from.
    pub base_version: usize,
    pub params: ParameterVector,
    pub memory: LocalMemory,
    pub num_samples: usize,
    pub stats: LossStats,
}

/// One local epoch: download, `batches_for(N_m)` SGD steps on PK batches,
/// then rebuild the local memory. The epoch number is the broadcast
/// version plus one.
pub fn client_train_epoch(client: &mut ClientState, global: &Broadcast, cfg: &FederationConfig) -> Result<ClientUpload> {
    train_epoch(client, global, cfg).map_err(|e| Error::Client {
        client_id: client.client_id,
        source: Box::new(e),
    })
}

fn train_epoch(client: &mut ClientState, global: &Broadcast, cfg: &FederationConfig) -> Result<ClientUpload> {
    if client.model.params.layout != global.params.layout {
        return Err(Error::State("downloaded model layout differs from the local model".into()));
    }
    let epoch = global.version + 1;
    if epoch > cfg.epochs {
        return Err(Error::State(format!("epoch {epoch} beyond the configured {}", cfg.epochs)));
    }
    client.model.params = global.params.clone();

    let loss_cfg = LossConfig {
        prox_mu: cfg.effective_prox_mu(),
        ..cfg.loss.clone()
    };
    let dataset = Arc::clone(&client.dataset);
    let batches = cfg.batches_for(dataset.len());
    let total_steps = cfg.epochs * batches;
    let mut stats = LossStats::default();
    let mut streamed = Vec::new();

    for b in 0..batches {
        let batch = pk_sample(&dataset, cfg.p, cfg.k_samples, &mut client.rng)?;
        let xs = batch
            .indices
            .iter()
            .map(|&i| {
                let mut x = cfg
                    .augmentation
                    .apply(&dataset.records[i].pixels_f64(), 3, cfg.aug_prob, &mut client.rng)?;
                normalize_input(&mut x);
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = forward_batch(&client.model, &xs)?;
        let embeddings: Vec<Vec<f64>> = outputs.iter().map(|o| o.embedding.clone()).collect();
        let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();

        let id = identity_loss(&logits, &batch.labels)?;
        let cir = circle_loss(&embeddings, &batch.labels, loss_cfg.circle_margin, loss_cfg.circle_gamma)?;
        let mrb = if loss_cfg.lambda_mrb > 0.0 {
            mrb_loss(&embeddings, &batch.labels, &global.memory, loss_cfg.mrb_variant, epoch)?
        } else {
            BatchLoss::zero(embeddings.len(), cfg.embed_dim)
        };
        let prox = if loss_cfg.prox_mu > 0.0 {
            Some(proximal_term(&client.model.params, &global.params, loss_cfg.prox_mu)?)
        } else {
            None
        };
        let parts = LossParts {
            id: id.value,
            cir: cir.value,
            mrb: mrb.value,
            prox: prox.as_ref().map_or(0.0, |p| p.0),
        };
        let (total, w) = total_loss(&parts, &loss_cfg)?;

        let upstream_embeddings: Vec<Vec<f64>> = cir
            .grad
            .iter()
            .zip(&mrb.grad)
            .map(|(c, m)| c.iter().zip(m).map(|(c, m)| w.cir * c + w.mrb * m).collect())
            .collect();
        let upstream_logits: Vec<Vec<f64>> = id
            .grad
            .iter()
            .map(|g| g.iter().map(|v| w.id * v).collect())
            .collect();
        let mut grad = backward(&client.model, &outputs, &upstream_embeddings, &upstream_logits)?;
        if let Some((_, prox_grad)) = &prox {
            grad.add_scaled(prox_grad, w.prox)?;
        }
        let lr = one_cycle_lr((epoch - 1) * batches + b, total_steps, cfg.max_lr)?;
        client.model = sgd_step(&client.model, &grad, lr, cfg.momentum, cfg.weight_decay)?;

        stats.id += parts.id;
        stats.cir += parts.cir;
        stats.mrb += parts.mrb;
        stats.total += total;
        if cfg.memory_update == MemoryUpdate::Streaming {
            streamed.extend(embeddings.into_iter().zip(batch.labels));
        }
    }
    if batches > 0 {
        let n = batches as f64;
        stats = LossStats {
            batches,
            id: stats.id / n,
            cir: stats.cir / n,
            mrb: stats.mrb / n,
            total: stats.total / n,
        };
    }

    let memory_input = if cfg.memory_update == MemoryUpdate::Streaming && !streamed.is_empty() {
        streamed
    } else {
        let z = embed_dataset(&client.model.params, &dataset)?;
        z.into_iter().zip(dataset.records.iter().map(|r| r.identity)).collect()
    };
    client.local_memory = build_local_memory(&memory_input, client.client_id, cfg.top_k)?;

    Ok(ClientUpload {
        client_id: client.client_id,
        base_version: global.version,
        params: client.model.params.clone(),
        memory: client.local_memory.clone(),
        num_samples: dataset.len(),
        stats,
    })
}
