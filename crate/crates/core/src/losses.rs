//! Training objectives and their gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct inputs (logits, embeddings or parameters); the model's
//! [`backward`](crate::model::backward) takes it from there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::GlobalMemory;
use crate::model::{dot, ParameterVector};

/// Distance used by the memory rectification loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MrbVariant {
    #[default]
    Cosine,
    Euclidean,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_mrb: f64,
    pub mrb_variant: MrbVariant,
    pub circle_margin: f64,
    pub circle_gamma: f64,
    pub prox_mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mrb: 1.0,
            mrb_variant: MrbVariant::Cosine,
            circle_margin: 0.25,
            circle_gamma: 64.0,
            prox_mu: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_mrb.is_finite() || self.lambda_mrb < 0.0 {
            return Err(Error::Config(format!("lambda_mrb must be >= 0, got {}", self.lambda_mrb)));
        }
        if !(self.circle_margin > 0.0 && self.circle_margin < 1.0) {
            return Err(Error::Config(format!(
                "circle_margin must lie in (0, 1), got {}",
                self.circle_margin
            )));
        }
        if !self.circle_gamma.is_finite() || self.circle_gamma <= 0.0 {
            return Err(Error::Config(format!("circle_gamma must be > 0, got {}", self.circle_gamma)));
        }
        if !self.prox_mu.is_finite() || self.prox_mu < 0.0 {
            return Err(Error::Config(format!("prox_mu must be >= 0, got {}", self.prox_mu)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to each row of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

impl BatchLoss {
    /// Zero value and gradients for `rows` samples of width `dim`.
    pub fn zero(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![vec![0.0; dim]; rows],
        }
    }
}

/// Largest allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

fn check_unit_norm(embeddings: &[Vec<f64>]) -> Result<()> {
    for (i, z) in embeddings.iter().enumerate() {
        let n = dot(z, z).sqrt();
        if (n - 1.0).abs().is_nan() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Input(format!(
                "embedding {i} is not unit norm (norm {n})"
            )));
        }
    }
    Ok(())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy.
pub fn identity_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<BatchLoss> {
    if logits.is_empty() {
        return Err(Error::Input("identity loss on an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Input(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let lse = log_sum_exp(row);
        // ln(1 + sum_{j != y} exp(l_j - l_y)) keeps precision when the target dominates
        let others: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, l)| (l - row[y]).exp())
            .sum();
        value += if others.is_finite() { others.ln_1p() } else { lse - row[y] };
        let mut g: Vec<f64> = row.iter().map(|l| (l - lse).exp() / n).collect();
        g[y] -= 1.0 / n;
        grad.push(g);
    }
    Ok(BatchLoss {
        value: value / n,
        grad,
    })
}

/// Circle loss over precomputed similarity sets.
///
/// Returns the loss and its derivative with respect to each positive and
/// each negative similarity. The re-weighting factors are differentiated
/// through, so the returned derivatives are those of the stated function.
pub fn circle_loss_pairs(
    positives: &[f64],
    negatives: &[f64],
    margin: f64,
    gamma: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    if positives.is_empty() || negatives.is_empty() {
        return (0.0, vec![0.0; positives.len()], vec![0.0; negatives.len()]);
    }
    // exponent_p = -γ·[1+m-s]₊·(s-(1-m)),  exponent_n = γ·[s+m]₊·(s-m)
    let pos_exp: Vec<f64> = positives
        .iter()
        .map(|&s| -gamma * (1.0 + margin - s).max(0.0) * (s - (1.0 - margin)))
        .collect();
    let neg_exp: Vec<f64> = negatives
        .iter()
        .map(|&s| gamma * (s + margin).max(0.0) * (s - margin))
        .collect();
    let lse_p = log_sum_exp(&pos_exp);
    let lse_n = log_sum_exp(&neg_exp);
    let t = lse_p + lse_n;
    // softplus(t) = log(1 + e^t)
    let value = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    let sigma = 1.0 / (1.0 + (-t).exp());

    let d_pos = positives
        .iter()
        .zip(&pos_exp)
        .map(|(&s, &e)| {
            let slope = if 1.0 + margin - s > 0.0 { -2.0 * gamma * (1.0 - s) } else { 0.0 };
            sigma * (e - lse_p).exp() * slope
        })
        .collect();
    let d_neg = negatives
        .iter()
        .zip(&neg_exp)
        .map(|(&s, &e)| {
            let slope = if s + margin > 0.0 { 2.0 * gamma * s } else { 0.0 };
            sigma * (e - lse_n).exp() * slope
        })
        .collect();
    (value, d_pos, d_neg)
}

/// Gradient of cos(a, b) with respect to `a`.
fn cosine_and_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let s = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| (y / nb - s * x / na) / na)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / na - s * y / nb) / nb)
        .collect();
    (s, ga, gb)
}

/// Pairwise circle loss over all within-batch pairs.
pub fn circle_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    margin: f64,
    gamma: f64,
) -> Result<BatchLoss> {
    if embeddings.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.len() < 2 {
        return Err(Error::Input("circle loss needs at least two samples".into()));
    }
    check_unit_norm(embeddings)?;
    let dim = embeddings[0].len();

    struct Pair {
        i: usize,
        j: usize,
        gi: Vec<f64>,
        gj: Vec<f64>,
    }
    let mut pos_pairs = Vec::new();
    let mut neg_pairs = Vec::new();
    let (mut pos_s, mut neg_s) = (Vec::new(), Vec::new());
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let (s, gi, gj) = cosine_and_grads(&embeddings[i], &embeddings[j]);
            let pair = Pair { i, j, gi, gj };
            if labels[i] == labels[j] {
                pos_s.push(s);
                pos_pairs.push(pair);
            } else {
                neg_s.push(s);
                neg_pairs.push(pair);
            }
        }
    }
    let mut out = BatchLoss::zero(embeddings.len(), dim);
    if pos_s.is_empty() || neg_s.is_empty() {
        return Ok(out);
    }
    let (value, d_pos, d_neg) = circle_loss_pairs(&pos_s, &neg_s, margin, gamma);
    out.value = value;
    for (pairs, ds) in [(&pos_pairs, &d_pos), (&neg_pairs, &d_neg)] {
        for (pair, &d) in pairs.iter().zip(ds.iter()) {
            if d == 0.0 {
                continue;
            }
            for k in 0..dim {
                out.grad[pair.i][k] += d * pair.gi[k];
                out.grad[pair.j][k] += d * pair.gj[k];
            }
        }
    }
    Ok(out)
}

/// Memory rectification loss: pulls each embedding towards the previous
/// round's global center of its identity.
///
/// Round 1 has no global memory yet and contributes zero. Samples whose
/// identity has no global center are skipped and excluded from the mean.
pub fn mrb_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    global_memory: &GlobalMemory,
    variant: MrbVariant,
    epoch: usize,
) -> Result<BatchLoss> {
    if epoch == 0 {
        return Err(Error::Input("epochs are numbered from 1".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings.first().map_or(0, |z| z.len());
    let mut out = BatchLoss::zero(embeddings.len(), dim);
    if epoch == 1 {
        return Ok(out);
    }
    if global_memory.is_empty() {
        return Err(Error::State(format!(
            "global memory is empty at epoch {epoch}"
        )));
    }
    check_unit_norm(embeddings)?;

    let included: Vec<(usize, &Vec<f64>)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| global_memory.center(*y).map(|c| (i, c)))
        .collect();
    if included.is_empty() {
        return Ok(out);
    }
    let n = included.len() as f64;
    for (i, center) in included {
        let z = &embeddings[i];
        if center.len() != z.len() {
            return Err(Error::State(format!(
                "global center dimension {} does not match embedding dimension {}",
                center.len(),
                z.len()
            )));
        }
        let cn = dot(center, center).sqrt();
        let unit_center: Vec<f64> = center.iter().map(|c| c / cn.max(f64::MIN_POSITIVE)).collect();

        let (cos_weight, euc_weight) = match variant {
            MrbVariant::Cosine => (1.0, 0.0),
            MrbVariant::Euclidean => (0.0, 1.0),
            MrbVariant::Mixed => (0.5, 0.5),
        };
        if cos_weight > 0.0 {
            let (s, gz, _) = cosine_and_grads(z, &unit_center);
            out.value += cos_weight * (1.0 - s) / n;
            for (g, d) in out.grad[i].iter_mut().zip(gz) {
                *g -= cos_weight * d / n;
            }
        }
        if euc_weight > 0.0 {
            let mut sq = 0.0;
            for ((g, zv), cv) in out.grad[i].iter_mut().zip(z).zip(&unit_center) {
                let d = zv - cv;
                sq += d * d;
                *g += euc_weight * 2.0 * d / n;
            }
            out.value += euc_weight * sq / n;
        }
    }
    Ok(out)
}

/// FedProx proximal term `(mu/2)·|local - global|²` and its gradient.
pub fn proximal_term(
    local: &ParameterVector,
    global_ref: &ParameterVector,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    if local.len() != global_ref.len() {
        return Err(Error::Input(format!(
            "parameter length mismatch: {} vs {}",
            local.len(),
            global_ref.len()
        )));
    }
    let diff: Vec<f64> = local
        .values
        .iter()
        .zip(&global_ref.values)
        .map(|(a, b)| a - b)
        .collect();
    let value = 0.5 * mu * dot(&diff, &diff);
    let grad = diff.into_iter().map(|d| mu * d).collect();
    Ok((value, grad))
}

/// Per-term values of one batch objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub id: f64,
    pub cir: f64,
    pub mrb: f64,
    pub prox: f64,
}

/// Coefficients applied to each term's gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub id: f64,
    pub cir: f64,
    pub mrb: f64,
    pub prox: f64,
}

/// `L_id + L_cir + λ·L_mrb`, plus the proximal term when `prox_mu > 0`.
///
/// The returned weights are what the caller must scale each part's gradient
/// by so that the summed gradient is the gradient of the returned value.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<(f64, LossWeights)> {
    for (name, v) in [("id", parts.id), ("cir", parts.cir), ("mrb", parts.mrb), ("prox", parts.prox)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
        }
    }
    let prox = if cfg.prox_mu > 0.0 { 1.0 } else { 0.0 };
    let weights = LossWeights {
        id: 1.0,
        cir: 1.0,
        mrb: cfg.lambda_mrb,
        prox,
    };
    let value = parts.id + parts.cir + cfg.lambda_mrb * parts.mrb + prox * parts.prox;
    Ok((value, weights))
}
