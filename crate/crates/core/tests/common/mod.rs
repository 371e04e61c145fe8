//! Independent reference implementations and checks shared by the
//! integration tests. Everything here is written from the definitions,
//! without calling the library routine it checks.

#![allow(dead_code)]

pub mod privacy;

use std::collections::BTreeMap;

use fedreid::evaluation::{cmc, m_inp, mean_ap};
use fedreid::federation::aggregate_params;
use fedreid::losses::{circle_loss, identity_loss, mrb_loss, proximal_term, total_loss, LossConfig, LossParts, MrbVariant};
use fedreid::memory::{aggregate_global, class_means, rectify_topk, GlobalMemory, LocalMemory};
use fedreid::model::{backward, forward_batch, init_params, EncoderConfig, Layout, ModelState, ParameterVector, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn flat(values: Vec<f64>) -> ParameterVector {
    let layout = Layout::from_segments(vec![Segment {
        name: "w".into(),
        rows: values.len(),
        cols: 1,
        offset: 0,
        len: values.len(),
    }])
    .unwrap();
    ParameterVector::new(values, layout).unwrap()
}

// ---------------------------------------------------------------- aggregation

/// `Σ_m (N_m / N) θ_m`, accumulated in input order.
pub fn brute_weighted_sum(locals: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let total: usize = locals.iter().map(|(_, n)| n).sum();
    let mut out = vec![0.0; locals[0].0.len()];
    for (theta, n) in locals {
        let w = *n as f64 / total as f64;
        for (o, t) in out.iter_mut().zip(theta) {
            *o += w * t;
        }
    }
    out
}

/// Max abs deviation of the library aggregate from the oracle over `cases`
/// random problems with 1..=8 clients and `dim` parameters.
pub fn aggregation_oracle_error(cases: usize, dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let clients = r.random_range(1..=8);
        let locals: Vec<(Vec<f64>, usize)> = (0..clients)
            .map(|_| {
                let theta = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
                (theta, r.random_range(1..=5000))
            })
            .collect();
        let expected = brute_weighted_sum(&locals);
        let input: Vec<(ParameterVector, usize)> = locals.iter().map(|(t, n)| (flat(t.clone()), *n)).collect();
        let got = aggregate_params(&input).unwrap();
        for (g, e) in got.values.iter().zip(&expected) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

// --------------------------------------------------------------------- memory

fn mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for r in rows {
        for (o, v) in out.iter_mut().zip(*r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

/// Rectified local centers: plain mean, then when at least `k` members exist
/// the mean of the `k` nearest members after a full stable sort by distance.
pub fn brute_local_memory(embeddings: &[(Vec<f64>, usize)], k: usize) -> BTreeMap<usize, Vec<f64>> {
    let dim = embeddings[0].0.len();
    let mut labels: Vec<usize> = embeddings.iter().map(|e| e.1).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out = BTreeMap::new();
    for y in labels {
        let members: Vec<&[f64]> = embeddings.iter().filter(|e| e.1 == y).map(|e| e.0.as_slice()).collect();
        let c = mean(&members, dim);
        if members.len() < k {
            out.insert(y, c);
            continue;
        }
        let mut by_dist: Vec<(f64, &[f64])> = members
            .iter()
            .map(|m| (m.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), *m))
            .collect();
        // stable: equal distances keep sample order
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let nearest: Vec<&[f64]> = by_dist[..k].iter().map(|(_, m)| *m).collect();
        out.insert(y, mean(&nearest, dim));
    }
    out
}

/// Global centers as a dense masked mean over an identity × client grid.
pub fn brute_global(locals: &[BTreeMap<usize, Vec<f64>>], num_ids: usize, dim: usize) -> BTreeMap<usize, (Vec<f64>, usize)> {
    let mut out = BTreeMap::new();
    for k in 0..num_ids {
        let mask: Vec<bool> = locals.iter().map(|m| m.contains_key(&k)).collect();
        let n = mask.iter().filter(|&&b| b).count();
        if n == 0 {
            continue;
        }
        let mut sum = vec![0.0; dim];
        for (m, &present) in locals.iter().zip(&mask) {
            if present {
                for (s, v) in sum.iter_mut().zip(&m[&k]) {
                    *s += v;
                }
            }
        }
        out.insert(k, (sum.iter().map(|s| s / n as f64).collect(), n));
    }
    out
}

/// Random embeddings on a coarse grid so distance ties occur, with some
/// identities holding a single sample or fewer than `k`.
pub fn random_client_embeddings(r: &mut ChaCha8Rng, num_ids: usize, dim: usize) -> Vec<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    for y in 0..num_ids {
        if r.random_bool(0.3) {
            continue;
        }
        let count = match r.random_range(0..4) {
            0 => 1,
            1 => r.random_range(2..4),
            _ => r.random_range(4..12),
        };
        for _ in 0..count {
            let z = (0..dim).map(|_| r.random_range(-2..=2) as f64 * 0.5).collect();
            out.push((z, y));
        }
    }
    if out.is_empty() {
        out.push((vec![0.5; dim], 0));
    }
    // interleave identities
    for i in (1..out.len()).rev() {
        let j = r.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Max abs deviation of class means, rectification and global aggregation
/// from the oracles over `cases` random federations.
pub fn memory_oracle_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let num_ids = r.random_range(1..8);
        let dim = r.random_range(1..6);
        let k = r.random_range(1..7);
        let clients = r.random_range(1..6);
        let mut uploads = Vec::new();
        let mut oracle_locals = Vec::new();
        for c in 0..clients {
            let emb = random_client_embeddings(&mut r, num_ids, dim);
            let means = class_means(&emb, c).unwrap();
            for (y, center) in &means.centers {
                let members: Vec<&[f64]> = emb.iter().filter(|e| e.1 == *y).map(|e| e.0.as_slice()).collect();
                for (a, b) in center.iter().zip(mean(&members, dim)) {
                    worst = worst.max((a - b).abs());
                }
            }
            let local = rectify_topk(&means, &emb, k).unwrap();
            let expected = brute_local_memory(&emb, k);
            assert_eq!(local.centers.keys().collect::<Vec<_>>(), expected.keys().collect::<Vec<_>>());
            for (y, c) in &local.centers {
                for (a, b) in c.iter().zip(&expected[y]) {
                    worst = worst.max((a - b).abs());
                }
            }
            uploads.push(local);
            oracle_locals.push(expected);
        }
        let global = aggregate_global(&uploads, 1).unwrap();
        let expected = brute_global(&oracle_locals, num_ids, dim);
        assert_eq!(global.len(), expected.len());
        for (y, (c, n)) in &expected {
            assert_eq!(global.contributor_counts()[y], *n);
            for (a, b) in global.center(*y).unwrap().iter().zip(c) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

// -------------------------------------------------------------------- metrics

/// Rank-k accuracy by checking the first k entries of every list.
pub fn brute_cmc(lists: &[Vec<bool>]) -> Vec<f64> {
    let valid: Vec<&Vec<bool>> = lists.iter().filter(|l| l.iter().any(|&b| b)).collect();
    let len = valid.iter().map(|l| l.len()).max().unwrap();
    (1..=len)
        .map(|k| valid.iter().filter(|l| l.iter().take(k).any(|&b| b)).count() as f64 / valid.len() as f64)
        .collect()
}

/// Average over positives of precision at the positive's rank.
pub fn brute_map(lists: &[Vec<bool>]) -> f64 {
    let valid: Vec<&Vec<bool>> = lists.iter().filter(|l| l.iter().any(|&b| b)).collect();
    let aps: Vec<f64> = valid
        .iter()
        .map(|l| {
            let positives: Vec<usize> = (0..l.len()).filter(|&i| l[i]).collect();
            let precisions: Vec<f64> = positives
                .iter()
                .map(|&i| l[..=i].iter().filter(|&&b| b).count() as f64 / (i + 1) as f64)
                .collect();
            precisions.iter().sum::<f64>() / positives.len() as f64
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Positives divided by the rank of the last positive, averaged.
pub fn brute_minp(lists: &[Vec<bool>]) -> f64 {
    let valid: Vec<&Vec<bool>> = lists.iter().filter(|l| l.iter().any(|&b| b)).collect();
    let inps: Vec<f64> = valid
        .iter()
        .map(|l| {
            let last = (0..l.len()).filter(|&i| l[i]).max().unwrap();
            l.iter().filter(|&&b| b).count() as f64 / (last + 1) as f64
        })
        .collect();
    inps.iter().sum::<f64>() / inps.len() as f64
}

pub fn random_lists(r: &mut ChaCha8Rng, max_gallery: usize) -> Vec<Vec<bool>> {
    let queries = r.random_range(1..12);
    let p = r.random_range(0.02..0.6);
    let mut lists: Vec<Vec<bool>> = (0..queries)
        .map(|_| {
            let len = r.random_range(1..=max_gallery);
            (0..len).map(|_| r.random_bool(p)).collect()
        })
        .collect();
    if !lists.iter().flatten().any(|&b| b) {
        let i = r.random_range(0..lists[0].len());
        lists[0][i] = true;
    }
    lists
}

/// Outcome of the metric oracle run, as counts of failing cases.
pub struct MetricCheck {
    pub mismatches: usize,
    pub non_monotone: usize,
    pub minp_above_map: usize,
}

pub fn metric_oracle_check(cases: usize, max_gallery: usize, seed: u64) -> MetricCheck {
    let mut r = rng(seed);
    let mut check = MetricCheck {
        mismatches: 0,
        non_monotone: 0,
        minp_above_map: 0,
    };
    for _ in 0..cases {
        let lists = random_lists(&mut r, max_gallery);
        let curve = cmc(&lists).unwrap();
        let (map, _) = mean_ap(&lists).unwrap();
        let (minp, _) = m_inp(&lists).unwrap();
        if curve != brute_cmc(&lists) || map != brute_map(&lists) || minp != brute_minp(&lists) {
            check.mismatches += 1;
        }
        if !curve.windows(2).all(|w| w[0] <= w[1]) || *curve.last().unwrap() != 1.0 {
            check.non_monotone += 1;
        }
        if minp > map {
            check.minp_above_map += 1;
        }
    }
    check
}

// ------------------------------------------------------------------ gradients

/// Tiny model with fewer than 200 parameters and a fixed batch.
pub struct GradProblem {
    pub state: ModelState,
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub memory: GlobalMemory,
    pub reference: ParameterVector,
}

pub fn grad_problem(seed: u64) -> GradProblem {
    let cfg = EncoderConfig {
        input_dim: 6,
        hidden_dims: vec![5],
        embed_dim: 4,
        num_classes: 3,
    };
    let state = init_params(&cfg, seed).unwrap();
    assert!(state.params.len() <= 200);
    let mut r = rng(seed + 100);
    let labels = vec![0, 0, 1, 1, 2, 2];
    let xs = labels
        .iter()
        .map(|_| (0..6).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let center = |r: &mut ChaCha8Rng| (0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    // identity 2 has no global center
    let local = LocalMemory {
        client_id: 0,
        centers: BTreeMap::from([(0, center(&mut r)), (1, center(&mut r))]),
        counts: BTreeMap::from([(0, 2), (1, 2)]),
    };
    let memory = aggregate_global(&[local], 1).unwrap();
    let reference = ParameterVector::new(
        state.params.values.iter().map(|v| v + r.random_range(-0.2..0.2)).collect(),
        state.params.layout.clone(),
    )
    .unwrap();
    GradProblem {
        state,
        xs,
        labels,
        memory,
        reference,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Identity,
    Circle,
    Mrb(MrbVariant),
    Proximal,
    /// Full objective with the given MRB variant and proximal weight.
    All(MrbVariant),
}

const PROX_MU: f64 = 0.3;

fn loss_cfg(objective: Objective) -> LossConfig {
    let variant = match objective {
        Objective::Mrb(v) | Objective::All(v) => v,
        _ => MrbVariant::Cosine,
    };
    LossConfig {
        lambda_mrb: 0.7,
        mrb_variant: variant,
        prox_mu: PROX_MU,
        ..LossConfig::default()
    }
}

/// Value and analytic parameter gradient of `objective`.
pub fn objective_and_grad(p: &GradProblem, state: &ModelState, objective: Objective) -> (f64, Vec<f64>) {
    let cfg = loss_cfg(objective);
    let outputs = forward_batch(state, &p.xs).unwrap();
    let z: Vec<Vec<f64>> = outputs.iter().map(|o| o.embedding.clone()).collect();
    let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();
    let id = identity_loss(&logits, &p.labels).unwrap();
    let cir = circle_loss(&z, &p.labels, cfg.circle_margin, cfg.circle_gamma).unwrap();
    let mrb = mrb_loss(&z, &p.labels, &p.memory, cfg.mrb_variant, 2).unwrap();
    let (prox_value, prox_grad) = proximal_term(&state.params, &p.reference, cfg.prox_mu).unwrap();
    let zeros_z = vec![vec![0.0; z[0].len()]; z.len()];
    let zeros_l = vec![vec![0.0; logits[0].len()]; logits.len()];
    let grad_of = |up_z: &[Vec<f64>], up_l: &[Vec<f64>]| backward(state, &outputs, up_z, up_l).unwrap().0;
    match objective {
        Objective::Identity => (id.value, grad_of(&zeros_z, &id.grad)),
        Objective::Circle => (cir.value, grad_of(&cir.grad, &zeros_l)),
        Objective::Mrb(_) => (mrb.value, grad_of(&mrb.grad, &zeros_l)),
        Objective::Proximal => (prox_value, prox_grad),
        Objective::All(_) => {
            let parts = LossParts {
                id: id.value,
                cir: cir.value,
                mrb: mrb.value,
                prox: prox_value,
            };
            let (value, w) = total_loss(&parts, &cfg).unwrap();
            let up_z: Vec<Vec<f64>> = cir
                .grad
                .iter()
                .zip(&mrb.grad)
                .map(|(c, m)| c.iter().zip(m).map(|(c, m)| w.cir * c + w.mrb * m).collect())
                .collect();
            let up_l: Vec<Vec<f64>> = id.grad.iter().map(|g| g.iter().map(|v| w.id * v).collect()).collect();
            let mut grad = grad_of(&up_z, &up_l);
            for (g, pg) in grad.iter_mut().zip(&prox_grad) {
                *g += w.prox * pg;
            }
            (value, grad)
        }
    }
}

/// Largest component deviation between the analytic gradient and central
/// differences, relative to the largest analytic component.
pub fn gradient_relative_error(p: &GradProblem, objective: Objective) -> f64 {
    let (_, analytic) = objective_and_grad(p, &p.state, objective);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|i| {
            let shifted = |delta: f64| {
                let mut values = p.state.params.values.clone();
                values[i] += delta;
                let s = ModelState::from_params(ParameterVector::new(values, p.state.params.layout.clone()).unwrap());
                objective_and_grad(p, &s, objective).0
            };
            (shifted(h) - shifted(-h)) / (2.0 * h)
        })
        .collect();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub const ALL_OBJECTIVES: [Objective; 8] = [
    Objective::Identity,
    Objective::Circle,
    Objective::Mrb(MrbVariant::Cosine),
    Objective::Mrb(MrbVariant::Euclidean),
    Objective::Mrb(MrbVariant::Mixed),
    Objective::Proximal,
    Objective::All(MrbVariant::Cosine),
    Objective::All(MrbVariant::Mixed),
];
