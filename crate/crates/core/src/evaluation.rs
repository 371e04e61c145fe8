//! Cross-modal retrieval metrics: infrared queries are ranked against a
//! visible gallery by cosine similarity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::model::{dot, embed_batch, ParameterVector};

/// Ranks reported in the delimited text row.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const REPORT_CSV_HEADER: &str = "version,run_id,protocol,seed,r1,r5,r10,r20,mAP,mINP,intra,inter";

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalItem {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub camera_id: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RetrievalProblem {
    pub query: Vec<RetrievalItem>,
    pub gallery: Vec<RetrievalItem>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    InfraredToVisible,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub direction: Direction,
    /// Drop gallery items sharing both identity and camera with the query.
    pub filter_same_camera: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom > 0.0 {
        // adding 0.0 folds -0.0 into +0.0 so exact ties compare equal
        dot(a, b) / denom + 0.0
    } else {
        0.0
    }
}

/// Match flags of the gallery sorted by descending cosine similarity to each
/// query, ties broken by gallery index.
pub fn rank_gallery(problem: &RetrievalProblem, filter_same_camera: bool) -> Result<Vec<Vec<bool>>> {
    if problem.gallery.is_empty() {
        return Err(Error::Input("empty gallery".into()));
    }
    Ok(problem
        .query
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(f64, usize)> = problem
                .gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| !(filter_same_camera && g.identity == q.identity && g.camera_id == q.camera_id))
                .map(|(i, g)| (cosine(&q.embedding, &g.embedding), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.iter().map(|&(_, i)| problem.gallery[i].identity == q.identity).collect()
        })
        .collect())
}

fn with_positive(match_lists: &[Vec<bool>]) -> Result<Vec<&Vec<bool>>> {
    if match_lists.is_empty() {
        return Err(Error::Input("no ranked queries".into()));
    }
    let kept: Vec<_> = match_lists.iter().filter(|m| m.contains(&true)).collect();
    if kept.is_empty() {
        return Err(Error::Evaluation("no query has a gallery positive".into()));
    }
    Ok(kept)
}

/// Cumulative match curve over queries with at least one positive:
/// entry `k - 1` is the fraction whose first match has rank `<= k`. The
/// curve extends to the longest list.
pub fn cmc(match_lists: &[Vec<bool>]) -> Result<Vec<f64>> {
    let kept = with_positive(match_lists)?;
    let len = kept.iter().map(|m| m.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; len];
    for m in &kept {
        let first = m.iter().position(|&x| x).expect("kept lists have a positive");
        hits[first] += 1;
    }
    let n = kept.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Mean average precision and the number of queries excluded for having
/// no positive.
pub fn mean_ap(match_lists: &[Vec<bool>]) -> Result<(f64, usize)> {
    let kept = with_positive(match_lists)?;
    let total: f64 = kept
        .iter()
        .map(|m| {
            let mut found = 0;
            let mut sum = 0.0;
            for (r, _) in m.iter().enumerate().filter(|(_, &x)| x) {
                found += 1;
                sum += found as f64 / (r + 1) as f64;
            }
            sum / found as f64
        })
        .sum();
    Ok((total / kept.len() as f64, match_lists.len() - kept.len()))
}

/// Mean inverse negative penalty: positives over the rank of the hardest
/// positive, averaged over queries with a positive.
pub fn m_inp(match_lists: &[Vec<bool>]) -> Result<(f64, usize)> {
    let kept = with_positive(match_lists)?;
    let total: f64 = kept
        .iter()
        .map(|m| {
            let positives = m.iter().filter(|&&x| x).count();
            let hardest = m.iter().rposition(|&x| x).expect("kept lists have a positive") + 1;
            positives as f64 / hardest as f64
        })
        .sum();
    Ok((total / kept.len() as f64, match_lists.len() - kept.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Entry `k - 1` is rank-k accuracy.
    pub rank_curve: Vec<f64>,
    pub map: f64,
    pub minp: f64,
    /// Mean cosine distance between embeddings of the same identity.
    pub intra_mean: f64,
    /// Mean cosine distance between embeddings of different identities.
    pub inter_mean: f64,
    pub excluded_queries: usize,
    pub queries: usize,
    pub gallery: usize,
}

impl MetricsReport {
    /// Rank-k accuracy; ranks past the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        self.rank_curve
            .get(k - 1)
            .or(self.rank_curve.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn csv_row(&self, run_id: &str, protocol: &str, seed: u64) -> String {
        let ranks: Vec<String> = REPORT_RANKS.iter().map(|&k| format!("{:.6}", self.rank(k))).collect();
        format!(
            "{REPORT_FORMAT_VERSION},{run_id},{protocol},{seed},{},{:.6},{:.6},{:.6},{:.6}",
            ranks.join(","),
            self.map,
            self.minp,
            self.intra_mean,
            self.inter_mean
        )
    }
}

/// Structured form of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub version: u32,
    pub run_id: String,
    pub protocol: String,
    pub seed: u64,
    pub report: MetricsReport,
}

impl MetricsDocument {
    pub fn new(run_id: impl Into<String>, protocol: impl Into<String>, seed: u64, report: MetricsReport) -> Self {
        Self {
            version: REPORT_FORMAT_VERSION,
            run_id: run_id.into(),
            protocol: protocol.into(),
            seed,
            report,
        }
    }
}

/// Scores a retrieval problem.
pub fn score_problem(problem: &RetrievalProblem, filter_same_camera: bool) -> Result<MetricsReport> {
    let lists = rank_gallery(problem, filter_same_camera)?;
    let rank_curve = cmc(&lists)?;
    let (map, excluded_queries) = mean_ap(&lists)?;
    let (minp, _) = m_inp(&lists)?;
    let all: Vec<&RetrievalItem> = problem.query.iter().chain(&problem.gallery).collect();
    let (intra_mean, inter_mean) = class_distances(&all);
    Ok(MetricsReport {
        rank_curve,
        map,
        minp,
        intra_mean,
        inter_mean,
        excluded_queries,
        queries: problem.query.len(),
        gallery: problem.gallery.len(),
    })
}

/// Mean cosine distance over same-identity and different-identity pairs;
/// NaN when a side has no pairs.
fn class_distances(items: &[&RetrievalItem]) -> (f64, f64) {
    let (intra, inter) = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0, 0.0, 0.0, 0.0];
            for j in i + 1..items.len() {
                let d = 1.0 - cosine(&items[i].embedding, &items[j].embedding);
                let slot = if items[i].identity == items[j].identity { 0 } else { 2 };
                acc[slot] += d;
                acc[slot + 1] += 1.0;
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(([0.0, 0.0], [0.0, 0.0]), |(a, b), x| ([a[0] + x[0], a[1] + x[1]], [b[0] + x[2], b[1] + x[3]]));
    let mean = |s: [f64; 2]| if s[1] > 0.0 { s[0] / s[1] } else { f64::NAN };
    (mean(intra), mean(inter))
}

/// Embeds every record of `test_set` with `params`.
pub fn embed_dataset(params: &ParameterVector, test_set: &Dataset) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = test_set
        .records
        .par_chunks(64)
        .map(|chunk| {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|r| r.model_input()).collect();
            embed_batch(params, &xs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn cross_modal_problem(test_set: &Dataset, embeddings: &[Vec<f64>], options: &EvalOptions) -> Result<RetrievalProblem> {
    let Direction::InfraredToVisible = options.direction;
    for m in [Modality::Infrared, Modality::Visible] {
        if !test_set.has_modality(m) {
            return Err(Error::Evaluation(format!(
                "test set {} has no {m:?} records",
                test_set.name
            )));
        }
    }
    let mut problem = RetrievalProblem::default();
    for (r, z) in test_set.records.iter().zip(embeddings) {
        let item = RetrievalItem {
            embedding: z.clone(),
            identity: r.identity,
            camera_id: r.camera_id,
        };
        match r.modality {
            Modality::Infrared => problem.query.push(item),
            Modality::Visible => problem.gallery.push(item),
        }
    }
    Ok(problem)
}

/// Full multi-shot evaluation: every infrared record queries every visible
/// record.
pub fn evaluate_cross_modal(params: &ParameterVector, test_set: &Dataset, options: &EvalOptions) -> Result<MetricsReport> {
    let embeddings = embed_dataset(params, test_set)?;
    let problem = cross_modal_problem(test_set, &embeddings, options)?;
    score_problem(&problem, options.filter_same_camera)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "mean of no values");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampledReport {
    pub reports: Vec<MetricsReport>,
    pub rank1: MeanStd,
    pub map: MeanStd,
    pub minp: MeanStd,
}

impl ResampledReport {
    pub fn from_reports(reports: Vec<MetricsReport>) -> Self {
        let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            rank1: stat(|r| r.rank(1)),
            map: stat(|r| r.map),
            minp: stat(|r| r.minp),
            reports,
        }
    }
}

/// Repeats the evaluation with a single-shot gallery: each repeat keeps one
/// random visible image per (identity, camera) pair; queries stay fixed.
pub fn evaluate_resampled(
    params: &ParameterVector,
    test_set: &Dataset,
    options: &EvalOptions,
    repeats: usize,
    seed: u64,
) -> Result<ResampledReport> {
    if repeats == 0 {
        return Err(Error::Config("resampled evaluation needs at least one repeat".into()));
    }
    let embeddings = embed_dataset(params, test_set)?;
    let full = cross_modal_problem(test_set, &embeddings, options)?;
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, g) in full.gallery.iter().enumerate() {
        groups.entry((g.identity, g.camera_id)).or_default().push(i);
    }
    let reports = (0..repeats)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let gallery = groups
                .values()
                .map(|idx| full.gallery[idx[rng.random_range(0..idx.len())]].clone())
                .collect();
            let problem = RetrievalProblem {
                query: full.query.clone(),
                gallery,
            };
            score_problem(&problem, options.filter_same_camera)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResampledReport::from_reports(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(embedding: Vec<f64>, identity: usize) -> RetrievalItem {
        RetrievalItem {
            embedding,
            identity,
            camera_id: 0,
        }
    }

    #[test]
    fn identical_item_ranks_first() {
        let problem = RetrievalProblem {
            query: vec![item(vec![0.6, 0.8], 3)],
            gallery: vec![item(vec![1.0, 0.0], 1), item(vec![0.6, 0.8], 3), item(vec![0.0, 1.0], 2)],
        };
        let lists = rank_gallery(&problem, false).unwrap();
        assert_eq!(lists, vec![vec![true, false, false]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let problem = RetrievalProblem {
            query: vec![item(vec![1.0, 0.0], 1)],
            gallery: vec![item(vec![0.0, 1.0], 2), item(vec![0.0, -1.0], 1), item(vec![0.0, 1.0], 1)],
        };
        // gallery 0 and 2 tie at similarity 0, gallery 1 at 0 too
        assert_eq!(rank_gallery(&problem, false).unwrap(), vec![vec![false, true, true]]);
        assert!(rank_gallery(&RetrievalProblem::default(), false).is_err());
    }

    #[test]
    fn camera_filter_drops_same_camera_positives() {
        let mut g = item(vec![1.0, 0.0], 1);
        g.camera_id = 5;
        let mut q = item(vec![1.0, 0.0], 1);
        q.camera_id = 5;
        let problem = RetrievalProblem {
            query: vec![q],
            gallery: vec![g, item(vec![0.0, 1.0], 1)],
        };
        assert_eq!(rank_gallery(&problem, true).unwrap(), vec![vec![true]]);
        assert_eq!(rank_gallery(&problem, false).unwrap()[0].len(), 2);
    }

    #[test]
    fn cmc_examples() {
        assert_eq!(cmc(&[vec![true, false], vec![true, true]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(cmc(&[vec![false, false, true, false]]).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(cmc(&[]).is_err());
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(mean_ap(&[vec![true, true, false]]).unwrap(), (1.0, 0));
        let (ap, _) = mean_ap(&[vec![true, false, true]]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let mut tail = vec![false; 9];
        tail.push(true);
        let (ap, _) = mean_ap(&[tail]).unwrap();
        assert!((ap - 0.1).abs() < 1e-15);
        assert_eq!(mean_ap(&[vec![true], vec![false, false]]).unwrap(), (1.0, 1));
    }

    #[test]
    fn inverse_negative_penalty_examples() {
        assert_eq!(m_inp(&[vec![true, true, false]]).unwrap().0, 1.0);
        assert!((m_inp(&[vec![true, false, true]]).unwrap().0 - 2.0 / 3.0).abs() < 1e-15);
        let mut last = vec![false; 7];
        last.push(true);
        assert!((m_inp(&[last]).unwrap().0 - 1.0 / 8.0).abs() < 1e-15);
        assert!(matches!(m_inp(&[vec![false]]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn orthogonal_identities_score_perfectly() {
        let basis = |k: usize| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let problem = RetrievalProblem {
            query: (0..4).map(|k| item(basis(k), k)).collect(),
            gallery: (0..4).flat_map(|k| [item(basis(k), k), item(basis(k), k)]).collect(),
        };
        let r = score_problem(&problem, false).unwrap();
        assert_eq!((r.rank(1), r.map, r.minp), (1.0, 1.0, 1.0));
        assert!(r.intra_mean.abs() < 1e-15);
        assert!((r.inter_mean - 1.0).abs() < 1e-15);
        assert_eq!(r.rank(100), 1.0);
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricsReport {
            rank_curve: vec![0.5, 0.75, 1.0],
            map: 0.6,
            minp: 0.4,
            intra_mean: 0.1,
            inter_mean: 0.9,
            excluded_queries: 0,
            queries: 2,
            gallery: 3,
        };
        let row = r.csv_row("run", "ci", 7);
        assert_eq!(row.split(',').count(), REPORT_CSV_HEADER.split(',').count());
        assert!(row.starts_with("1,run,ci,7,0.500000,1.000000,1.000000,1.000000,0.600000"));
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    fn synthetic_test_set() -> (ParameterVector, Dataset) {
        use crate::data::{generate_synthetic, SyntheticSpec};
        use crate::model::{init_params, EncoderConfig};
        let ds = generate_synthetic(&SyntheticSpec {
            identities: 6,
            images_per_identity_per_camera: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (h, w) = ds.image_shape();
        let params = init_params(&EncoderConfig::for_image(h, w, vec![8], 4, 6), 0).unwrap().params;
        (params, ds)
    }

    #[test]
    fn cross_modal_evaluation_counts_queries_and_gallery() {
        let (params, ds) = synthetic_test_set();
        let r = evaluate_cross_modal(&params, &ds, &EvalOptions::default()).unwrap();
        let ir = ds.records.iter().filter(|x| x.modality == Modality::Infrared).count();
        assert_eq!(r.queries, ir);
        assert_eq!(r.gallery, ds.len() - ir);
        assert!(r.rank_curve.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.minp <= r.map + 1e-12 && r.map <= 1.0);
        assert_eq!(r, evaluate_cross_modal(&params, &ds, &EvalOptions::default()).unwrap());
    }

    #[test]
    fn single_modality_test_sets_are_rejected() {
        let (params, ds) = synthetic_test_set();
        let visible = ds.filter("v", |r| r.modality == Modality::Visible).unwrap();
        assert!(matches!(
            evaluate_cross_modal(&params, &visible, &EvalOptions::default()),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn resampled_gallery_is_single_shot() {
        let (params, ds) = synthetic_test_set();
        let opts = EvalOptions::default();
        let r = evaluate_resampled(&params, &ds, &opts, 4, 3).unwrap();
        assert_eq!(r.reports.len(), 4);
        let pairs: std::collections::BTreeSet<(usize, usize)> = ds
            .records
            .iter()
            .filter(|x| x.modality == Modality::Visible)
            .map(|x| (x.identity, x.camera_id))
            .collect();
        assert!(r.reports.iter().all(|x| x.gallery == pairs.len()));
        assert_eq!(r, evaluate_resampled(&params, &ds, &opts, 4, 3).unwrap());
        assert!(evaluate_resampled(&params, &ds, &opts, 0, 3).is_err());
    }
}
