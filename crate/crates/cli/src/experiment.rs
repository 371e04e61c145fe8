//! Subcommand implementations. Every file is written atomically and contains
//! nothing but values derived from the config, so identical configs give
//! byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedreid::checkpoint::{load_params, save_memory, save_params, write_atomic};
use fedreid::data::{generate_synthetic, load_manifest, partition, write_manifest, Dataset, PartitionSpec, Protocol, SyntheticSpec};
use fedreid::evaluation::{evaluate_cross_modal, evaluate_resampled, MeanStd, MetricsDocument, MetricsReport, ResampledReport, REPORT_CSV_HEADER};
use fedreid::federation::{initial_model, run_dppt_with, run_erm, Broadcast, RoundObserver, RoundReport, RunOptions, TrainingOutcome};
use fedreid::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_CSV_HEADER: &str = "run_id,protocol,repetitions,r1_mean,r1_std,mAP_mean,mAP_std,mINP_mean,mINP_std";
pub const SWEEP_CSV_HEADER: &str = "axis,value,repetitions,r1_mean,r1_std,mAP_mean,mAP_std,mINP_mean,mINP_std";

/// Training data and evaluation target for one repetition.
pub struct Prepared {
    pub partition: PartitionSpec,
    pub test: Dataset,
}

/// The config of repetition `rep`: seeds shifted by `rep`.
pub fn repetition_config(cfg: &ExperimentConfig, rep: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.federation.seed = cfg.federation.seed + rep as u64;
    c.data.synthetic.seed = cfg.data.synthetic.seed + rep as u64;
    c
}

/// Loads or generates the entity datasets named by the config.
pub fn source_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    if cfg.data.manifests.is_empty() {
        let ds = generate_synthetic(&cfg.data.synthetic)?;
        if cfg.federation.protocol == Protocol::Ci {
            Ok(vec![ds])
        } else {
            ds.split_by_entity()
        }
    } else {
        cfg.data.manifests.iter().map(|p| load_manifest(p)).collect()
    }
}

/// Partition plus test target: the identity-disjoint test half for CI, the
/// held-out entity for EI and ES.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let sources = source_datasets(cfg)?;
    let protocol = cfg.federation.protocol;
    match protocol {
        Protocol::Ci => {
            let (train, test) = sources[0].split_by_identity()?;
            Ok(Prepared {
                partition: partition(&[train], protocol, None)?,
                test,
            })
        }
        Protocol::Ei | Protocol::Es => {
            let spec = partition(&sources, protocol, cfg.data.held_out)?;
            let test = spec.held_out.clone().expect("entity partitions hold out a dataset");
            Ok(Prepared { partition: spec, test })
        }
    }
}

/// Writes round reports and snapshots as training proceeds.
struct RunWriter {
    dir: PathBuf,
    every: usize,
    rows: String,
}

impl RunWriter {
    fn new(dir: PathBuf, every: usize) -> Self {
        Self {
            dir,
            every,
            rows: format!("{}\n", RoundReport::CSV_HEADER),
        }
    }
}

impl RoundObserver for RunWriter {
    fn on_round(&mut self, report: &RoundReport, global: &Broadcast) -> Result<()> {
        for row in report.csv_rows() {
            self.rows.push_str(&row);
            self.rows.push('\n');
        }
        write_atomic(&self.dir.join("rounds.csv"), self.rows.as_bytes())?;
        if self.every > 0 && report.epoch.is_multiple_of(self.every) {
            let dir = self.dir.join("checkpoints");
            save_params(&dir.join(format!("round-{:03}.params", report.epoch)), &global.params)?;
            save_memory(&dir.join(format!("round-{:03}.memory", report.epoch)), &global.memory)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub resampled: Option<ResampledReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub protocol: Protocol,
    pub runs: Vec<RepetitionResult>,
    pub rank1: MeanStd,
    pub map: MeanStd,
    pub minp: MeanStd,
}

impl TrainSummary {
    fn from_runs(run_id: &str, protocol: Protocol, runs: Vec<RepetitionResult>) -> Self {
        let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Self {
            run_id: run_id.to_string(),
            protocol,
            rank1: stat(|m| m.rank(1)),
            map: stat(|m| m.map),
            minp: stat(|m| m.minp),
            runs,
        }
    }

    fn stats_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.runs.len(),
            self.rank1.mean,
            self.rank1.std,
            self.map.mean,
            self.map.std,
            self.minp.mean,
            self.minp.std
        )
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.run_id, self.protocol, self.stats_row())
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::State(format!("cannot serialize report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_metrics(dir: &Path, cfg: &ExperimentConfig, seed: u64, metrics: &MetricsReport) -> Result<()> {
    let protocol = cfg.federation.protocol.name();
    let csv = format!("{REPORT_CSV_HEADER}\n{}\n", metrics.csv_row(&cfg.run_id, protocol, seed));
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    let doc = MetricsDocument::new(&cfg.run_id, protocol, seed, metrics.clone());
    write_atomic(&dir.join("metrics.json"), &to_json(&doc)?)
}

/// Trains one repetition and evaluates it. With `dir` set, round reports,
/// snapshots, the final checkpoint and metrics go there.
pub fn train_repetition(cfg: &ExperimentConfig, rep: usize, dir: Option<&Path>) -> Result<(RepetitionResult, TrainingOutcome)> {
    let cfg = repetition_config(cfg, rep);
    let prepared = prepare(&cfg)?;
    let mut writer = dir.map(|d| RunWriter::new(d.to_path_buf(), cfg.checkpoint_every));
    let observer = writer.as_mut().map(|w| w as &mut dyn RoundObserver);
    let outcome = match cfg.federation.protocol {
        Protocol::Es => run_erm(&prepared.partition, &cfg.federation, observer)?,
        _ => run_dppt_with(
            &prepared.partition,
            &cfg.federation,
            RunOptions {
                schedule: None,
                observer,
            },
        )?,
    };
    let options = cfg.evaluation.options();
    let metrics = evaluate_cross_modal(&outcome.params, &prepared.test, &options)?;
    let resampled = match cfg.evaluation.resample_repeats {
        0 => None,
        n => Some(evaluate_resampled(&outcome.params, &prepared.test, &options, n, cfg.federation.seed)?),
    };
    if let Some(d) = dir {
        save_params(&d.join("final.params"), &outcome.params)?;
        save_memory(&d.join("final.memory"), &outcome.memory)?;
        write_metrics(d, &cfg, cfg.federation.seed, &metrics)?;
        if let Some(r) = &resampled {
            write_atomic(&d.join("resampled.json"), &to_json(r)?)?;
        }
    }
    let result = RepetitionResult {
        repetition: rep,
        seed: cfg.federation.seed,
        metrics,
        resampled,
    };
    Ok((result, outcome))
}

pub fn repetition_dir(cfg: &ExperimentConfig, rep: usize) -> PathBuf {
    cfg.output_dir.join(format!("rep-{rep:02}"))
}

/// Runs every repetition. With `write`, outputs go under the config's
/// output directory next to the effective config and a summary.
pub fn cmd_train(cfg: &ExperimentConfig, write: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    if write {
        write_atomic(&cfg.output_dir.join(EFFECTIVE_CONFIG), cfg.to_toml()?.as_bytes())?;
    }
    let runs = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let dir = write.then(|| repetition_dir(cfg, rep));
            train_repetition(cfg, rep, dir.as_deref()).map(|(r, _)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = TrainSummary::from_runs(&cfg.run_id, cfg.federation.protocol, runs);
    if write {
        write_atomic(&cfg.output_dir.join(SUMMARY_JSON), &to_json(&summary)?)?;
        let csv = format!("{SUMMARY_CSV_HEADER}\n{}\n", summary.csv_row());
        write_atomic(&cfg.output_dir.join(SUMMARY_CSV), csv.as_bytes())?;
    }
    Ok(summary)
}

/// Writes one manifest per synthetic entity into `out`.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = generate_synthetic(spec)?;
    ds.split_by_entity()?
        .iter()
        .enumerate()
        .map(|(e, d)| write_manifest(d, out, &format!("entity{e}")))
        .collect()
}

/// Evaluates a saved parameter file on `manifest`, or on the test target the
/// config's repetition `rep` would train against.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    rep: usize,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let rcfg = repetition_config(cfg, rep);
    let params = load_params(checkpoint)?;
    let prepared = prepare(&rcfg)?;
    let expected = initial_model(&prepared.partition, &rcfg.federation)?;
    if params.layout != expected.layout {
        return Err(Error::State(format!(
            "{}: parameter layout does not match the configured model",
            checkpoint.display()
        )));
    }
    let test = match manifest {
        Some(m) => load_manifest(m)?,
        None => prepared.test,
    };
    let metrics = evaluate_cross_modal(&params, &test, &rcfg.evaluation.options())?;
    if let Some(dir) = out {
        write_metrics(dir, &rcfg, rcfg.federation.seed, &metrics)?;
    }
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    TopK,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::TopK => "top_k",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Lambda => cfg.federation.loss.lambda_mrb = value,
            SweepAxis::TopK => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("top_k sweep value {value} is not a positive integer")));
                }
                cfg.federation.top_k = value as usize;
            }
        }
        cfg.validate()
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "top_k" | "topk" => Ok(SweepAxis::TopK),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}; expected lambda or top_k"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub summary: TrainSummary,
}

/// Trains once per value with shared seeds and writes `sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], write: bool) -> Result<(Vec<SweepRow>, String)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            axis.apply(&mut c, v)?;
            c.run_id = format!("{}-{}{v}", cfg.run_id, axis.name());
            c.output_dir = cfg.output_dir.join(format!("{}-{v}", axis.name()));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = configs
        .iter()
        .zip(values)
        .map(|(c, &value)| cmd_train(c, write).map(|summary| SweepRow { value, summary }))
        .collect::<Result<_>>()?;
    let mut table = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        writeln!(table, "{},{},{}", axis.name(), r.value, r.summary.stats_row()).expect("write to string");
    }
    if write {
        write_atomic(&cfg.output_dir.join("sweep.csv"), table.as_bytes())?;
    }
    Ok((rows, table))
}

/// Collects the summaries of finished training runs into one table.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut table = format!("{SUMMARY_CSV_HEADER}\n");
    for dir in run_dirs {
        let path = dir.join(SUMMARY_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let summary: TrainSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: not a training summary: {e}", path.display())))?;
        table.push_str(&summary.csv_row());
        table.push('\n');
    }
    Ok(table)
}
