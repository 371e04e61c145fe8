//! Experiment configuration: presets, TOML files and `key=value` overrides.
//!
//! A config document is resolved in three layers: the named preset, then the
//! file, then command-line overrides. The merged document is parsed with
//! unknown keys rejected and validated before any work starts.

use std::path::{Path, PathBuf};

use fedreid::data::{Protocol, SyntheticSpec};
use fedreid::evaluation::{Direction, EvalOptions};
use fedreid::federation::FederationConfig;
use fedreid::{Error, Result};
use serde::{Deserialize, Serialize};

/// Names accepted by `preset`.
pub const PRESETS: [&str; 4] = ["full-ci", "desk-ci", "desk-ei", "desk-es"];
pub const DEFAULT_PRESET: &str = "full-ci";

/// Where training data comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifests to load instead of generating data. CI takes one; EI and ES
    /// take one per entity.
    pub manifests: Vec<PathBuf>,
    /// Index of the held-out entity for EI and ES.
    pub held_out: Option<usize>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub direction: Direction,
    /// Drop gallery items sharing both identity and camera with the query.
    pub filter_same_camera: bool,
    /// Single-shot gallery resamples per evaluation; 0 scores the full gallery only.
    pub resample_repeats: usize,
}

impl EvaluationConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            direction: self.direction,
            filter_same_camera: self.filter_same_camera,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub run_id: String,
    pub output_dir: PathBuf,
    /// Runs with seeds `federation.seed + r` (and synthetic seeds
    /// `data.synthetic.seed + r`) for `r < repetitions`.
    pub repetitions: usize,
    /// Write parameter and memory snapshots every this many rounds; 0 keeps
    /// only the final ones.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

/// Built-in starting points.
///
/// `full-ci` carries the full-scale training defaults. The `desk-*` presets
/// keep every loss, sampling and optimizer default but shorten the schedule
/// and lower the peak learning rate so the small synthetic runs converge.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let protocol = match name {
        "full-ci" | "desk-ci" => Protocol::Ci,
        "desk-ei" => Protocol::Ei,
        "desk-es" => Protocol::Es,
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let mut federation = FederationConfig::for_protocol(protocol);
    let mut synthetic = SyntheticSpec::default();
    let mut held_out = None;
    if name.starts_with("desk") {
        federation.epochs = 10;
        federation.batches_per_epoch = Some(50);
        federation.max_lr = 0.02;
    }
    if protocol != Protocol::Ci {
        synthetic.entities = 3;
        held_out = Some(2);
    }
    Ok(ExperimentConfig {
        preset: name.to_string(),
        run_id: name.to_string(),
        output_dir: PathBuf::from("runs").join(name),
        repetitions: 1,
        checkpoint_every: 1,
        data: DataConfig {
            manifests: Vec::new(),
            held_out,
            synthetic,
        },
        federation,
        evaluation: EvaluationConfig::default(),
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '/']) {
            return Err(Error::Config(format!("run_id {:?} must be non-empty without ',', '/' or newlines", self.run_id)));
        }
        let protocol = self.federation.protocol;
        match protocol {
            Protocol::Ci => {
                if self.data.held_out.is_some() {
                    return Err(Error::Config("data.held_out applies only to ei and es".into()));
                }
                if self.data.manifests.len() > 1 {
                    return Err(Error::Config(format!(
                        "ci trains on one dataset, got {} manifests",
                        self.data.manifests.len()
                    )));
                }
            }
            Protocol::Ei | Protocol::Es => {
                let held = self
                    .data
                    .held_out
                    .ok_or_else(|| Error::Config(format!("{protocol} needs data.held_out")))?;
                let sources = if self.data.manifests.is_empty() {
                    self.data.synthetic.entities
                } else {
                    self.data.manifests.len()
                };
                if sources < 2 {
                    return Err(Error::Config(format!("{protocol} needs at least two entities, got {sources}")));
                }
                if held >= sources {
                    return Err(Error::Config(format!("data.held_out {held} out of range for {sources} entities")));
                }
            }
        }
        if self.data.manifests.is_empty() {
            self.data.synthetic.validate()?;
            if protocol == Protocol::Ci && self.data.synthetic.entities != 1 {
                return Err(Error::Config("ci expects a single synthetic entity".into()));
            }
        }
        Ok(())
    }

    /// The resolved config as TOML. Feeding it back reproduces the run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn to_table(cfg: &ExperimentConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses one `dotted.key=value` override. The value is read as a TOML
/// value, falling back to a plain string.
pub fn parse_override(spec: &str) -> Result<toml::Table> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = toml::Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = &mut table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(table)
}

/// Resolves preset, file text and overrides into a validated config.
/// `preset_flag` wins over a `preset` key in the file.
pub fn resolve(file_text: Option<&str>, preset_flag: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let file: toml::Table = match file_text {
        Some(text) => text
            .parse()
            .map_err(|e| Error::Config(format!("invalid config file: {e}")))?,
        None => toml::Table::new(),
    };
    let mut layers = vec![file];
    for o in overrides {
        layers.push(parse_override(o)?);
    }
    let named = preset_flag
        .map(str::to_string)
        .or_else(|| {
            layers
                .iter()
                .rev()
                .find_map(|l| l.get("preset").and_then(|v| v.as_str()).map(str::to_string))
        })
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let mut doc = to_table(&preset(&named)?)?;
    for layer in layers {
        merge(&mut doc, layer);
    }
    doc.insert("preset".into(), toml::Value::String(named));
    let cfg: ExperimentConfig = doc
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve`] reading the file from disk.
pub fn load(path: Option<&Path>, preset_flag: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => None,
    };
    resolve(text.as_deref(), preset_flag, overrides)
}
