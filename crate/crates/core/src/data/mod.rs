//! Datasets, their partitioning into clients, batch sampling and
//! augmentation.

mod augment;
mod manifest;
mod partition;
mod sampling;
mod synth;

pub use augment::{channel_augment, grayscale_augment, normalize_input, Augmentation, DEFAULT_AUG_PROB, INPUT_MEAN, INPUT_STD};
pub use manifest::{load_manifest, read_tensor, write_manifest, write_tensor, MANIFEST_HEADER};
pub use partition::{partition, PartitionSpec, Protocol};
pub use sampling::{pk_sample, Batch};
pub use synth::{generate_synthetic, CameraKind, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn code(self) -> &'static str {
        match self {
            Modality::Visible => "V",
            Modality::Infrared => "I",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "V" => Some(Modality::Visible),
            "I" => Some(Modality::Infrared),
            _ => None,
        }
    }
}

/// One image with its labels. Pixels are channel-major `3×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub identity: usize,
    pub modality: Modality,
    pub camera_id: usize,
    pub entity_id: usize,
}

impl SampleRecord {
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Standardized pixels, as fed to the encoder.
    pub fn model_input(&self) -> Vec<f64> {
        let mut x = self.pixels_f64();
        normalize_input(&mut x);
        x
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != 3 * self.plane_len() || self.plane_len() == 0 {
            return Err(Error::Input(format!(
                "expected {} pixel values for a 3x{}x{} image, got {}",
                3 * self.plane_len(),
                self.height,
                self.width,
                self.pixels.len()
            )));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("pixel value {p} outside [0, 1]")));
        }
        if self.modality == Modality::Infrared && !channels_equal(&self.pixels, self.plane_len()) {
            return Err(Error::Input("infrared record with unequal channels".into()));
        }
        Ok(())
    }
}

pub(crate) fn channels_equal<T: PartialEq>(pixels: &[T], plane: usize) -> bool {
    let (r, rest) = pixels.split_at(plane);
    let (g, b) = rest.split_at(plane);
    r == g && g == b
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<SampleRecord>,
    /// Labels lie in `[0, identity_count)`.
    pub identity_count: usize,
    /// Original identifier of each dense label, when relabeled on load.
    pub original_ids: Option<Vec<u64>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<SampleRecord>, identity_count: usize) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            records,
            identity_count,
            original_ids: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyDataset(format!("empty dataset {}", self.name)));
        }
        if let Some(r) = self.records.iter().find(|r| r.identity >= self.identity_count) {
            return Err(Error::Input(format!(
                "identity {} out of range for {} identities in {}",
                r.identity, self.identity_count, self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Image height and width, taken from the first record.
    pub fn image_shape(&self) -> (usize, usize) {
        self.records.first().map_or((0, 0), |r| (r.height, r.width))
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn camera_ids(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.camera_id).collect()
    }

    pub fn entity_ids(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.entity_id).collect()
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        self.records.iter().any(|r| r.modality == m)
    }

    /// Record indices of each identity, in record order.
    pub fn indices_by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.identity).or_default().push(i);
        }
        map
    }

    /// Keeps the records matching `keep`, preserving labels.
    pub fn filter(&self, name: impl Into<String>, keep: impl Fn(&SampleRecord) -> bool) -> Result<Dataset> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ds = Dataset {
            name: name.into(),
            records,
            identity_count: self.identity_count,
            original_ids: self.original_ids.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Relabels identities densely in ascending order of their current label.
    pub fn compact_labels(&self) -> Dataset {
        let ids: Vec<usize> = self.identities().into_iter().collect();
        let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let records = self
            .records
            .iter()
            .map(|r| SampleRecord {
                identity: dense[&r.identity],
                ..r.clone()
            })
            .collect();
        let original_ids = Some(
            ids.iter()
                .map(|&k| self.original_ids.as_ref().map_or(k as u64, |o| o[k]))
                .collect(),
        );
        Dataset {
            name: self.name.clone(),
            records,
            identity_count: ids.len(),
            original_ids,
        }
    }

    /// Identity-disjoint train/test split: the first half of the identities
    /// (by label) train, the rest test. Both halves are relabeled densely.
    pub fn split_by_identity(&self) -> Result<(Dataset, Dataset)> {
        let ids: Vec<usize> = self.identities().into_iter().collect();
        if ids.len() < 2 {
            return Err(Error::Config(format!(
                "dataset {} needs at least two identities to split",
                self.name
            )));
        }
        let cut = ids[ids.len() / 2];
        let train = self.filter(format!("{}-train", self.name), |r| r.identity < cut)?;
        let test = self.filter(format!("{}-test", self.name), |r| r.identity >= cut)?;
        Ok((train.compact_labels(), test.compact_labels()))
    }

    /// One dataset per entity, each relabeled densely.
    pub fn split_by_entity(&self) -> Result<Vec<Dataset>> {
        self.entity_ids()
            .into_iter()
            .map(|e| {
                self.filter(format!("{}-entity{e}", self.name), |r| r.entity_id == e)
                    .map(|d| d.compact_labels())
            })
            .collect()
    }
}
