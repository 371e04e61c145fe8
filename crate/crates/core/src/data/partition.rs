use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, SampleRecord};
use crate::error::{Error, Result};

/// Privacy protocol deciding how training data is split into clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Camera independence: one client per camera.
    Ci,
    /// Entity independence: one client per entity, unseen entity held out.
    Ei,
    /// Entity sharing: all training entities merged, unseen entity held out.
    Es,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ci => "ci",
            Protocol::Ei => "ei",
            Protocol::Es => "es",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ci" => Ok(Protocol::Ci),
            "ei" => Ok(Protocol::Ei),
            "es" => Ok(Protocol::Es),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub protocol: Protocol,
    pub clients: Vec<Dataset>,
    pub held_out: Option<Dataset>,
    /// Size of the shared label space across all clients.
    pub num_classes: usize,
}

impl PartitionSpec {
    pub fn total_records(&self) -> usize {
        self.clients.iter().map(Dataset::len).sum()
    }
}

/// Splits training data into clients according to `protocol`.
///
/// For EI and ES the training datasets get disjoint label ranges, offset by
/// the cumulative identity counts of the datasets before them.
pub fn partition(ds_list: &[Dataset], protocol: Protocol, held_out_index: Option<usize>) -> Result<PartitionSpec> {
    match protocol {
        Protocol::Ci => partition_cameras(ds_list, held_out_index),
        Protocol::Ei | Protocol::Es => partition_entities(ds_list, protocol, held_out_index),
    }
}

fn partition_cameras(ds_list: &[Dataset], held_out_index: Option<usize>) -> Result<PartitionSpec> {
    if ds_list.len() != 1 {
        return Err(Error::Config(format!(
            "camera independence takes exactly one dataset, got {}",
            ds_list.len()
        )));
    }
    if held_out_index.is_some() {
        return Err(Error::Config("camera independence has no held-out entity".into()));
    }
    let ds = &ds_list[0];
    let cameras = ds.camera_ids();
    if cameras.len() < 2 {
        return Err(Error::Config(format!(
            "dataset {} has a single camera; a camera federation needs at least two",
            ds.name
        )));
    }
    let clients = cameras
        .into_iter()
        .map(|cam| ds.filter(format!("{}-cam{cam}", ds.name), |r| r.camera_id == cam))
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionSpec {
        protocol: Protocol::Ci,
        clients,
        held_out: None,
        num_classes: ds.identity_count,
    })
}

fn partition_entities(ds_list: &[Dataset], protocol: Protocol, held_out_index: Option<usize>) -> Result<PartitionSpec> {
    if ds_list.len() < 2 {
        return Err(Error::Config(format!(
            "{protocol} needs at least two datasets, got {}",
            ds_list.len()
        )));
    }
    let held = held_out_index.ok_or_else(|| Error::Config(format!("{protocol} requires a held-out dataset")))?;
    if held >= ds_list.len() {
        return Err(Error::Config(format!(
            "held-out index {held} out of range for {} datasets",
            ds_list.len()
        )));
    }
    let held_out = ds_list[held].clone();
    let held_entities = held_out.entity_ids();

    let mut offset = 0;
    let mut seen_entities = BTreeSet::new();
    let mut clients = Vec::new();
    for (i, ds) in ds_list.iter().enumerate() {
        if i == held {
            continue;
        }
        let entities = ds.entity_ids();
        if entities.len() != 1 {
            return Err(Error::Config(format!(
                "dataset {} spans {} entities; each training dataset must be one entity",
                ds.name,
                entities.len()
            )));
        }
        if !entities.is_disjoint(&held_entities) || !entities.is_disjoint(&seen_entities) {
            return Err(Error::Config(format!(
                "dataset {} shares an entity with another dataset",
                ds.name
            )));
        }
        seen_entities.extend(entities);
        let records = ds
            .records
            .iter()
            .map(|r| SampleRecord {
                identity: r.identity + offset,
                ..r.clone()
            })
            .collect();
        clients.push(Dataset {
            name: ds.name.clone(),
            records,
            identity_count: 0,
            original_ids: None,
        });
        offset += ds.identity_count;
    }
    for c in &mut clients {
        c.identity_count = offset;
    }
    if protocol == Protocol::Es {
        let name = clients.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+");
        let records = clients.into_iter().flat_map(|c| c.records).collect();
        clients = vec![Dataset::new(name, records, offset)?];
    }
    Ok(PartitionSpec {
        protocol,
        clients,
        held_out: Some(held_out),
        num_classes: offset,
    })
}
