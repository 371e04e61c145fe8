//! Manifest files: a comma-separated text file with the header
//! `tensor_path,identity,modality,camera_id,entity_id`, one record per line.
//! `tensor_path` is relative to the manifest's directory and `modality` is
//! `V` or `I`. Tensor files hold a little-endian `u32` height and width
//! followed by `3·H·W` little-endian `f32` values in channel-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, Modality, SampleRecord};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["tensor_path", "identity", "modality", "camera_id", "entity_id"];

/// Reads a tensor file, returning `(height, width, values)`.
pub fn read_tensor(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Input(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated tensor header".into()));
    }
    let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 4 * 3 * height * width;
    if bytes.len() != expected || height == 0 || width == 0 {
        return Err(bad(format!(
            "expected {expected} bytes for a 3x{height}x{width} tensor, found {}",
            bytes.len()
        )));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((height, width, values))
}

pub fn write_tensor(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a manifest. Identities are relabeled densely in ascending order of
/// their original identifier, which is kept in `original_ids`.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let load_err = |line: usize, message: String| Error::Load {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => load_err(0, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| load_err(1, e.to_string()))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(load_err(1, format!("expected header {}", MANIFEST_HEADER.join(","))));
    }

    let mut raw = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            load_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).unwrap_or("");
        let parse_int = |i: usize| {
            field(i)
                .parse::<u64>()
                .map_err(|_| load_err(line, format!("field {} is not a non-negative integer: {:?}", MANIFEST_HEADER[i], field(i))))
        };
        let identity = parse_int(1)?;
        let modality = Modality::from_code(field(2))
            .ok_or_else(|| load_err(line, format!("modality must be V or I, got {:?}", field(2))))?;
        let camera_id = parse_int(3)? as usize;
        let entity_id = parse_int(4)? as usize;
        let tensor_path = base.join(field(0));
        let (height, width, pixels) =
            read_tensor(&tensor_path).map_err(|e| load_err(line, format!("tensor {}: {e}", tensor_path.display())))?;
        let record = SampleRecord {
            pixels,
            height,
            width,
            identity: 0,
            modality,
            camera_id,
            entity_id,
        };
        record.validate().map_err(|e| load_err(line, e.to_string()))?;
        raw.push((identity, record));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset(format!("empty dataset in {}", path.display())));
    }
    let mut dense: BTreeMap<u64, usize> = raw.iter().map(|(id, _)| (*id, 0)).collect();
    for (i, v) in dense.values_mut().enumerate() {
        *v = i;
    }
    let original_ids: Vec<u64> = dense.keys().copied().collect();
    let records = raw
        .into_iter()
        .map(|(id, r)| SampleRecord { identity: dense[&id], ..r })
        .collect();
    let name = path
        .file_stem()
        .map_or_else(|| "manifest".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        name,
        records,
        identity_count: original_ids.len(),
        original_ids: Some(original_ids),
    })
}

/// Writes `dataset` as `<dir>/<name>.csv` with tensors under
/// `<dir>/<name>/`. Returns the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path, name: &str) -> Result<PathBuf> {
    let tensor_dir = dir.join(name);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let manifest_path = dir.join(format!("{name}.csv"));
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", manifest_path.display()));
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (i, r) in dataset.records.iter().enumerate() {
        let rel = format!("{name}/{i:06}.bin");
        write_tensor(&dir.join(&rel), r.height, r.width, &r.pixels)?;
        let identity = dataset
            .original_ids
            .as_ref()
            .map_or(r.identity as u64, |o| o[r.identity]);
        writer
            .write_record([
                rel,
                identity.to_string(),
                r.modality.code().to_string(),
                r.camera_id.to_string(),
                r.entity_id.to_string(),
            ])
            .map_err(csv_err)?;
    }
    let mut inner = writer
        .into_inner()
        .map_err(|e| Error::Input(format!("{}: {e}", manifest_path.display())))?;
    inner.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
