//! Binary checkpoints for parameter vectors and global memories.
//!
//! Parameter file: magic `FRPV`, `u32` version, `u32` descriptor count, then
//! per segment a `u32` name length, the UTF-8 name and `u64` rows, cols,
//! offset and length, then a `u64` value count and the values as
//! little-endian `f64`.
//!
//! Memory file: magic `FRMB`, `u32` version, `u64` epoch, `u64` identity
//! count, `u64` dimension, then per identity a `u64` label, a `u64`
//! contributor count and `dimension` little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::GlobalMemory;
use crate::model::{Layout, ParameterVector, Segment};

pub const PARAMS_MAGIC: [u8; 4] = *b"FRPV";
pub const MEMORY_MAGIC: [u8; 4] = *b"FRMB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &ParameterVector) -> Vec<u8> {
    let segments = params.layout.segments();
    let mut out = Vec::with_capacity(16 + 8 * params.len() + 48 * segments.len());
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    for s in segments {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        for v in [s.rows, s.cols, s.offset, s.len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterVector> {
    let mut r = Reader::new(bytes, "parameter checkpoint");
    r.magic(PARAMS_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut segments = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.error("segment name is not UTF-8"))?;
        let rows = r.usize()?;
        let cols = r.usize()?;
        let offset = r.usize()?;
        let len = r.usize()?;
        segments.push(Segment {
            name,
            rows,
            cols,
            offset,
            len,
        });
    }
    let layout = Layout::from_segments(segments)?;
    let n = r.usize()?;
    let values = r.f64s(n)?;
    r.finish()?;
    ParameterVector::new(values, layout)
}

pub fn encode_memory(memory: &GlobalMemory) -> Vec<u8> {
    let dim = memory.centers().values().next().map_or(0, Vec::len);
    let mut out = Vec::new();
    out.extend_from_slice(&MEMORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [memory.epoch(), memory.len(), dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for (k, c) in memory.centers() {
        out.extend_from_slice(&(*k as u64).to_le_bytes());
        out.extend_from_slice(&(memory.contributor_counts()[k] as u64).to_le_bytes());
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_memory(bytes: &[u8]) -> Result<GlobalMemory> {
    let mut r = Reader::new(bytes, "memory snapshot");
    r.magic(MEMORY_MAGIC)?;
    r.version()?;
    let epoch = r.usize()?;
    let count = r.usize()?;
    let dim = r.usize()?;
    let mut centers = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for _ in 0..count {
        let k = r.usize()?;
        let contributors = r.usize()?;
        let center = r.f64s(dim)?;
        if centers.insert(k, center).is_some() {
            return Err(r.error(&format!("identity {k} stored twice")));
        }
        counts.insert(k, contributors);
    }
    r.finish()?;
    GlobalMemory::new(centers, counts, epoch)
}

pub fn save_params(path: &Path, params: &ParameterVector) -> Result<()> {
    write_atomic(path, &encode_params(params))
}

pub fn load_params(path: &Path) -> Result<ParameterVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes).map_err(|e| Error::State(format!("{}: {e}", path.display())))
}

pub fn save_memory(path: &Path, memory: &GlobalMemory) -> Result<()> {
    write_atomic(path, &encode_memory(memory))
}

pub fn load_memory(path: &Path) -> Result<GlobalMemory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_memory(&bytes).map_err(|e| Error::State(format!("{}: {e}", path.display())))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn error(&self, msg: &str) -> Error {
        Error::State(format!("{} at byte {}: {msg}", self.what, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            return Err(self.error("bad magic bytes"));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.error(&format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.error("value does not fit in usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }
}
