//! Checkpoint files: the magic `ADVPOSE1`, a little-endian `u32` version,
//! then named records until end of file. Each record is
//! `u32 name_len | name (UTF-8) | u32 rank | rank × u64 dims | f64 values`,
//! all little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::EngineError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVPOSE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated inside record {0:?}")]
    Truncated(String),
    #[error("malformed checkpoint record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Record {
    pub fn from_array(name: String, a: &Array2<f64>) -> Self {
        Self { name, dims: a.shape().to_vec(), values: a.iter().copied().collect() }
    }

    pub fn vector(name: String, values: Vec<f64>) -> Self {
        Self { name, dims: vec![values.len()], values }
    }

    pub fn scalar(name: String, v: f64) -> Self {
        Self::vector(name, vec![v])
    }

    pub fn to_array(&self) -> Result<Array2<f64>, EngineError> {
        let shape = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(EngineError::ShapeMismatch { expected: vec![0, 0], got: self.dims.clone() }),
        };
        Array2::from_shape_vec(shape, self.values.clone())
            .map_err(|_| EngineError::ShapeMismatch { expected: self.dims.clone(), got: vec![self.values.len()] })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|r| r.values.first().copied())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
            for &d in &r.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &r.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let version = cur.u32().ok_or(CheckpointError::VersionMismatch { found: 0 })?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let mut records = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32().ok_or_else(|| CheckpointError::Truncated(String::new()))? as usize;
            let name = cur.take(name_len).ok_or_else(|| CheckpointError::Truncated(String::new()))?;
            let name = String::from_utf8(name.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let trunc = || CheckpointError::Truncated(name.clone());
            let rank = cur.u32().ok_or_else(trunc)? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(cur.u64().ok_or_else(trunc)? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= bytes.len() / 8)
                .ok_or_else(|| CheckpointError::Malformed(format!("record {name:?} has absurd dims {dims:?}")))?;
            let raw = cur.take(count * 8).ok_or_else(trunc)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, dims, values });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
