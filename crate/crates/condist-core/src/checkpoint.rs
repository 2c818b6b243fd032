//! Checkpoint byte format: the unit of parameter exchange between server and
//! clients, and the on-disk model format.
//!
//! Layout (all integers little-endian):
//! magic `CDFL`, format version `u32`, entry count `u32`, metadata block
//! (round `u32`, step `u64`), then per entry: name length `u16` + UTF-8 name,
//! rank `u8`, extents `u32` each, float32 payload.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CDFL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered, named parameter arrays plus round/step metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub step: u64,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl CheckpointEntry {
    pub fn new(name: String, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::BadCheckpoint(format!(
                "entry {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(CheckpointEntry { name, shape, data })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.shape.len() as u8);
            for &ext in &e.shape {
                out.extend_from_slice(&(ext as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let round = r.u32()?;
        let step = r.u64()?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = core::str::from_utf8(name_bytes)
                .map_err(|_| Error::BadCheckpoint("entry name is not UTF-8".into()))?
                .into();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::BadCheckpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { round, step, entries })
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total parameter count across entries.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Entry-by-entry shape congruence with another checkpoint; the error
    /// names the first offending parameter.
    pub fn check_congruent(&self, other: &Checkpoint) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::AggregationMismatch(format!(
                "entry count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::AggregationMismatch(format!(
                    "parameter name {} vs {}",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(Error::AggregationMismatch(format!(
                    "parameter {}: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}
