//! Binary checkpoint file.
//!
//! Layout (little endian):
//! `"TAUCKPT1"`, `u32` version, `u32` header length, JSON header, `u32`
//! entry count, then per entry: `u8` kind (0 parameter, 1 norm buffer,
//! 2 momentum), `u16` name length, name, `u8` rank, `u32` extents, and the
//! values as `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelState, NamedArray};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"TAUCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub best_val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelState,
    pub momentum: Vec<NamedArray>,
}

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_MOMENTUM: u8 = 2;

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header);
        let entries: Vec<(u8, &NamedArray)> = self
            .model
            .params
            .iter()
            .map(|a| (KIND_PARAM, a))
            .chain(self.model.buffers.iter().map(|a| (KIND_BUFFER, a)))
            .chain(self.momentum.iter().map(|a| (KIND_MOMENTUM, a)))
            .collect();
        out.extend((entries.len() as u32).to_le_bytes());
        for (kind, a) in entries {
            let name = a.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidInput(format!("parameter name too long: {}", a.name)))?;
            out.push(kind);
            out.extend(name_len.to_le_bytes());
            out.extend(name);
            out.push(u8::try_from(a.shape.len()).map_err(|_| Error::InvalidInput("rank above 255".into()))?);
            for &d in &a.shape {
                out.extend(
                    u32::try_from(d)
                        .map_err(|_| Error::InvalidInput("extent above u32".into()))?
                        .to_le_bytes(),
                );
            }
            for &v in &a.data {
                out.extend((v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let count = r.u32()?;
        let mut ckpt = Checkpoint {
            header,
            model: ModelState::default(),
            momentum: vec![],
        };
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let a = NamedArray { name, shape, data };
            match kind {
                KIND_PARAM => ckpt.model.params.push(a),
                KIND_BUFFER => ckpt.model.buffers.push(a),
                KIND_MOMENTUM => ckpt.momentum.push(a),
                k => return Err(Error::format(path, format!("unknown entry kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
