//! Versioned binary checkpoints.
//!
//! Layout (little endian): the magic `DAGMIXCK`, a `u32` version, a sequence
//! of `(u8 tag, u64 length, payload)` sections, and a trailing SHA-256 of all
//! preceding bytes. Tensor lists are `u32 count` followed by
//! `(u32 name length, name, u32 ndim, u64 dims.., f64 data..)` entries.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DAGMIXCK";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

const TAG_PARAMS: u8 = 1;
const TAG_TARGET: u8 = 2;
const TAG_OPTIMIZER: u8 = 3;
const TAG_RNG: u8 = 4;
const TAG_COUNTERS: u8 = 5;
const TAG_CONFIG: u8 = 6;

/// Progress counters needed to continue a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    pub last_sync: u64,
    pub next_eval: u64,
    pub next_checkpoint: u64,
    /// Step count of the latest evaluation row, if any.
    pub last_eval: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub target: Vec<(String, Tensor)>,
    pub optimizer: Vec<Tensor>,
    /// Serialized generator states, opaque to this module.
    pub rng_state: String,
    pub counters: Counters,
    pub config_text: String,
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn named_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

/// Copies `tensors` into `store`, which must have the same names and shapes in order.
pub fn restore_tensors(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if store.len() != tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (entry, (name, t)) in store.entries_mut().iter_mut().zip(tensors) {
        if &entry.name != name || entry.value.shape() != t.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {} {:?} does not match checkpoint {} {:?}",
                entry.name,
                entry.value.shape(),
                name,
                t.shape()
            )));
        }
        entry.value.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config_text)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        let mut section = |tag: u8, payload: Vec<u8>| {
            out.push(tag);
            out.write_u64::<LittleEndian>(payload.len() as u64).unwrap();
            out.extend_from_slice(&payload);
        };
        section(TAG_PARAMS, encode_tensors(self.params.iter().map(|(n, t)| (n.as_str(), t))));
        section(TAG_TARGET, encode_tensors(self.target.iter().map(|(n, t)| (n.as_str(), t))));
        section(TAG_OPTIMIZER, encode_tensors(self.optimizer.iter().map(|t| ("", t))));
        section(TAG_RNG, self.rng_state.as_bytes().to_vec());
        section(TAG_COUNTERS, serde_json::to_vec(&self.counters).unwrap());
        section(TAG_CONFIG, self.config_text.as_bytes().to_vec());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Checkpoint { offset: offset as u64, message };
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(err(bytes.len(), "file too short for a checkpoint".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(err(0, "bad magic, not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(err(8, format!("unsupported version {version} (expected {VERSION})")));
        }
        let body_end = bytes.len() - CHECKSUM_LEN;
        let mut pos = 12;
        let mut sections: Vec<(u8, usize, &[u8])> = Vec::new();
        while pos < body_end {
            if body_end - pos < 9 {
                return Err(err(pos, "truncated section header".into()));
            }
            let tag = bytes[pos];
            let len = u64::from_le_bytes(bytes[pos + 1..pos + 9].try_into().unwrap());
            let start = pos + 9;
            if len > (body_end - start) as u64 {
                return Err(err(pos + 1, format!("section {tag} length {len} runs past the end")));
            }
            let end = start + len as usize;
            sections.push((tag, start, &bytes[start..end]));
            pos = end;
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(err(body_end, "checksum mismatch, file is corrupted".into()));
        }
        let find = |tag: u8| {
            sections
                .iter()
                .find(|s| s.0 == tag)
                .map(|&(_, start, data)| (start, data))
                .ok_or_else(|| err(body_end, format!("missing section {tag}")))
        };
        let text = |tag: u8| -> Result<String> {
            let (start, data) = find(tag)?;
            String::from_utf8(data.to_vec()).map_err(|e| err(start + e.utf8_error().valid_up_to(), "invalid UTF-8".into()))
        };
        let (p_start, p_data) = find(TAG_PARAMS)?;
        let (t_start, t_data) = find(TAG_TARGET)?;
        let (o_start, o_data) = find(TAG_OPTIMIZER)?;
        let (c_start, c_data) = find(TAG_COUNTERS)?;
        let counters = serde_json::from_slice(c_data).map_err(|e| err(c_start + e.column(), format!("counters: {e}")))?;
        Ok(Self {
            params: decode_tensors(p_data, p_start)?,
            target: decode_tensors(t_data, t_start)?,
            optimizer: decode_tensors(o_data, o_start)?.into_iter().map(|(_, t)| t).collect(),
            rng_state: text(TAG_RNG)?,
            counters,
            config_text: text(TAG_CONFIG)?,
        })
    }

    /// Writes to a temporary sibling then renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn encode_tensors<'a>(items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<LittleEndian>(items.len() as u32).unwrap();
    for (name, t) in items {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.ndim() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn decode_tensors(data: &[u8], base: usize) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor::new(data);
    let at = |cur: &Cursor<&[u8]>, message: String| Error::Checkpoint { offset: base as u64 + cur.position(), message };
    let remaining = |cur: &Cursor<&[u8]>| data.len() as u64 - cur.position();
    let count = cur.read_u32::<LittleEndian>().map_err(|e| at(&cur, format!("tensor count: {e}")))?;
    let mut out = Vec::new();
    for k in 0..count {
        let name_len = cur.read_u32::<LittleEndian>().map_err(|e| at(&cur, format!("tensor {k} name length: {e}")))?;
        if name_len as u64 > remaining(&cur) {
            return Err(at(&cur, format!("tensor {k} name length {name_len} runs past the section")));
        }
        let mut name = vec![0; name_len as usize];
        cur.read_exact(&mut name).map_err(|e| at(&cur, format!("tensor {k} name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| at(&cur, format!("tensor {k} name is not UTF-8")))?;
        let ndim = cur.read_u32::<LittleEndian>().map_err(|e| at(&cur, format!("tensor {name} rank: {e}")))?;
        if ndim as u64 * 8 > remaining(&cur) {
            return Err(at(&cur, format!("tensor {name} rank {ndim} runs past the section")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(cur.read_u64::<LittleEndian>().map_err(|e| at(&cur, format!("tensor {name} shape: {e}")))? as usize);
        }
        let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        match numel {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= remaining(&cur)) => {
                let mut values = vec![0.0; n as usize];
                cur.read_f64_into::<LittleEndian>(&mut values).map_err(|e| at(&cur, format!("tensor {name} data: {e}")))?;
                out.push((name, Tensor::new(&shape, values)?));
            }
            _ => return Err(at(&cur, format!("tensor {name} shape {shape:?} runs past the section"))),
        }
    }
    if cur.position() != data.len() as u64 {
        return Err(at(&cur, "trailing bytes after tensor list".into()));
    }
    Ok(out)
}
