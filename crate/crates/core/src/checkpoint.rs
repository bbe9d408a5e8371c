//! The `MVWM` parameter checkpoint format.
//!
//! ```text
//! "MVWM"            4 bytes
//! version           u16   (= 1)
//! config_hash       u64   FNV-1a of the config text
//! config_len        u32, then UTF-8 config text
//! block_count       u32
//! per block:
//!   name_len        u16, then UTF-8 name
//!   rank            u8
//!   extents         rank × u32
//!   values          product(extents) × f32
//! ```
//!
//! Everything is little-endian.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::replay::Reader;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MVWM";
pub const VERSION: u16 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config_text: &str) -> Self {
        Self {
            config_hash: fnv1a64(config_text.as_bytes()),
            config_text: config_text.to_string(),
            blocks: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blocks.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Adds every tensor of `ps` as `{prefix}/{name}`.
    pub fn add_params(&mut self, prefix: &str, ps: &ParamSet<f32>) {
        for (name, t) in ps.iter() {
            self.blocks.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Overwrites `ps` from the `{prefix}/…` blocks; every parameter must be
    /// present with a matching shape.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamSet<f32>) -> Result<()> {
        for id in 0..ps.len() {
            let key = format!("{prefix}/{}", ps.name(id));
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint has no block {key}")))?;
            if t.shape() != ps.tensor(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    lhs: ps.tensor(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *ps.tensor_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.config_hash.to_le_bytes());
        w.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        w.extend_from_slice(self.config_text.as_bytes());
        w.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            w.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.push(t.shape().len() as u8);
            for &e in t.shape() {
                w.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_hash = r.u64()?;
        let n = r.u32()? as usize;
        let config_text = utf8(r.take(n)?)?;
        if fnv1a64(config_text.as_bytes()) != config_hash {
            return Err(Error::Format("config hash does not match embedded config".into()));
        }
        let count = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = utf8(r.take(n)?)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let data = r.f32s(numel(&shape))?;
            blocks.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_hash,
            config_text,
            blocks,
        })
    }
}

fn utf8(b: &[u8]) -> Result<String> {
    core::str::from_utf8(b)
        .map(ToString::to_string)
        .map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}
