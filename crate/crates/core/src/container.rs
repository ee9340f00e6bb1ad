//! `DAWT` tensor container used for checkpoints and feature-network assets.
//!
//! Layout (little-endian): magic `DAWT`, u16 version, u32 config length, config
//! block (UTF-8 `key = value` lines), u32 tensor count, then per tensor: u16
//! name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data.

use std::fs;
use std::path::Path;

use crate::bin::{Reader, Writer};

const MAGIC: &[u8; 4] = b"DAWT";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Ordered config entries plus named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, t: TensorRecord) {
        self.tensors.push(t);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(CONTAINER_VERSION);
        let text: String = self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        w.u32(text.len() as u32);
        w.bytes(text.as_bytes());
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u16(t.name.len() as u16);
            w.bytes(t.name.as_bytes());
            w.u8(t.shape.len() as u8);
            for &d in &t.shape {
                w.u32(d as u32);
            }
            for &v in &t.data {
                w.f32(v);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.bytes(len)?).map_err(|e| format!("config block: {e}"))?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| format!("malformed config line {line:?}"))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?.to_vec()).map_err(|e| format!("tensor name: {e}"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("tensor {name}: shape overflow"))?;
            if n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
                return Err(format!("tensor {name}: truncated data"));
            }
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            tensors.push(TensorRecord { name, shape, data });
        }
        r.expect_end()?;
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.encode())
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, String>> {
        Ok(Self::decode(&fs::read(path)?))
    }
}
