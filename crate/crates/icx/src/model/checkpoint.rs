//! Versioned binary checkpoints: magic "ICX1", a text config block, then a
//! named table of f64 arrays, everything little-endian. Optimizer state
//! rides along as arrays under the reserved "opt." name prefix.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ICX1";

/// Name prefix for arrays that belong to the optimizer, not the model.
pub const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Model arrays only, optimizer extras filtered out.
    pub fn model_arrays(&self) -> impl Iterator<Item = &NamedArray> {
        self.arrays.iter().filter(|a| !a.name.starts_with(OPT_PREFIX))
    }

    pub fn opt_arrays(&self) -> impl Iterator<Item = &NamedArray> {
        self.arrays.iter().filter(|a| a.name.starts_with(OPT_PREFIX))
    }
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = cp.config.to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(cp.arrays.len() as u32).to_le_bytes());
    for a in &cp.arrays {
        let name = a.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Data(format!("array name too long: {}", a.name)));
        }
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(Error::Data(format!(
                "array {} has {} values for shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(a.shape.len() as u8);
        for &d in &a.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Data("checkpoint config block is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.at != buf.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            buf.len() - r.at
        )));
    }
    Ok(Checkpoint { config, arrays })
}
