//! Binary policy checkpoints.
//!
//! Layout (little-endian): magic `OMNINFT\0`, `u32` version, `u32` length +
//! JSON model config, `u32` parameter count, then per parameter: `u32` name
//! length + UTF-8 name, `u32` rank, `u64` per dimension, raw `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use omninft_autodiff::Tensor;

use super::{DualStreamPolicy, ModelConfig};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"OMNINFT\0";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_checkpoint(policy: &DualStreamPolicy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(policy.config()).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, policy.params().len() as u32);
    for (info, t) in policy.layout().params().iter().zip(policy.params()) {
        put_u32(&mut out, info.name.len() as u32);
        out.extend_from_slice(info.name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CoreError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<DualStreamPolicy> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?)
        .map_err(|e| CoreError::Checkpoint(format!("config header: {e}")))?;
    let count = c.u32()? as usize;
    let layout = super::Layout::new(&config);
    if count != layout.params().len() {
        return Err(CoreError::Checkpoint(format!(
            "expected {} parameters, found {count}",
            layout.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for info in layout.params() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CoreError::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != info.name {
            return Err(CoreError::Checkpoint(format!(
                "expected parameter `{}`, found `{name}`",
                info.name
            )));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    DualStreamPolicy::from_params(&config, params)
}

pub fn save_checkpoint(policy: &DualStreamPolicy, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_checkpoint(policy))?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DualStreamPolicy> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
