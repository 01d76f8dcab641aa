//! SDLR parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SDLR"  u32 version
//! u32 config length, config bytes (key=value text of the model config)
//! u32 parameter count
//! per parameter: u16 name length, name bytes, u32 rank, u32 extents[rank], f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::SadlrConfig;
use crate::model::Model;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDLR";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(cfg: &SadlrConfig, store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = cfg.to_kv_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated checkpoint: need {n} bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(SadlrConfig, ParamStore<f32>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected \"SDLR\"".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            version,
            reason: format!("this build reads version {VERSION}"),
        });
    }
    let len = c.u32()? as usize;
    let at = c.pos;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format {
        offset: at as u64,
        reason: "config block is not UTF-8".into(),
    })?;
    let cfg = SadlrConfig::from_kv_text(text).map_err(|e| Error::Checkpoint {
        version,
        reason: e.to_string(),
    })?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = c.u16()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                reason: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let at = c.pos;
        let data = c
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: at as u64,
            reason: e.to_string(),
        })?;
        store.add(name, value)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            reason: "trailing bytes after parameters".into(),
        });
    }
    Ok((cfg, store))
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(&model.cfg, &model.store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, store) = decode_checkpoint(&bytes)?;
    Model::bind(&cfg, store).map_err(|e| Error::Checkpoint {
        version: VERSION,
        reason: e.to_string(),
    })
}

/// Fails unless `model` was saved with exactly `expected`.
pub fn check_compatible(model: &Model<f32>, expected: &SadlrConfig) -> Result<()> {
    if &model.cfg != expected {
        return Err(Error::Checkpoint {
            version: VERSION,
            reason: format!(
                "checkpoint config\n{}differs from requested config\n{}",
                model.cfg.to_kv_text(),
                expected.to_kv_text()
            ),
        });
    }
    Ok(())
}
