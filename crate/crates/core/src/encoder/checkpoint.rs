//! Checkpoint directories: `params.bin`, `config.json`, `schema.json`.
//!
//! `params.bin` layout, all integers little-endian:
//!
//! ```text
//! magic  b"SSCBMPAR"
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes (utf-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f32 payload
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Params, Tensor};
use crate::dataset::ConceptSchema;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"SSCBMPAR";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub schema: ConceptSchema,
}

/// Serialize named tensors. Values are narrowed to f32.
pub fn write_params(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(16u32).to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("params.bin truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse `params.bin` bytes and check names and shapes against `cfg`.
pub fn read_params(bytes: &[u8], cfg: &ModelConfig) -> Result<Params> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic in params.bin".into()));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{name}` too large"))
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        named.push((name, Tensor { shape, data }));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in params.bin".into()));
    }
    Params::from_named(cfg, named)
}

pub fn save_checkpoint(dir: &Path, model: &Model, schema: &ConceptSchema) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, write_params(&model.params)).at(&p)?;
    let c = dir.join(CONFIG_FILE);
    fs::write(&c, serde_json::to_vec_pretty(&model.config)?).at(&c)?;
    let s = dir.join(SCHEMA_FILE);
    fs::write(&s, serde_json::to_vec_pretty(schema)?).at(&s)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let c = dir.join(CONFIG_FILE);
    let config: ModelConfig = serde_json::from_slice(&fs::read(&c).at(&c)?)?;
    config.validate()?;
    let s = dir.join(SCHEMA_FILE);
    let schema: ConceptSchema = serde_json::from_slice(&fs::read(&s).at(&s)?)?;
    schema.validate()?;
    if schema.k != config.k {
        return Err(Error::Checkpoint(format!(
            "schema has k = {}, config has k = {}",
            schema.k, config.k
        )));
    }
    let p = dir.join(PARAMS_FILE);
    let params = read_params(&fs::read(&p).at(&p)?, &config)?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        schema,
    })
}
