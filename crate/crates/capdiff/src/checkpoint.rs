//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCKP" | version: u32 | config_len: u32 | config JSON (UTF-8)
//! then, repeated until EOF, one record per parameter in canonical order:
//!   name_len: u32 | name | rank: u32 | dims: u32 x rank | data: f32 x prod(dims)
//! ```
//!
//! Serialization is bit-exact: loading a checkpoint and saving it again
//! reproduces the original bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{CaptionDenoiser, ModelConfig};

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

pub fn save(model: &CaptionDenoiser, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn to_bytes(model: &CaptionDenoiser) -> Vec<u8> {
    let config_json = serde_json::to_string(model.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    for (name, tensor) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load(path: &Path) -> Result<CaptionDenoiser> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<CaptionDenoiser> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {:?}, want {:?}",
            &magic[..],
            MAGIC
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, want {VERSION}"
        )));
    }
    let config_len = cur.u32()? as usize;
    let config_bytes = cur.take(config_len)?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Data(format!("bad checkpoint config JSON: {e}")))?;

    let mut named: Vec<(String, Tensor)> = Vec::new();
    while !cur.at_end() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Data(format!("bad parameter name: {e}")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }

    let expected = config.param_shapes();
    if named.len() != expected.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, config wants {}",
            named.len(),
            expected.len()
        )));
    }
    for ((got_name, _), (want_name, _)) in named.iter().zip(&expected) {
        if got_name != want_name {
            return Err(Error::Data(format!(
                "checkpoint parameter '{got_name}' where '{want_name}' was expected"
            )));
        }
    }
    let params: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    CaptionDenoiser::from_params(config, params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
