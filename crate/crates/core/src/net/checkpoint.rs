//! Binary parameter checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      8 bytes  "DSN3DCKP"
//! version    u32      1
//! digest     32 bytes SHA-256 of the architecture text below
//! config     u32 length + UTF-8 architecture in `key = value` form
//! count      u32      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8 bytes
//!   rank     u32
//!   extents  rank x u64
//!   values   product(extents) x f64
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::net::config::ArchitectureConfig;
use crate::net::params::{build_network, NetworkParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSN3DCKP";
pub const VERSION: u32 = 1;

pub fn config_digest(config: &ArchitectureConfig) -> [u8; 32] {
    Sha256::digest(config.canonical_text().as_bytes()).into()
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&params.config));
    put_str(&mut out, &params.config.canonical_text());
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        put_str(&mut out, &name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let text = r.string()?;
    if <[u8; 32]>::from(Sha256::digest(text.as_bytes())) != digest {
        return Err(Error::Format("architecture digest mismatch".into()));
    }
    let config = ArchitectureConfig::default().apply_kv(&KvMap::parse(&text)?)?;
    // Layout template only; every tensor is overwritten below.
    let mut params = build_network(&config, &mut Rng::new(0))?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            names.len()
        )));
    }
    for (slot, expected) in params.tensors_mut().into_iter().zip(&names) {
        let name = r.string()?;
        if &name != expected {
            return Err(Error::Format(format!("expected tensor `{expected}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let data = (0..slot.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        *slot = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}
