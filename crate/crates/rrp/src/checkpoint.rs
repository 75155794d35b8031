//! "RRPC" checkpoints: magic, u32 version, u32 tensor count, then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims and binary32 data.
//! All integers and floats are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rrp_core::model::ModelParams;
use rrp_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RRPC";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * params.numel() + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected \"RRPC\"",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    let mut seen = BTreeSet::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(path, format!("duplicate tensor name {name}")));
        }
        let ndim = r.take(1, "rank")?[0] as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if ndim == 0 || n == 0 {
            return Err(Error::format(
                path,
                format!("tensor {name} has empty dims {dims:?}"),
            ));
        }
        let raw = r.take(4 * n, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
