//! Label grids on disk: 4-byte magic, little-endian u32 version, height and
//! width, then row-major little-endian binary32 values.

use std::fs;
use std::path::Path;

use rrp_core::Tensor;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFileKind {
    Count,
    Density,
    Class,
}

impl LabelFileKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            LabelFileKind::Count => b"CMAP",
            LabelFileKind::Density => b"DMAP",
            LabelFileKind::Class => b"KMAP",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            LabelFileKind::Count => "cmap",
            LabelFileKind::Density => "dmap",
            LabelFileKind::Class => "kmap",
        }
    }
}

/// Encodes a `[1,H,W]` or `[H,W]` grid.
pub fn encode(kind: LabelFileKind, grid: &Tensor) -> rrp_core::Result<Vec<u8>> {
    let d = grid.dims();
    let (h, w) = match d.len() {
        2 => (d[0], d[1]),
        3 if d[0] == 1 => (d[1], d[2]),
        _ => {
            return Err(rrp_core::Error::Dimension(format!(
                "label grid must be [1,H,W], got {d:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(16 + 4 * grid.len());
    out.extend_from_slice(kind.magic());
    for v in [VERSION, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes into a `[1,H,W]` tensor.
pub fn decode(kind: LabelFileKind, bytes: &[u8], path: &Path) -> Result<Tensor> {
    let expected = kind.magic();
    if bytes.len() < 4 || &bytes[..4] != expected {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::format(
            path,
            format!(
                "bad magic {found:?}, expected {:?}",
                std::str::from_utf8(expected).unwrap()
            ),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, h, w) = (word(0), word(1) as usize, word(2) as usize);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let n = h * w;
    let payload = &bytes[16..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            path,
            format!(
                "truncated or oversized payload: expected {} bytes, found {}",
                4 * n,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

pub fn save(kind: LabelFileKind, grid: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(kind, grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(kind: LabelFileKind, path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes, path)
}
