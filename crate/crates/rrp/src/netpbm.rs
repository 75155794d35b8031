//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use rrp_core::data::{byte_to_input, input_to_byte};
use rrp_core::evaluation::GrayImage;
use rrp_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Byte offset of the first sample.
    pub data_offset: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn read_uint(bytes: &[u8], i: usize, path: &Path, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(bytes, i);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::format(path, format!("missing {what} in header")));
    }
    let v = std::str::from_utf8(&bytes[start..end])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad {what} in header")))?;
    Ok((v, end))
}

pub fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            let found = other
                .map(|m| String::from_utf8_lossy(m).into_owned())
                .unwrap_or_default();
            return Err(Error::format(
                path,
                format!("unsupported magic {found:?}, expected binary \"P5\" or \"P6\""),
            ));
        }
    };
    let (width, i) = read_uint(bytes, 2, path, "width")?;
    let (height, i) = read_uint(bytes, i, path, "height")?;
    let (maxval, i) = read_uint(bytes, i, path, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "image has a zero dimension"));
    }
    match bytes.get(i) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(Error::format(
                path,
                "header is not followed by a whitespace byte",
            ))
        }
    }
    Ok(Header {
        channels,
        width,
        height,
        data_offset: i + 1,
    })
}

/// Decodes into `[C,H,W]` with samples mapped to `v / 255 - 0.5`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, path)?;
    let n = h.channels * h.width * h.height;
    let payload = &bytes[h.data_offset..];
    if payload.len() < n {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {n} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let plane = h.width * h.height;
    let mut data = vec![0.0; n];
    for (p, px) in payload[..n].chunks_exact(h.channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + p] = byte_to_input(b);
        }
    }
    Ok(Tensor::new(vec![h.channels, h.height, h.width], data)?)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only as much of the file as needed for its dimensions.
pub fn read_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.by_ref()
        .take(4096)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf, path)
}

pub fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Encodes a single-channel `[1,H,W]` tensor in input units as P5.
pub fn encode_tensor(t: &Tensor) -> rrp_core::Result<Vec<u8>> {
    let d = t.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(rrp_core::Error::Dimension(format!(
            "P5 needs [1,H,W], got {d:?}"
        )));
    }
    let pixels: Vec<u8> = t.data().iter().map(|&v| input_to_byte(v)).collect();
    Ok(encode_gray(d[2], d[1], &pixels))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_gray(img.width, img.height, &img.pixels)).map_err(|e| Error::io(path, e))
}
