//! Image files: `.rawf32` (u64 rank, u64 extents, f32 data, all little
//! endian) and 8-bit binary PGM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::ImageFormat {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_rawf32<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape().len()) + 4 * t.numel());
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_rawf32(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(8 * i..8 * i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| format_err(path, "truncated header"))
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(format_err(path, format!("implausible rank {rank}")));
    }
    let shape = (1..=rank).map(|i| word(i).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[8 * (rank + 1)..];
    let numel: usize = shape.iter().product();
    if body.len() != 4 * numel {
        return Err(format_err(
            path,
            format!("shape {shape:?} needs {} data bytes, found {}", 4 * numel, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_rawf32<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_rawf32(t))
}

pub fn read_rawf32(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rawf32(&bytes, path)
}

/// 8-bit PGM of a `[1, H, W]` or `[H, W]` image; values are clamped to [0, 1].
pub fn encode_pgm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(Error::contract("pgm", format!("expected a single-channel image, got {other:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|x| (x.f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_pgm(t)?)
}

/// Read a binary PGM as a `[1, H, W]` image in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, "not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field `{s}`")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, "only 8-bit PGM is supported"));
    }
    let body = bytes.get(i..i + w * h).ok_or_else(|| format_err(path, "truncated pixel data"))?;
    let data = body.iter().map(|&b| b as f32 / maxval as f32).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Load an image by extension (`.rawf32` or `.pgm`) as `[1, H, W]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path)?,
        _ => read_rawf32(path)?,
    };
    match t.shape() {
        [1, _, _] => Ok(t),
        [h, w] => {
            let shape = vec![1, *h, *w];
            t.reshape(shape)
        }
        other => Err(format_err(path, format!("expected a single-channel image, got shape {other:?}"))),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
