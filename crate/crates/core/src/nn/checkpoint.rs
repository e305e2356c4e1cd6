//! Network checkpoints.
//!
//! ```text
//! "KDCK" | version u16 | seed u64 | tag_len u16 | tag (utf-8)
//! n_layers u32 | per layer: fan_in u32, fan_out u32, activation u8
//! per layer: weights (row-major f64), bias (f64)
//! ```
//!
//! All little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, Layer, NetworkParams};
use crate::error::{io_at, KdError, Result};

pub const MAGIC: &[u8; 4] = b"KDCK";
pub const VERSION: u16 = 1;

pub fn to_bytes(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed.to_le_bytes());
    let tag = params.arch_tag.as_bytes();
    out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
    out.extend_from_slice(tag);
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.weights.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.weights.ncols() as u32).to_le_bytes());
        out.push(l.activation.code());
    }
    for l in &params.layers {
        for &w in l.weights.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in l.bias.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_at(path))?);
    w.write_all(&to_bytes(params))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    from_bytes(&fs::read(path).map_err(io_at(path))?).map_err(|reason| KdError::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| "truncated checkpoint".to_string())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<NetworkParams, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("not a KDCK checkpoint".into());
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let seed = c.u64()?;
    let tag_len = c.u16()? as usize;
    let arch_tag = String::from_utf8(c.take(tag_len)?.to_vec()).map_err(|_| "architecture tag is not utf-8")?;
    let n_layers = c.u32()? as usize;
    // each descriptor is 9 bytes; refuse counts the file cannot hold
    if n_layers == 0 || n_layers.saturating_mul(9) > buf.len() {
        return Err(format!("implausible layer count {n_layers}"));
    }
    let mut descriptors = Vec::with_capacity(n_layers);
    let mut total = 0usize;
    for _ in 0..n_layers {
        let fan_in = c.u32()? as usize;
        let fan_out = c.u32()? as usize;
        let act = c.take(1)?[0];
        let activation = Activation::from_code(act).ok_or_else(|| format!("unknown activation code {act}"))?;
        total = fan_in
            .checked_mul(fan_out)
            .and_then(|w| w.checked_add(fan_out))
            .and_then(|n| n.checked_add(total))
            .ok_or("size overflow")?;
        descriptors.push((fan_in, fan_out, activation));
    }
    if buf.len() - c.pos != total.checked_mul(8).ok_or("size overflow")? {
        return Err(format!(
            "payload is {} bytes, descriptors imply {}",
            buf.len() - c.pos,
            total * 8
        ));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (fan_in, fan_out, activation) in descriptors {
        let weights = Array2::from_shape_vec((fan_in, fan_out), c.f64s(fan_in * fan_out)?).map_err(|e| e.to_string())?;
        let bias = Array1::from(c.f64s(fan_out)?);
        layers.push(Layer { weights, bias, activation });
    }
    let params = NetworkParams { layers, seed, arch_tag };
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}
