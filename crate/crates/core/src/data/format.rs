//! One small binary container for logits, features and labels.
//!
//! ```text
//! magic    [u8; 4]   "TLGT" | "DSET" | "LBLS"
//! version  u16       1
//! n        u32       rows
//! k        u32       columns (classes for TLGT/LBLS, features for DSET)
//! payload  n·k f32   (TLGT, DSET) or n u32 (LBLS)
//! checksum u64       CRC-64/ECMA-182 of the payload bytes
//! ```
//!
//! Everything is little-endian. For LBLS the payload holds `n` labels and `k`
//! is the class count.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use ndarray::Array2;

use crate::error::{io_at, KdError, Result};

pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;
const FOOTER_LEN: usize = 8;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magic {
    TeacherLogits,
    Features,
    Labels,
}

impl Magic {
    pub fn bytes(self) -> &'static [u8; 4] {
        match self {
            Magic::TeacherLogits => b"TLGT",
            Magic::Features => b"DSET",
            Magic::Labels => b"LBLS",
        }
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        match b {
            b"TLGT" => Some(Magic::TeacherLogits),
            b"DSET" => Some(Magic::Features),
            b"LBLS" => Some(Magic::Labels),
            _ => None,
        }
    }

    fn payload_len(self, n: usize, k: usize) -> Option<usize> {
        match self {
            Magic::Labels => n.checked_mul(4),
            _ => n.checked_mul(k)?.checked_mul(4),
        }
    }
}

/// Reads just the magic of a container file, if it is one.
pub fn sniff(path: &Path) -> Result<Option<Magic>> {
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path).map_err(io_at(path))?;
    if f.read_exact(&mut head).is_err() {
        return Ok(None);
    }
    Ok(Magic::from_bytes(&head))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> KdError {
    KdError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_container(path: &Path, magic: Magic, n: usize, k: usize, payload: &[u8]) -> Result<()> {
    let n32 = u32::try_from(n).map_err(|_| KdError::InvalidArgument(format!("{n} rows do not fit a u32")))?;
    let k32 = u32::try_from(k).map_err(|_| KdError::InvalidArgument(format!("{k} columns do not fit a u32")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_at(path))?);
    w.write_all(magic.bytes())?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n32.to_le_bytes())?;
    w.write_all(&k32.to_le_bytes())?;
    w.write_all(payload)?;
    w.write_all(&CRC64.checksum(payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Validates the header against the file size before touching the payload.
fn read_container(path: &Path, expect: Magic) -> Result<(usize, usize, Vec<u8>)> {
    let mut f = fs::File::open(path).map_err(io_at(path))?;
    let file_len = f.metadata()?.len();
    let mut header = [0u8; HEADER_LEN];
    f.read_exact(&mut header)
        .map_err(|_| corrupt(path, "file shorter than header"))?;
    let magic = Magic::from_bytes(&header[0..4]).ok_or_else(|| corrupt(path, "unknown magic"))?;
    if magic != expect {
        return Err(corrupt(
            path,
            format!(
                "expected {} file, found {}",
                String::from_utf8_lossy(expect.bytes()),
                String::from_utf8_lossy(magic.bytes())
            ),
        ));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let payload_len = magic
        .payload_len(n, k)
        .ok_or_else(|| corrupt(path, "header dimensions overflow"))?;
    let expected_len = (HEADER_LEN + payload_len + FOOTER_LEN) as u64;
    if file_len != expected_len {
        return Err(corrupt(
            path,
            format!("size {file_len} bytes, header implies {expected_len}"),
        ));
    }
    let mut payload = vec![0u8; payload_len];
    f.read_exact(&mut payload)?;
    let mut footer = [0u8; FOOTER_LEN];
    f.read_exact(&mut footer)?;
    if u64::from_le_bytes(footer) != CRC64.checksum(&payload) {
        return Err(corrupt(path, "checksum mismatch"));
    }
    Ok((n, k, payload))
}

/// Writes a matrix as f32 (TLGT or DSET).
pub fn write_matrix(path: &Path, magic: Magic, values: &Array2<f64>) -> Result<()> {
    debug_assert!(magic != Magic::Labels);
    let (n, k) = values.dim();
    let mut payload = Vec::with_capacity(n * k * 4);
    for &x in values.iter() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_container(path, magic, n, k, &payload)
}

pub fn read_matrix(path: &Path, magic: Magic) -> Result<Array2<f64>> {
    let (n, k, payload) = read_container(path, magic)?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((n, k), values).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &[usize], k: usize) -> Result<()> {
    let mut payload = Vec::with_capacity(labels.len() * 4);
    for &y in labels {
        let y = u32::try_from(y).map_err(|_| KdError::InvalidArgument(format!("label {y} does not fit a u32")))?;
        payload.extend_from_slice(&y.to_le_bytes());
    }
    write_container(path, Magic::Labels, labels.len(), k, &payload)
}

/// Labels and the class count.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    let (_, k, payload) = read_container(path, Magic::Labels)?;
    let labels: Vec<usize> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(corrupt(path, format!("label {bad} out of range for {k} classes")));
    }
    Ok((labels, k))
}
