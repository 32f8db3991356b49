//! MCMF: a minimal little-endian container for real or complex float32 masks.
//!
//! ```text
//! 0..4    magic "MCMF"
//! 4       version (1)
//! 5       dtype: 0 = real f32, 1 = complex f32 interleaved (re, im)
//! 6..8    reserved, zero
//! 8..12   frames  T (u32)
//! 12..16  bins    F (u32)
//! 16..20  channels M (u32)
//! 20..    payload, t outer, f middle, m inner
//! ```

use std::path::Path;

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::tf::TfArray;

pub const MAGIC: &[u8; 4] = b"MCMF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

const DTYPE_REAL: u8 = 0;
const DTYPE_COMPLEX: u8 = 1;

/// Decoded mask payload at its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPayload {
    Real(TfArray<f32>),
    Complex(TfArray<Complex32>),
}

impl MaskPayload {
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            MaskPayload::Real(a) => a.shape(),
            MaskPayload::Complex(a) => a.shape(),
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, MaskPayload::Complex(_))
    }
}

fn u32_dim(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::MaskFile(format!("{what} dimension {n} does not fit in u32")))
}

pub fn encode_mcmf(mask: &MaskPayload) -> Result<Vec<u8>> {
    let (t, f, m) = mask.shape();
    let (dtype, scalars) = match mask {
        MaskPayload::Real(a) => (DTYPE_REAL, a.values().len()),
        MaskPayload::Complex(a) => (DTYPE_COMPLEX, a.values().len() * 2),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + scalars * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&u32_dim(t, "frame")?.to_le_bytes());
    out.extend_from_slice(&u32_dim(f, "bin")?.to_le_bytes());
    out.extend_from_slice(&u32_dim(m, "channel")?.to_le_bytes());
    match mask {
        MaskPayload::Real(a) => {
            for v in a.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        MaskPayload::Complex(a) => {
            for v in a.values() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_mcmf(bytes: &[u8]) -> Result<MaskPayload> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::MaskFile("not an MCMF file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::MaskFile(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::MaskFile(format!("unsupported MCMF version {}", bytes[4])));
    }
    let dtype = bytes[5];
    if dtype != DTYPE_REAL && dtype != DTYPE_COMPLEX {
        return Err(Error::MaskFile(format!("unknown MCMF dtype {dtype}")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::MaskFile("reserved header bytes must be zero".into()));
    }
    let dim = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let (t, f, m) = (dim(8), dim(12), dim(16));
    if t == 0 || f == 0 || m == 0 {
        return Err(Error::MaskFile(format!("empty mask dimensions {t}x{f}x{m}")));
    }
    let scalar_count = u64::from(t)
        .checked_mul(u64::from(f))
        .and_then(|n| n.checked_mul(u64::from(m)))
        .and_then(|n| n.checked_mul(if dtype == DTYPE_COMPLEX { 2 } else { 1 }));
    let payload_len = scalar_count
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::MaskFile(format!("dimension overflow in {t}x{f}x{m} header")))?;

    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(Error::MaskFile(format!(
            "truncated payload: header declares {payload_len} bytes, file holds {}",
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(Error::MaskFile(format!(
            "{} trailing bytes after payload",
            payload.len() - payload_len
        )));
    }

    let floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let (t, f, m) = (t as usize, f as usize, m as usize);
    Ok(if dtype == DTYPE_REAL {
        MaskPayload::Real(TfArray::from_vec(t, f, m, floats.collect())?)
    } else {
        let floats: Vec<f32> = floats.collect();
        let values = floats
            .chunks_exact(2)
            .map(|p| Complex32::new(p[0], p[1]))
            .collect();
        MaskPayload::Complex(TfArray::from_vec(t, f, m, values)?)
    })
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<MaskPayload> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_mcmf(&bytes).map_err(|e| match e {
        Error::MaskFile(msg) => Error::MaskFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_mask_file(path: impl AsRef<Path>, mask: &MaskPayload) -> Result<()> {
    std::fs::write(path, encode_mcmf(mask)?)?;
    Ok(())
}
