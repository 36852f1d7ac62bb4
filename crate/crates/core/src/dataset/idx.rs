//! Reader and writer for the IDX container used by the MNIST distribution.
//!
//! Layout: two zero bytes, a type code (`0x08` = unsigned byte), the number
//! of dimensions, one big-endian `u32` per dimension, then the raw payload.
//! Files ending in `.gz` are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

const UBYTE_TYPE: u8 = 0x08;

/// An unsigned-byte tensor decoded from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let bytes = if path.extension().is_some_and(|ext| ext == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Idx {
            offset: bytes.len() as u64,
            reason: "file shorter than the 4-byte magic number".into(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE_TYPE || bytes[3] == 0 {
        return Err(Error::Idx {
            offset: 0,
            reason: format!("bad magic number {magic:#010x}"),
        });
    }
    let ndims = bytes[3] as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::Idx {
            offset: bytes.len() as u64,
            reason: format!("truncated header: {ndims} dimensions need {header_len} bytes"),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let size =
            u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
        total = total.checked_mul(size).ok_or_else(|| Error::Idx {
            offset: at as u64,
            reason: "dimension product overflows".into(),
        })?;
        dims.push(size);
    }
    let available = bytes.len() - header_len;
    if available < total {
        return Err(Error::Idx {
            offset: bytes.len() as u64,
            reason: format!("truncated payload: expected {total} bytes, found {available}"),
        });
    }
    if available > total {
        return Err(Error::Idx {
            offset: (header_len + total) as u64,
            reason: format!("{} trailing bytes after payload", available - total),
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Encodes an unsigned-byte tensor as IDX.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let total: usize = dims.iter().product();
    if dims.is_empty() || dims.len() > 255 || total != data.len() {
        return Err(Error::invalid(format!(
            "IDX tensor with dims {dims:?} cannot hold {} bytes",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, UBYTE_TYPE, dims.len() as u8]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_idx(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
