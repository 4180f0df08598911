use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"C2TF";
pub const VERSION: u8 = 1;
/// Magic, version, rank and reserved bytes; the dims follow.
pub const HEADER_LEN: usize = 12;
const MAX_RANK: usize = 4;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() == 0 || t.rank() > MAX_RANK {
        return Err(FormatError::BadRank(t.rank() as u8).into());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (t.rank() + t.len()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0; 6]);
    for &d in t.dims() {
        out.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let truncated = |expected: usize| FormatError::Truncated {
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().expect("4 bytes")).into());
        }
        return Err(truncated(HEADER_LEN).into());
    }
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version).into());
    }
    let rank = r.read_u8()?;
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(FormatError::BadRank(rank).into());
    }
    let mut reserved = [0u8; 6];
    r.read_exact(&mut reserved)?;
    if reserved != [0; 6] {
        return Err(FormatError::BadReserved.into());
    }
    let dims_end = HEADER_LEN + 8 * rank as usize;
    if bytes.len() < dims_end {
        return Err(truncated(dims_end).into());
    }
    let dims = (0..rank)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(FormatError::ZeroExtent(dims).into());
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(dims_end))
        .ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < count {
        return Err(truncated(count).into());
    }
    if bytes.len() > count {
        return Err(FormatError::TrailingBytes {
            expected: count,
            actual: bytes.len(),
        }
        .into());
    }
    let mut data = vec![0.0; (count - dims_end) / 8];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Tensor::new(&dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?).map_err(Error::from)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}
