use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary P5 graymap of a rank-2 map, min-max scaled to `0..=255`. A
/// constant map renders as mid-gray 128.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = map.rows_cols()?;
    if !map.is_finite() {
        return Err(Error::InvalidArgument("map has non-finite values".into()));
    }
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).map_err(Error::from)
}
