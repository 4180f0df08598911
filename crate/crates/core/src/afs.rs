//! Adaptive feature sampling: predict a cross-modal offset field and sample
//! both streams on a stride-`s` reference grid, shifting only the RGB stream.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    bilinear_sample, concat_channels, conv2d, relu, scaled_tanh, ConvParams, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AfsParams {
    /// 1x1 channel reduction of the concatenated pair, `2C -> C`.
    pub wc: ConvParams,
    /// First deviation-network layer, 3x3 `C -> C`.
    pub fd1: ConvParams,
    /// Second deviation-network layer, 3x3 `C -> 2`.
    pub fd2: ConvParams,
}

impl AfsParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            wc: ConvParams::zeros(c, 2 * c, 1),
            fd1: ConvParams::zeros(c, c, 3),
            fd2: ConvParams::zeros(2, c, 3),
        }
    }
}

/// `(N, Hs, Ws, 2)` displacements `(du, dv)` in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub values: Tensor,
}

impl OffsetField {
    pub fn zeros(n: usize, hs: usize, ws: usize) -> Self {
        Self {
            values: Tensor::zeros(&[n, hs, ws, 2]),
        }
    }
}

/// `(Hs, Ws, 2)` normalized sampling points shared by both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub points: Tensor,
    pub stride: usize,
}

impl ReferenceGrid {
    pub fn extent(&self) -> (usize, usize) {
        (self.points.dims()[0], self.points.dims()[1])
    }

    /// Grid points displaced by `dp`, one copy per batch element.
    pub fn offset_by(&self, dp: &OffsetField) -> Result<Tensor> {
        let (hs, ws) = self.extent();
        let [n, dh, dw, 2] = dp.values.dims()[..] else {
            return Err(shape_err!("offset field {:?}", dp.values.dims()));
        };
        if (dh, dw) != (hs, ws) {
            return Err(shape_err!("offsets {dh}x{dw} on a {hs}x{ws} grid"));
        }
        let base = self.points.data();
        Ok(Tensor::from_fn(&[n, hs, ws, 2], |k| {
            base[k % base.len()] + dp.values.data()[k]
        }))
    }
}

/// Output extent along one axis after sampling at stride `s`.
pub fn sampled_extent(extent: usize, s: usize) -> usize {
    extent / s
}

fn normalize_axis(pixel: usize, extent: usize) -> f64 {
    if extent <= 1 {
        -1.0
    } else {
        2.0 * pixel as f64 / (extent - 1) as f64 - 1.0
    }
}

/// Reference point `(i, j)` sits on full-resolution pixel `(i*s, j*s)`,
/// expressed as `(u, v) = (2x/(W-1) - 1, 2y/(H-1) - 1)`.
pub fn make_reference_grid(h: usize, w: usize, s: usize) -> Result<ReferenceGrid> {
    if s == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if s > 1 && (h == 1 || w == 1) {
        return Err(Error::InvalidArgument(format!(
            "cannot normalize a {h}x{w} map at stride {s}"
        )));
    }
    let (hs, ws) = (sampled_extent(h, s), sampled_extent(w, s));
    if hs == 0 || ws == 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {s} leaves no reference points on a {h}x{w} map"
        )));
    }
    let mut pts = Vec::with_capacity(hs * ws * 2);
    for i in 0..hs {
        for j in 0..ws {
            pts.push(normalize_axis(j * s, w));
            pts.push(normalize_axis(i * s, h));
        }
    }
    Ok(ReferenceGrid {
        points: Tensor::new(&[hs, ws, 2], pts)?,
        stride: s,
    })
}

/// Full-resolution `2 tanh(fd2 * relu(fd1 * (wc * [rgb; ir])))`, `(N, 2, H, W)`.
pub fn offset_logits_field(x_rgb: &Tensor, x_ir: &Tensor, p: &AfsParams) -> Result<Tensor> {
    if x_rgb.dims() != x_ir.dims() {
        return Err(shape_err!("rgb {:?} vs ir {:?}", x_rgb.dims(), x_ir.dims()));
    }
    if p.fd2.out_channels() != 2 {
        return Err(shape_err!(
            "offset head must have 2 output channels, has {}",
            p.fd2.out_channels()
        ));
    }
    let xd = conv2d(&concat_channels(x_rgb, x_ir)?, &p.wc)?;
    let hidden = relu(&conv2d(&xd, &p.fd1)?);
    Ok(scaled_tanh(&conv2d(&hidden, &p.fd2)?))
}

/// Reads a `(N, 2, H, W)` field at the reference pixels `(i*s, j*s)`.
pub fn gather_at_grid(field: &Tensor, s: usize, hs: usize, ws: usize) -> Result<Tensor> {
    let (n, c, h, w) = field.nchw()?;
    if c != 2 || (hs - 1) * s >= h || (ws - 1) * s >= w {
        return Err(shape_err!(
            "cannot gather a {hs}x{ws} stride-{s} grid from {:?}",
            field.dims()
        ));
    }
    let mut out = Vec::with_capacity(n * hs * ws * 2);
    for b in 0..n {
        for i in 0..hs {
            for j in 0..ws {
                out.push(field.at4(b, 0, i * s, j * s));
                out.push(field.at4(b, 1, i * s, j * s));
            }
        }
    }
    Tensor::new(&[n, hs, ws, 2], out)
}

pub fn predict_offsets(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &AfsParams,
    s: usize,
) -> Result<OffsetField> {
    if s == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let field = offset_logits_field(x_rgb, x_ir, p)?;
    let (_, _, h, w) = field.nchw()?;
    let (hs, ws) = (sampled_extent(h, s), sampled_extent(w, s));
    if hs == 0 || ws == 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {s} leaves no reference points on a {h}x{w} map"
        )));
    }
    Ok(OffsetField {
        values: gather_at_grid(&field, s, hs, ws)?,
    })
}

/// Samples RGB at `grid + dp` and IR at `grid`, both to `(N, C, Hs, Ws)`.
pub fn afs_sample(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    grid: &ReferenceGrid,
    dp: &OffsetField,
) -> Result<(Tensor, Tensor)> {
    if x_rgb.dims() != x_ir.dims() {
        return Err(shape_err!("rgb {:?} vs ir {:?}", x_rgb.dims(), x_ir.dims()));
    }
    let (n, ..) = x_rgb.nchw()?;
    if dp.values.dims()[0] != n {
        return Err(shape_err!(
            "offsets for {} batch items, features have {n}",
            dp.values.dims()[0]
        ));
    }
    let shifted = grid.offset_by(dp)?;
    Ok((
        bilinear_sample(x_rgb, &shifted)?,
        bilinear_sample(x_ir, &grid.points)?,
    ))
}
