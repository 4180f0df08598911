//! Dense `f64` tensors and the numerical kernels the fusion block is built
//! from.
//!
//! Feature maps are rank-4 `(N, C, H, W)` row-major arrays. Descriptors and
//! similarity matrices are rank-2. Every kernel here is a pure function of its
//! inputs.

use rand::{Rng, RngExt};

use crate::error::{shape_err, Error, Result};

/// Variance guard inside the instance standard deviation.
pub const NORM_EPS: f64 = 1e-5;

/// Pixel coordinates this close to an integer are snapped onto it before
/// bilinear interpolation, so that grid points sample exactly.
pub const SNAP_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(shape_err!("rank {} out of range 1..=4", dims.len()));
        }
        if dims.contains(&0) {
            return Err(shape_err!("zero extent in {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panics on invalid dims; for internal construction with known shapes.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("valid dims")
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect()).expect("valid dims")
    }

    /// Uniform samples in `[lo, hi]`, drawn in row-major order.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.random_range(lo..=hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    /// `(N, C, H, W)` of a rank-4 feature map.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 feature map, got {:?}", self.dims)),
        }
    }

    /// `(rows, cols)` of a rank-2 matrix.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match *self.dims.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected rank-2 matrix, got {:?}", self.dims)),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.dims[..] else {
            panic!("at4 on rank {}", self.rank())
        };
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Copy of batch element `n` as a `(1, C, H, W)` map.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (nn, c, h, w) = self.nchw()?;
        if n >= nn {
            return Err(shape_err!("batch index {n} out of range {nn}"));
        }
        let sz = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[n * sz..(n + 1) * sz].to_vec())
    }

    /// Stack `(1, C, H, W)` maps (or any equal-shaped rank-4 maps) along the
    /// batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (_, c, h, w) = first.nchw()?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.nchw()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err!("stack {:?} vs {:?}", t.dims, first.dims));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

/// Weight `(out, in, kH, kW)` and bias `(out)` of a stride-1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [o, _, kh, kw] = weight.dims()[..] else {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.dims()));
        };
        if kh != kw || (kh != 1 && kh != 3) {
            return Err(Error::KernelSize(kh, kw));
        }
        if bias.dims() != [o] {
            return Err(shape_err!("bias {:?} for {o} output channels", bias.dims()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        Self::new(Tensor::zeros(&[out_c, in_c, k, k]), Tensor::zeros(&[out_c]))
            .expect("valid conv shape")
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Stride-1 convolution; 3x3 kernels pad by one so `H x W` is preserved.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let [oc, ic, kh, kw] = p.weight.dims()[..] else {
        return Err(shape_err!("conv weight must be rank 4"));
    };
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(Error::KernelSize(kh, kw));
    }
    if ic != c {
        return Err(shape_err!("conv expects {ic} input channels, got {c}"));
    }
    let pad = kh / 2;
    let wt = p.weight.data();
    let xd = x.data();
    let mut out = vec![0.0; n * oc * h * w];
    for b in 0..n {
        for o in 0..oc {
            let bias = p.bias.data()[o];
            let plane = &mut out[(b * oc + o) * h * w..(b * oc + o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..ic {
                let src = &xd[(b * c + i) * h * w..(b * c + i + 1) * h * w];
                for dh in 0..kh {
                    for dw in 0..kw {
                        let k = wt[((o * ic + i) * kh + dh) * kw + dw];
                        if k == 0.0 {
                            continue;
                        }
                        for yy in 0..h {
                            let sy = yy as isize + dh as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let row = &src[sy as usize * w..(sy as usize + 1) * w];
                            for xx in 0..w {
                                let sx = xx as isize + dw as isize - pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                plane[yy * w + xx] += k * row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oc, h, w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `2 * tanh(v)`, bounding offsets to the open interval `(-2, 2)`.
pub fn scaled_tanh(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v.tanh())
}

/// Numerically stable softmax over each row of a matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.rows_cols()?;
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[r, c], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, k) = a.rows_cols()?;
    let (k2, r) = b.rows_cols()?;
    if k != k2 {
        return Err(shape_err!("matmul ({p}x{k}) . ({k2}x{r})"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * r..(t + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[p, r], out)
}

/// `(1, C, H, W)` to `(H*W, C)`, position index `h*W + w`.
pub fn gamma_reshape(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if n != 1 {
        return Err(shape_err!("gamma_reshape takes a single batch item, got N={n}"));
    }
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x.data()[ch * hw + p];
        }
    }
    Tensor::new(&[hw, c], out)
}

/// Inverse of [`gamma_reshape`]: `(H*W, C)` to `(1, C, H, W)`.
pub fn gamma_inverse(d: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (p, c) = d.rows_cols()?;
    if p != h * w {
        return Err(shape_err!("descriptor has {p} rows, expected {h}x{w}"));
    }
    let mut out = vec![0.0; p * c];
    for ch in 0..c {
        for pos in 0..p {
            out[ch * p + pos] = d.data()[pos * c + ch];
        }
    }
    Tensor::new(&[1, c, h, w], out)
}

/// Per-`(n, c)` mean and `sqrt(population variance + NORM_EPS)`, each `(N, C)`.
pub fn instance_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.nchw()?;
    let hw = (h * w) as f64;
    let mut mu = vec![0.0; n * c];
    let mut sigma = vec![0.0; n * c];
    for (idx, plane) in x.data().chunks(h * w).enumerate() {
        let m = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        mu[idx] = m;
        sigma[idx] = (var + NORM_EPS).sqrt();
    }
    Ok((Tensor::new(&[n, c], mu)?, Tensor::new(&[n, c], sigma)?))
}

/// `(x - mu) / sigma` per `(n, c)` plane.
pub fn instance_normalize(x: &Tensor) -> Result<Tensor> {
    let (mu, sigma) = instance_stats(x)?;
    let (_, _, h, w) = x.nchw()?;
    let mut out = x.data().to_vec();
    for (idx, plane) in out.chunks_mut(h * w).enumerate() {
        let (m, s) = (mu.data()[idx], sigma.data()[idx]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Tensor::new(x.dims(), out)
}

/// Adds an `(N, C)` table to every pixel of the matching `(n, c)` plane.
pub fn add_channel_stats(x: &Tensor, stats: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if stats.dims() != [n, c] {
        return Err(shape_err!("stats {:?} for map {:?}", stats.dims(), x.dims()));
    }
    let mut out = x.data().to_vec();
    for (idx, plane) in out.chunks_mut(h * w).enumerate() {
        let s = stats.data()[idx];
        plane.iter_mut().for_each(|v| *v += s);
    }
    Tensor::new(x.dims(), out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("concat {:?} with {:?}", a.dims(), b.dims()));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// Corner-aligned normalized coordinate to a pixel position along an axis of
/// `extent` samples. Extent 1 maps every coordinate onto pixel 0.
pub fn normalized_to_pixel(u: f64, extent: usize) -> f64 {
    if extent <= 1 {
        return 0.0;
    }
    let p = (u + 1.0) * 0.5 * (extent - 1) as f64;
    let r = p.round();
    if (p - r).abs() <= SNAP_TOL {
        r
    } else {
        p
    }
}

/// Bilinear weights and integer corner of a sample at pixel `(py, px)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub y0: isize,
    pub x0: isize,
    pub fy: f64,
    pub fx: f64,
}

impl BilinearTap {
    pub fn at(py: f64, px: f64) -> Self {
        let (y0, x0) = (py.floor(), px.floor());
        Self {
            y0: y0 as isize,
            x0: x0 as isize,
            fy: py - y0,
            fx: px - x0,
        }
    }

    /// `[(y, x, weight); 4]` in the order (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    pub fn corners(&self) -> [(isize, isize, f64); 4] {
        let (fy, fx) = (self.fy, self.fx);
        [
            (self.y0, self.x0, (1.0 - fy) * (1.0 - fx)),
            (self.y0, self.x0 + 1, (1.0 - fy) * fx),
            (self.y0 + 1, self.x0, fy * (1.0 - fx)),
            (self.y0 + 1, self.x0 + 1, fy * fx),
        ]
    }
}

pub(crate) fn sample_coords_layout(coords: &Tensor, n: usize) -> Result<(bool, usize, usize)> {
    match *coords.dims() {
        [hs, ws, 2] => Ok((false, hs, ws)),
        [cn, hs, ws, 2] if cn == n => Ok((true, hs, ws)),
        _ => Err(shape_err!(
            "coords {:?} must be (Hs, Ws, 2) or ({n}, Hs, Ws, 2)",
            coords.dims()
        )),
    }
}

/// Bilinear sampling at normalized `(u, v)` coordinates with zero padding.
///
/// `coords` is `(Hs, Ws, 2)` shared across the batch or `(N, Hs, Ws, 2)`;
/// channel 0 is the horizontal coordinate `u`, channel 1 the vertical `v`.
pub fn bilinear_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let (per_batch, hs, ws) = sample_coords_layout(coords, n)?;
    let mut out = vec![0.0; n * c * hs * ws];
    for b in 0..n {
        let cbase = if per_batch { b * hs * ws * 2 } else { 0 };
        for i in 0..hs {
            for j in 0..ws {
                let k = cbase + (i * ws + j) * 2;
                let px = normalized_to_pixel(coords.data()[k], w);
                let py = normalized_to_pixel(coords.data()[k + 1], h);
                let tap = BilinearTap::at(py, px);
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let mut acc = 0.0;
                    for (yy, xx, wt) in tap.corners() {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += wt * plane[yy as usize * w + xx as usize];
                        }
                    }
                    out[((b * c + ch) * hs + i) * ws + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, c, hs, ws], out)
}

/// 1x1 transposed convolution with upsampling stride `s`.
///
/// Output site `(h, w)` receives the projected input at `(h/s, w/s)` when both
/// divide evenly and the source lies inside the input, and only the bias
/// otherwise. `out_h` may exceed `Hs*s` by up to `s-1` rows (likewise
/// `out_w`), covering inputs whose extent was not a multiple of the stride.
pub fn deconv1x1_stride(
    y: &Tensor,
    p: &ConvParams,
    s: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (n, c, hs, ws) = y.nchw()?;
    if s == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if p.kernel() != 1 {
        return Err(Error::KernelSize(p.kernel(), p.kernel()));
    }
    if p.in_channels() != c {
        return Err(shape_err!("deconv expects {} channels, got {c}", p.in_channels()));
    }
    check_upsampled_extent(hs, s, out_h)?;
    check_upsampled_extent(ws, s, out_w)?;
    let oc = p.out_channels();
    let wt = p.weight.data();
    let mut out = vec![0.0; n * oc * out_h * out_w];
    for b in 0..n {
        for o in 0..oc {
            let bias = p.bias.data()[o];
            let plane = &mut out[(b * oc + o) * out_h * out_w..(b * oc + o + 1) * out_h * out_w];
            plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..c {
                let k = wt[o * c + i];
                let src = &y.data()[(b * c + i) * hs * ws..(b * c + i + 1) * hs * ws];
                for yy in 0..hs {
                    for xx in 0..ws {
                        plane[yy * s * out_w + xx * s] += k * src[yy * ws + xx];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oc, out_h, out_w], out)
}

pub(crate) fn check_upsampled_extent(small: usize, s: usize, out: usize) -> Result<()> {
    if out < small * s || out >= (small + 1) * s {
        return Err(shape_err!(
            "output extent {out} incompatible with {small} sites at stride {s}"
        ));
    }
    Ok(())
}
