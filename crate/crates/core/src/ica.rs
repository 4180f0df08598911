//! Inter-modality cross-attention.
//!
//! Queries come from the modality-normalized features of one stream, keys and
//! values from the raw features of the other. `m_rgb` pairs IR queries with
//! RGB keys, so `y_rgb` carries RGB content at IR positions; `m_ir` is the
//! mirror image.

use crate::error::{shape_err, Result};
use crate::modnorm::{modality_normalize, ModNormParams};
use crate::tensor::{
    check_upsampled_extent, conv2d, deconv1x1_stride, gamma_inverse, gamma_reshape, matmul,
    softmax_rows, ConvParams, Tensor,
};

/// Query/key/value 1x1 projections of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvParams {
    pub wq: ConvParams,
    pub wk: ConvParams,
    pub wv: ConvParams,
}

impl QkvParams {
    pub fn identity(c: usize) -> Self {
        Self {
            wq: identity_1x1(c),
            wk: identity_1x1(c),
            wv: identity_1x1(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaParams {
    pub rgb: QkvParams,
    pub ir: QkvParams,
    /// Remaps RGB features onto IR statistics (produces the RGB query input).
    pub modnorm_rgb: ModNormParams,
    /// Remaps IR features onto RGB statistics (produces the IR query input).
    pub modnorm_ir: ModNormParams,
    /// Output projection of the RGB-valued path.
    pub wm: ConvParams,
    /// Output projection of the IR-valued path.
    pub wn: ConvParams,
}

impl IcaParams {
    /// Identity projections and zero modality-normalization networks: the
    /// untrained probe configuration.
    pub fn probe(c: usize) -> Self {
        Self {
            rgb: QkvParams::identity(c),
            ir: QkvParams::identity(c),
            modnorm_rgb: ModNormParams::zeros(c),
            modnorm_ir: ModNormParams::zeros(c),
            wm: identity_1x1(c),
            wn: identity_1x1(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.wm.in_channels()
    }
}

pub fn identity_1x1(c: usize) -> ConvParams {
    let w = Tensor::from_fn(&[c, c, 1, 1], |k| if k / c == k % c { 1.0 } else { 0.0 });
    ConvParams::new(w, Tensor::zeros(&[c])).expect("valid conv shape")
}

/// The six `(positions x C)` descriptors of one batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    pub q_rgb: Tensor,
    pub q_ir: Tensor,
    pub k_rgb: Tensor,
    pub k_ir: Tensor,
    pub v_rgb: Tensor,
    pub v_ir: Tensor,
}

/// Row-stochastic `(query positions x key positions)` attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    /// The `1/sqrt(C)` applied to the logits.
    pub scale: f64,
}

impl SimilarityMatrix {
    /// Key index carrying the largest weight for each query row. Ties resolve
    /// to the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        let (_, cols) = self.values.rows_cols().expect("rank-2");
        self.values
            .data()
            .chunks(cols)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.values.dims()[1];
        &self.values.data()[r * cols..(r + 1) * cols]
    }
}

/// Descriptors for every batch element. Keys and values come from the raw
/// features; queries from the modality-normalized ones.
pub fn make_descriptors(x_rgb: &Tensor, x_ir: &Tensor, p: &IcaParams) -> Result<Vec<Descriptors>> {
    if x_rgb.dims() != x_ir.dims() {
        return Err(shape_err!("rgb {:?} vs ir {:?}", x_rgb.dims(), x_ir.dims()));
    }
    let (n, ..) = x_rgb.nchw()?;
    let norm_rgb = modality_normalize(x_rgb, x_ir, &p.modnorm_rgb)?;
    let norm_ir = modality_normalize(x_ir, x_rgb, &p.modnorm_ir)?;
    let maps = [
        conv2d(&norm_rgb, &p.rgb.wq)?,
        conv2d(&norm_ir, &p.ir.wq)?,
        conv2d(x_rgb, &p.rgb.wk)?,
        conv2d(x_ir, &p.ir.wk)?,
        conv2d(x_rgb, &p.rgb.wv)?,
        conv2d(x_ir, &p.ir.wv)?,
    ];
    (0..n)
        .map(|b| {
            let mut d = maps
                .iter()
                .map(|m| gamma_reshape(&m.batch_item(b)?))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let mut next = || d.next().expect("six descriptors");
            Ok(Descriptors {
                q_rgb: next(),
                q_ir: next(),
                k_rgb: next(),
                k_ir: next(),
                v_rgb: next(),
                v_ir: next(),
            })
        })
        .collect()
}

/// `softmax_rows(q . k^T / sqrt(C))`: rows index queries, columns keys.
pub fn cross_similarity(q: &Tensor, k: &Tensor) -> Result<SimilarityMatrix> {
    let (_, cq) = q.rows_cols()?;
    let (_, ck) = k.rows_cols()?;
    if cq != ck {
        return Err(shape_err!("query has {cq} channels, key has {ck}"));
    }
    let scale = 1.0 / (cq as f64).sqrt();
    let logits = matmul(q, &k.transpose()?)?.scale(scale);
    Ok(SimilarityMatrix {
        values: softmax_rows(&logits)?,
        scale,
    })
}

/// `M . v`: each output row is a convex combination of value rows.
pub fn soft_attention(m: &SimilarityMatrix, v: &Tensor) -> Result<Tensor> {
    let (_, keys) = m.values.rows_cols()?;
    let (rows, _) = v.rows_cols()?;
    if keys != rows {
        return Err(shape_err!("attention over {keys} keys, value has {rows} rows"));
    }
    matmul(&m.values, v)
}

/// Forward pass outputs with the per-batch attention maps kept for
/// inspection.
#[derive(Clone, Debug)]
pub struct IcaOutput {
    pub y_rgb: Tensor,
    pub y_ir: Tensor,
    pub m_rgb: Vec<SimilarityMatrix>,
    pub m_ir: Vec<SimilarityMatrix>,
}

/// Cross-attention over sampled `(N, C, Hs, Ws)` features, projected and
/// upsampled by stride `s` back to `out_shape`.
pub fn ica_forward(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &IcaParams,
    s: usize,
    out_shape: (usize, usize),
) -> Result<(Tensor, Tensor)> {
    let out = ica_forward_detailed(x_rgb, x_ir, p, s, out_shape)?;
    Ok((out.y_rgb, out.y_ir))
}

pub fn ica_forward_detailed(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &IcaParams,
    s: usize,
    (out_h, out_w): (usize, usize),
) -> Result<IcaOutput> {
    let (_, _, hs, ws) = x_rgb.nchw()?;
    check_upsampled_extent(hs, s, out_h)?;
    check_upsampled_extent(ws, s, out_w)?;
    let descriptors = make_descriptors(x_rgb, x_ir, p)?;
    let mut m_rgb = Vec::with_capacity(descriptors.len());
    let mut m_ir = Vec::with_capacity(descriptors.len());
    let mut parts_rgb = Vec::with_capacity(descriptors.len());
    let mut parts_ir = Vec::with_capacity(descriptors.len());
    for d in &descriptors {
        let a_rgb = cross_similarity(&d.q_ir, &d.k_rgb)?;
        let a_ir = cross_similarity(&d.q_rgb, &d.k_ir)?;
        parts_rgb.push(gamma_inverse(&soft_attention(&a_rgb, &d.v_rgb)?, hs, ws)?);
        parts_ir.push(gamma_inverse(&soft_attention(&a_ir, &d.v_ir)?, hs, ws)?);
        m_rgb.push(a_rgb);
        m_ir.push(a_ir);
    }
    let y_rgb = deconv1x1_stride(&Tensor::stack_batch(&parts_rgb)?, &p.wm, s, out_h, out_w)?;
    let y_ir = deconv1x1_stride(&Tensor::stack_batch(&parts_ir)?, &p.wn, s, out_h, out_w)?;
    Ok(IcaOutput {
        y_rgb,
        y_ir,
        m_rgb,
        m_ir,
    })
}
