//! One fusion block: sampling, cross-attention, upsampling and residual
//! injection into the opposite stream. Also multi-stage insertion.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::afs::{
    afs_sample, make_reference_grid, predict_offsets, sampled_extent, AfsParams, OffsetField,
};
use crate::error::{shape_err, Error, Result};
use crate::ica::{ica_forward_detailed, IcaOutput, IcaParams, QkvParams};
use crate::modnorm::ModNormParams;
use crate::tensor::{ConvParams, Tensor};

pub const DEFAULT_STRIDE: usize = 3;
/// 1-based backbone stages that receive a block by default.
pub const DEFAULT_ACTIVE_STAGES: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub seed: u64,
    /// When false, biases stay at zero and are not counted as parameters.
    pub bias_enabled: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, seed: u64) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            seed,
            bias_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("height and width must be >= 1".into()));
        }
        if self.sampled_height() == 0 || self.sampled_width() == 0 {
            return Err(Error::Config(format!(
                "stride {} leaves no reference points on {}x{}",
                self.stride, self.height, self.width
            )));
        }
        if self.stride > 1 && (self.height == 1 || self.width == 1) {
            return Err(Error::Config(
                "a 1-pixel axis cannot be normalized at stride > 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sampled_height(&self) -> usize {
        sampled_extent(self.height, self.stride)
    }

    pub fn sampled_width(&self) -> usize {
        sampled_extent(self.width, self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub afs: AfsParams,
    pub ica: IcaParams,
}

/// Parameter names in serialization order.
pub const CONV_NAMES: [&str; 17] = [
    "afs.wc",
    "afs.fd1",
    "afs.fd2",
    "ica.rgb.wq",
    "ica.rgb.wk",
    "ica.rgb.wv",
    "ica.ir.wq",
    "ica.ir.wk",
    "ica.ir.wv",
    "ica.modnorm_rgb.wd",
    "ica.modnorm_rgb.wb",
    "ica.modnorm_rgb.wg",
    "ica.modnorm_ir.wd",
    "ica.modnorm_ir.wb",
    "ica.modnorm_ir.wg",
    "ica.wm",
    "ica.wn",
];

impl BlockParams {
    /// All-zero parameters with the shapes a `channels`-wide block needs.
    pub fn zeros(c: usize) -> Self {
        let qkv = || QkvParams {
            wq: ConvParams::zeros(c, c, 1),
            wk: ConvParams::zeros(c, c, 1),
            wv: ConvParams::zeros(c, c, 1),
        };
        Self {
            afs: AfsParams::zeros(c),
            ica: IcaParams {
                rgb: qkv(),
                ir: qkv(),
                modnorm_rgb: ModNormParams::zeros(c),
                modnorm_ir: ModNormParams::zeros(c),
                wm: ConvParams::zeros(c, c, 1),
                wn: ConvParams::zeros(c, c, 1),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.ica.channels()
    }

    /// `(name, conv)` pairs in serialization order.
    pub fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        let (a, i) = (&self.afs, &self.ica);
        let convs = [
            &a.wc,
            &a.fd1,
            &a.fd2,
            &i.rgb.wq,
            &i.rgb.wk,
            &i.rgb.wv,
            &i.ir.wq,
            &i.ir.wk,
            &i.ir.wv,
            &i.modnorm_rgb.wd,
            &i.modnorm_rgb.wb,
            &i.modnorm_rgb.wg,
            &i.modnorm_ir.wd,
            &i.modnorm_ir.wb,
            &i.modnorm_ir.wg,
            &i.wm,
            &i.wn,
        ];
        CONV_NAMES.into_iter().zip(convs).collect()
    }

    pub fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        let (a, i) = (&mut self.afs, &mut self.ica);
        let convs = [
            &mut a.wc,
            &mut a.fd1,
            &mut a.fd2,
            &mut i.rgb.wq,
            &mut i.rgb.wk,
            &mut i.rgb.wv,
            &mut i.ir.wq,
            &mut i.ir.wk,
            &mut i.ir.wv,
            &mut i.modnorm_rgb.wd,
            &mut i.modnorm_rgb.wb,
            &mut i.modnorm_rgb.wg,
            &mut i.modnorm_ir.wd,
            &mut i.modnorm_ir.wb,
            &mut i.modnorm_ir.wg,
            &mut i.wm,
            &mut i.wn,
        ];
        CONV_NAMES.into_iter().zip(convs).collect()
    }

    /// Learnable scalar count; biases count only when enabled.
    pub fn param_count(&self, bias_enabled: bool) -> usize {
        self.convs()
            .iter()
            .map(|(_, p)| p.weight.len() + if bias_enabled { p.bias.len() } else { 0 })
            .sum()
    }

    /// Learnable scalars of the sampling stage alone.
    pub fn afs_param_count(&self, bias_enabled: bool) -> usize {
        self.convs()
            .iter()
            .filter(|(name, _)| name.starts_with("afs."))
            .map(|(_, p)| p.weight.len() + if bias_enabled { p.bias.len() } else { 0 })
            .sum()
    }

    /// Zeroes value projections and both output projections, weights and
    /// biases, which makes the block an exact identity.
    pub fn zero_complement(&mut self) {
        let c = self.channels();
        self.ica.rgb.wv = ConvParams::zeros(c, c, 1);
        self.ica.ir.wv = ConvParams::zeros(c, c, 1);
        self.ica.wm = ConvParams::zeros(c, c, 1);
        self.ica.wn = ConvParams::zeros(c, c, 1);
    }
}

/// Weights uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]` from a
/// Xoshiro256++ stream seeded with `cfg.seed`, drawn in serialization order;
/// biases zero.
pub fn init_params(cfg: &BlockConfig) -> Result<BlockParams> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut params = BlockParams::zeros(cfg.channels);
    for (_, conv) in params.convs_mut() {
        let fan_in = conv.in_channels() * conv.kernel() * conv.kernel();
        let bound = (1.0 / fan_in as f64).sqrt();
        conv.weight = Tensor::uniform(conv.weight.dims(), -bound, bound, &mut rng);
    }
    Ok(params)
}

/// Intermediates of one block evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub offsets: OffsetField,
    pub sampled_rgb: Tensor,
    pub sampled_ir: Tensor,
    pub ica: IcaOutput,
    pub out_rgb: Tensor,
    pub out_ir: Tensor,
}

fn check_inputs(x_rgb: &Tensor, x_ir: &Tensor, p: &BlockParams, cfg: &BlockConfig) -> Result<()> {
    cfg.validate()?;
    let (_, c, h, w) = x_rgb.nchw()?;
    if x_rgb.dims() != x_ir.dims() {
        return Err(shape_err!("rgb {:?} vs ir {:?}", x_rgb.dims(), x_ir.dims()));
    }
    if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
        return Err(shape_err!(
            "input {:?} does not match config ({}, {}, {})",
            x_rgb.dims(),
            cfg.channels,
            cfg.height,
            cfg.width
        ));
    }
    if p.channels() != cfg.channels {
        return Err(shape_err!(
            "parameters for {} channels, config has {}",
            p.channels(),
            cfg.channels
        ));
    }
    Ok(())
}

/// Returns `(out_rgb, out_ir) = (x_rgb + y_ir, x_ir + y_rgb)`.
///
/// `y_rgb` aggregates RGB values at IR query positions, so it is aligned with
/// and added to the IR stream; `y_ir` goes to the RGB stream.
pub fn block_forward(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &BlockParams,
    cfg: &BlockConfig,
) -> Result<(Tensor, Tensor)> {
    let t = block_forward_detailed(x_rgb, x_ir, p, cfg)?;
    Ok((t.out_rgb, t.out_ir))
}

pub fn block_forward_detailed(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &BlockParams,
    cfg: &BlockConfig,
) -> Result<BlockTrace> {
    check_inputs(x_rgb, x_ir, p, cfg)?;
    let grid = make_reference_grid(cfg.height, cfg.width, cfg.stride)?;
    let offsets = predict_offsets(x_rgb, x_ir, &p.afs, cfg.stride)?;
    let (sampled_rgb, sampled_ir) = afs_sample(x_rgb, x_ir, &grid, &offsets)?;
    let ica = ica_forward_detailed(
        &sampled_rgb,
        &sampled_ir,
        &p.ica,
        cfg.stride,
        (cfg.height, cfg.width),
    )?;
    let out_rgb = x_rgb.add(&ica.y_ir)?;
    let out_ir = x_ir.add(&ica.y_rgb)?;
    Ok(BlockTrace {
        offsets,
        sampled_rgb,
        sampled_ir,
        ica,
        out_rgb,
        out_ir,
    })
}

/// Elementwise sum of the two enhanced streams.
pub fn fuse_streams(out_rgb: &Tensor, out_ir: &Tensor) -> Result<Tensor> {
    out_rgb.add(out_ir)
}

/// A configured block attached to one backbone stage.
#[derive(Clone, Debug)]
pub struct StageBlock {
    pub cfg: BlockConfig,
    pub params: BlockParams,
}

/// Applies one block per active (1-based) stage; the rest pass through.
/// `blocks[i]` serves `active[i]`.
pub fn multi_stage_apply(
    stages: &[(Tensor, Tensor)],
    blocks: &[StageBlock],
    active: &[usize],
) -> Result<Vec<(Tensor, Tensor)>> {
    if blocks.len() != active.len() {
        return Err(Error::InvalidArgument(format!(
            "{} blocks for {} active stages",
            blocks.len(),
            active.len()
        )));
    }
    for (i, &stage) in active.iter().enumerate() {
        if stage == 0 || stage > stages.len() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside 1..={}",
                stages.len()
            )));
        }
        if active[..i].contains(&stage) {
            return Err(Error::InvalidArgument(format!("stage {stage} listed twice")));
        }
    }
    stages
        .iter()
        .enumerate()
        .map(|(i, (rgb, ir))| match active.iter().position(|&s| s == i + 1) {
            Some(k) => block_forward(rgb, ir, &blocks[k].params, &blocks[k].cfg),
            None => Ok((rgb.clone(), ir.clone())),
        })
        .collect()
}
