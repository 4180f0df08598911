//! The fusion block recorded on a [`Graph`], mirroring the plain forward
//! functions kernel for kernel so both produce bit-identical values.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use crate::afs::make_reference_grid;
use crate::block::{BlockConfig, BlockParams};
use crate::error::{shape_err, Result};
use crate::tensor::{ConvParams, Tensor};

pub const INPUT_RGB: &str = "input.rgb";
pub const INPUT_IR: &str = "input.ir";

/// A recorded block evaluation. `loss` is `sum(out_rgb) + sum(out_ir)`.
#[derive(Debug)]
pub struct TracedBlock {
    pub graph: Graph,
    pub out_rgb: NodeId,
    pub out_ir: NodeId,
    pub loss: NodeId,
    /// Leaf nodes by name: `<conv>.weight`, `<conv>.bias`, `input.rgb`, `input.ir`.
    pub leaves: BTreeMap<String, NodeId>,
}

struct ConvNodes {
    w: NodeId,
    b: NodeId,
}

struct Recorder {
    g: Graph,
    leaves: BTreeMap<String, NodeId>,
    bias_enabled: bool,
}

impl Recorder {
    fn conv(&mut self, name: &str, p: &ConvParams) -> ConvNodes {
        let w = self.g.input(format!("{name}.weight"), p.weight.clone());
        self.leaves.insert(format!("{name}.weight"), w);
        let b = if self.bias_enabled {
            let b = self.g.input(format!("{name}.bias"), p.bias.clone());
            self.leaves.insert(format!("{name}.bias"), b);
            b
        } else {
            self.g.constant(p.bias.clone())
        };
        ConvNodes { w, b }
    }

    fn apply(&mut self, x: NodeId, c: &ConvNodes) -> Result<NodeId> {
        self.g.conv2d(x, c.w, c.b)
    }

    fn modnorm(&mut self, src: NodeId, reference: NodeId, p: [&ConvNodes; 3]) -> Result<NodeId> {
        let [wd, wb, wg] = p;
        let mu = self.g.instance_mean(reference)?;
        let sigma = self.g.instance_std(reference)?;
        let pre = self.apply(reference, wd)?;
        let hidden = self.g.relu(pre);
        let beta_raw = self.apply(hidden, wb)?;
        let beta = self.g.add_channel(beta_raw, mu)?;
        let gamma_raw = self.apply(hidden, wg)?;
        let gamma = self.g.add_channel(gamma_raw, sigma)?;
        let norm = self.g.instance_normalize(src)?;
        let scaled = self.g.mul(norm, gamma)?;
        self.g.add(scaled, beta)
    }

    fn attend(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let c = self.g.value(q).dims()[1];
        let kt = self.g.transpose(k)?;
        let logits = self.g.matmul(q, kt)?;
        let scaled = self.g.scale(logits, 1.0 / (c as f64).sqrt());
        let m = self.g.softmax_rows(scaled)?;
        self.g.matmul(m, v)
    }
}

/// Records one block evaluation with every parameter (and, when
/// `cfg.bias_enabled`, every bias) and both inputs as named leaves.
pub fn trace_block(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &BlockParams,
    cfg: &BlockConfig,
) -> Result<TracedBlock> {
    cfg.validate()?;
    let (n, c, h, w) = x_rgb.nchw()?;
    if x_rgb.dims() != x_ir.dims() || (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
        return Err(shape_err!(
            "inputs {:?}/{:?} do not match config",
            x_rgb.dims(),
            x_ir.dims()
        ));
    }
    let mut r = Recorder {
        g: Graph::new(),
        leaves: BTreeMap::new(),
        bias_enabled: cfg.bias_enabled,
    };
    let rgb = r.g.input(INPUT_RGB, x_rgb.clone());
    let ir = r.g.input(INPUT_IR, x_ir.clone());
    r.leaves.insert(INPUT_RGB.into(), rgb);
    r.leaves.insert(INPUT_IR.into(), ir);
    let convs: Vec<ConvNodes> = p.convs().iter().map(|(name, cp)| r.conv(name, cp)).collect();
    let [wc, fd1, fd2, q_rgb_w, k_rgb_w, v_rgb_w, q_ir_w, k_ir_w, v_ir_w, mr_d, mr_b, mr_g, mi_d, mi_b, mi_g, wm, wn] =
        &convs[..]
    else {
        unreachable!("17 convolutions")
    };

    // sampling
    let s = cfg.stride;
    let grid = make_reference_grid(h, w, s)?;
    let (hs, ws) = grid.extent();
    let cat = r.g.concat_channels(rgb, ir)?;
    let xd = r.apply(cat, wc)?;
    let pre = r.apply(xd, fd1)?;
    let hidden = r.g.relu(pre);
    let logits = r.apply(hidden, fd2)?;
    let field = r.g.scaled_tanh(logits);
    let dp = r.g.gather_grid(field, s, hs, ws)?;
    let base = grid.points.data();
    let tiled = Tensor::from_fn(&[n, hs, ws, 2], |k| base[k % base.len()]);
    let tiled = r.g.constant(tiled);
    let coords = r.g.add(tiled, dp)?;
    let grid_node = r.g.constant(grid.points.clone());
    let s_rgb = r.g.bilinear_sample(rgb, coords)?;
    let s_ir = r.g.bilinear_sample(ir, grid_node)?;

    // cross-attention
    let norm_rgb = r.modnorm(s_rgb, s_ir, [mr_d, mr_b, mr_g])?;
    let norm_ir = r.modnorm(s_ir, s_rgb, [mi_d, mi_b, mi_g])?;
    let maps = [
        r.apply(norm_rgb, q_rgb_w)?,
        r.apply(norm_ir, q_ir_w)?,
        r.apply(s_rgb, k_rgb_w)?,
        r.apply(s_ir, k_ir_w)?,
        r.apply(s_rgb, v_rgb_w)?,
        r.apply(s_ir, v_ir_w)?,
    ];
    let mut parts_rgb = Vec::with_capacity(n);
    let mut parts_ir = Vec::with_capacity(n);
    for b in 0..n {
        let mut d = [maps[0]; 6];
        for (slot, &m) in d.iter_mut().zip(&maps) {
            *slot = r.g.gamma_reshape(m, b)?;
        }
        let [q_rgb, q_ir, k_rgb, k_ir, v_rgb, v_ir] = d;
        parts_rgb.push(r.attend(q_ir, k_rgb, v_rgb)?);
        parts_ir.push(r.attend(q_rgb, k_ir, v_ir)?);
    }
    let y_rgb_small = r.g.gamma_inverse_stack(&parts_rgb, hs, ws)?;
    let y_ir_small = r.g.gamma_inverse_stack(&parts_ir, hs, ws)?;
    let y_rgb = r.g.deconv1x1_stride(y_rgb_small, wm.w, wm.b, s, h, w)?;
    let y_ir = r.g.deconv1x1_stride(y_ir_small, wn.w, wn.b, s, h, w)?;

    // opposite-stream residuals
    let out_rgb = r.g.add(rgb, y_ir)?;
    let out_ir = r.g.add(ir, y_rgb)?;
    let l_rgb = r.g.sum(out_rgb);
    let l_ir = r.g.sum(out_ir);
    let loss = r.g.add(l_rgb, l_ir)?;
    Ok(TracedBlock {
        graph: r.g,
        out_rgb,
        out_ir,
        loss,
        leaves: r.leaves,
    })
}
