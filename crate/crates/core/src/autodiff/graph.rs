use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    add_channel_stats, bilinear_sample, concat_channels, conv2d, deconv1x1_stride, gamma_inverse,
    gamma_reshape, instance_normalize, instance_stats, matmul, normalized_to_pixel, relu,
    sample_coords_layout, scaled_tanh, softmax_rows, BilinearTap, ConvParams, Tensor,
};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate adjoint corruption, used to confirm that gradient checks catch
/// a broken backward rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiply the left-operand adjoint of every matmul by this factor.
    ScaleMatmulLhsAdjoint(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant,
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    ScaledTanh(NodeId),
    SoftmaxRows(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    InstanceNorm(NodeId),
    InstanceMean(NodeId),
    InstanceStd(NodeId),
    AddChannel { x: NodeId, stats: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    GammaReshape { x: NodeId, batch: usize },
    GammaInverseStack { parts: Vec<NodeId> },
    GatherGrid { field: NodeId, stride: usize },
    BilinearSample { x: NodeId, coords: NodeId },
    Deconv { y: NodeId, w: NodeId, b: NodeId, stride: usize },
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every named input leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// A tape of tensor operations with their saved activations.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, deps: &[NodeId]) -> NodeId {
        let requires_grad = deps.iter().any(|d| self.nodes[d.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf; its gradient is reported under `name`.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input(name.into()),
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, &[])
    }

    fn conv_params(&self, w: NodeId, b: NodeId) -> Result<ConvParams> {
        ConvParams::new(self.value(w).clone(), self.value(b).clone())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = conv2d(self.value(x), &self.conv_params(w, b)?)?;
        Ok(self.push(Op::Conv2d { x, w, b }, v, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = relu(self.value(x));
        self.push(Op::Relu(x), v, &[x])
    }

    pub fn scaled_tanh(&mut self, x: NodeId) -> NodeId {
        let v = scaled_tanh(self.value(x));
        self.push(Op::ScaledTanh(x), v, &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(x))?;
        Ok(self.push(Op::SoftmaxRows(x), v, &[x]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose(x), v, &[x]))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).scale(k);
        self.push(Op::Scale(x, k), v, &[x])
    }

    pub fn instance_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = instance_normalize(self.value(x))?;
        Ok(self.push(Op::InstanceNorm(x), v, &[x]))
    }

    pub fn instance_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (mu, _) = instance_stats(self.value(x))?;
        Ok(self.push(Op::InstanceMean(x), mu, &[x]))
    }

    pub fn instance_std(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, sigma) = instance_stats(self.value(x))?;
        Ok(self.push(Op::InstanceStd(x), sigma, &[x]))
    }

    pub fn add_channel(&mut self, x: NodeId, stats: NodeId) -> Result<NodeId> {
        let v = add_channel_stats(self.value(x), self.value(stats))?;
        Ok(self.push(Op::AddChannel { x, stats }, v, &[x, stats]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), v, &[a, b]))
    }

    /// Batch element `batch` of a feature map as a `(H*W, C)` descriptor.
    pub fn gamma_reshape(&mut self, x: NodeId, batch: usize) -> Result<NodeId> {
        let v = gamma_reshape(&self.value(x).batch_item(batch)?)?;
        Ok(self.push(Op::GammaReshape { x, batch }, v, &[x]))
    }

    /// Inverse-reshapes one descriptor per batch element and stacks them.
    pub fn gamma_inverse_stack(&mut self, parts: &[NodeId], h: usize, w: usize) -> Result<NodeId> {
        let maps = parts
            .iter()
            .map(|&p| gamma_inverse(self.value(p), h, w))
            .collect::<Result<Vec<_>>>()?;
        let v = Tensor::stack_batch(&maps)?;
        Ok(self.push(
            Op::GammaInverseStack {
                parts: parts.to_vec(),
            },
            v,
            parts,
        ))
    }

    pub fn gather_grid(&mut self, field: NodeId, stride: usize, hs: usize, ws: usize) -> Result<NodeId> {
        let v = crate::afs::gather_at_grid(self.value(field), stride, hs, ws)?;
        Ok(self.push(Op::GatherGrid { field, stride }, v, &[field]))
    }

    pub fn bilinear_sample(&mut self, x: NodeId, coords: NodeId) -> Result<NodeId> {
        let v = bilinear_sample(self.value(x), self.value(coords))?;
        Ok(self.push(Op::BilinearSample { x, coords }, v, &[x, coords]))
    }

    pub fn deconv1x1_stride(
        &mut self,
        y: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let v = deconv1x1_stride(self.value(y), &self.conv_params(w, b)?, stride, out_h, out_w)?;
        Ok(self.push(Op::Deconv { y, w, b, stride }, v, &[y, w, b]))
    }

    /// Scalar (`dims = [1]`) sum of all entries.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::full(&[1], self.value(x).sum());
        self.push(Op::Sum(x), v, &[x])
    }

    /// Activation pattern of every piecewise op on the tape: relu input signs
    /// and the integer cell of every bilinear sample. Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => sig.extend(self.value(x).data().iter().map(|&v| (v > 0.0) as i64)),
                Op::BilinearSample { x, coords } => {
                    let (n, _, h, w) = self.value(x).nchw().expect("rank-4 sample input");
                    let c = self.value(coords);
                    let (per_batch, hs, ws) = sample_coords_layout(c, n).expect("checked");
                    let batches = if per_batch { n } else { 1 };
                    for k in 0..batches * hs * ws {
                        let px = normalized_to_pixel(c.data()[2 * k], w);
                        let py = normalized_to_pixel(c.data()[2 * k + 1], h);
                        sig.push(px.floor() as i64);
                        sig.push(py.floor() as i64);
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from the scalar `output`, seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Autodiff(format!("node {} not on this tape", output.0)))?;
        if out.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar output, got dims {:?}",
                out.value.dims()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::full(out.value.dims(), seed));
        let mut grads = Gradients::default();
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Input(name) = &node.op {
                grads.by_name.insert(name.clone(), g);
                continue;
            }
            for (dep, contrib) in self.adjoints(node, &g)? {
                if !self.nodes[dep.0].requires_grad {
                    continue;
                }
                match &mut adj[dep.0] {
                    Some(acc) => {
                        acc.data_mut()
                            .iter_mut()
                            .zip(contrib.data())
                            .for_each(|(a, c)| *a += c);
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(grads)
    }

    /// Contributions of `g = dL/d(node)` to each operand of `node`.
    fn adjoints(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| self.value(id);
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        Ok(match node.op {
            Op::Input(_) | Op::Constant => vec![],
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = conv2d_adjoint(val(x), val(w), g)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Relu(x) => {
                let d = val(x).zip_with(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                vec![(x, d)]
            }
            Op::ScaledTanh(x) => {
                let d = node.value.zip_with(g, |y, gv| gv * (2.0 - 0.5 * y * y))?;
                vec![(x, d)]
            }
            Op::SoftmaxRows(x) => vec![(x, softmax_adjoint(&node.value, g)?)],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if wants(a) {
                    let mut da = matmul(g, &val(b).transpose()?)?;
                    if let Some(Fault::ScaleMatmulLhsAdjoint(k)) = self.fault {
                        da = da.scale(k);
                    }
                    out.push((a, da));
                }
                if wants(b) {
                    out.push((b, matmul(&val(a).transpose()?, g)?));
                }
                out
            }
            Op::Transpose(x) => vec![(x, g.transpose()?)],
            Op::Scale(x, k) => vec![(x, g.scale(k))],
            Op::InstanceNorm(x) => vec![(x, instance_norm_adjoint(val(x), &node.value, g)?)],
            Op::InstanceMean(x) => {
                let (_, _, h, w) = val(x).nchw()?;
                let inv = 1.0 / (h * w) as f64;
                vec![(x, broadcast_planes(val(x).dims(), g, |_, gv| gv * inv))]
            }
            Op::InstanceStd(x) => {
                let xv = val(x);
                let (_, _, h, w) = xv.nchw()?;
                let (mu, sigma) = instance_stats(xv)?;
                let hw = (h * w) as f64;
                let mut d = Tensor::zeros(xv.dims());
                for (p, (dp, xp)) in d
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(xv.data().chunks(h * w))
                    .enumerate()
                {
                    let k = g.data()[p] / (hw * sigma.data()[p]);
                    let m = mu.data()[p];
                    dp.iter_mut().zip(xp).for_each(|(o, &v)| *o = k * (v - m));
                }
                vec![(x, d)]
            }
            Op::AddChannel { x, stats } => {
                let (_, _, h, w) = g.nchw()?;
                let sums = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                vec![(x, g.clone()), (stats, Tensor::new(val(stats).dims(), sums)?)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Mul(a, b) => vec![(a, g.mul(val(b))?), (b, g.mul(val(a))?)],
            Op::Concat(a, b) => {
                let (n, ca, h, w) = val(a).nchw()?;
                let (_, cb, _, _) = val(b).nchw()?;
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                vec![
                    (a, Tensor::new(val(a).dims(), da)?),
                    (b, Tensor::new(val(b).dims(), db)?),
                ]
            }
            Op::GammaReshape { x, batch } => {
                let (_, c, h, w) = val(x).nchw()?;
                let plane = gamma_inverse(g, h, w)?;
                let mut d = Tensor::zeros(val(x).dims());
                let sz = c * h * w;
                d.data_mut()[batch * sz..(batch + 1) * sz].copy_from_slice(plane.data());
                vec![(x, d)]
            }
            Op::GammaInverseStack { ref parts, .. } => {
                let mut out = Vec::with_capacity(parts.len());
                for (k, &p) in parts.iter().enumerate() {
                    out.push((p, gamma_reshape(&g.batch_item(k)?)?));
                }
                out
            }
            Op::GatherGrid { field, stride } => {
                let (n, _, h, w) = val(field).nchw()?;
                let [_, hs, ws, _] = g.dims()[..] else {
                    return Err(shape_err!("gather adjoint {:?}", g.dims()));
                };
                let mut d = Tensor::zeros(&[n, 2, h, w]);
                for b in 0..n {
                    for i in 0..hs {
                        for j in 0..ws {
                            for ch in 0..2 {
                                let src = ((b * hs + i) * ws + j) * 2 + ch;
                                let dst = ((b * 2 + ch) * h + i * stride) * w + j * stride;
                                d.data_mut()[dst] += g.data()[src];
                            }
                        }
                    }
                }
                vec![(field, d)]
            }
            Op::BilinearSample { x, coords } => {
                let (dx, dc) = bilinear_adjoint(val(x), val(coords), g)?;
                vec![(x, dx), (coords, dc)]
            }
            Op::Deconv { y, w, b, stride } => {
                let (dy, dw, db) = deconv_adjoint(val(y), val(w), g, stride)?;
                vec![(y, dy), (w, dw), (b, db)]
            }
            Op::Sum(x) => vec![(x, Tensor::full(val(x).dims(), g.data()[0]))],
        })
    }
}

fn broadcast_planes(dims: &[usize], g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let plane = dims[2] * dims[3];
    Tensor::from_fn(dims, |k| f(k, g.data()[k / plane]))
}

pub(crate) fn conv2d_adjoint(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, wd) = x.nchw()?;
    let [oc, ic, k, _] = w.dims()[..] else {
        return Err(shape_err!("conv weight {:?}", w.dims()));
    };
    let pad = k / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    let (xd, wt, gd) = (x.data(), w.data(), g.data());
    for b in 0..n {
        for o in 0..oc {
            let gp = &gd[(b * oc + o) * h * wd..(b * oc + o + 1) * h * wd];
            db[o] += gp.iter().sum::<f64>();
            for i in 0..ic {
                let base = (b * c + i) * h * wd;
                for dh in 0..k {
                    for dwi in 0..k {
                        let widx = ((o * ic + i) * k + dh) * k + dwi;
                        let kv = wt[widx];
                        let mut acc = 0.0;
                        for yy in 0..h {
                            let sy = yy as isize + dh as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..wd {
                                let sx = xx as isize + dwi as isize - pad as isize;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let src = base + sy as usize * wd + sx as usize;
                                let gv = gp[yy * wd + xx];
                                acc += gv * xd[src];
                                dx[src] += kv * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims(), dx)?,
        Tensor::new(w.dims(), dw)?,
        Tensor::new(&[oc], db)?,
    ))
}

pub(crate) fn softmax_adjoint(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (r, c) = y.rows_cols()?;
    let mut out = vec![0.0; r * c];
    for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(&[r, c], out)
}

/// `dx = (g - mean(g) - y * mean(g * y)) / sigma` per plane.
pub(crate) fn instance_norm_adjoint(x: &Tensor, y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.nchw()?;
    let (_, sigma) = instance_stats(x)?;
    let hw = (h * w) as f64;
    let mut out = vec![0.0; x.len()];
    let planes = out
        .chunks_mut(h * w)
        .zip(y.data().chunks(h * w))
        .zip(g.data().chunks(h * w));
    for (p, ((o, yp), gp)) in planes.enumerate() {
        let gm = gp.iter().sum::<f64>() / hw;
        let gym = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw;
        let s = sigma.data()[p];
        for ((ov, &yv), &gv) in o.iter_mut().zip(yp).zip(gp) {
            *ov = (gv - gm - yv * gym) / s;
        }
    }
    Tensor::new(x.dims(), out)
}

pub(crate) fn bilinear_adjoint(x: &Tensor, coords: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.nchw()?;
    let (per_batch, hs, ws) = sample_coords_layout(coords, n)?;
    let mut dx = vec![0.0; x.len()];
    let mut dc = vec![0.0; coords.len()];
    let du_dpx = if w > 1 { 0.5 * (w - 1) as f64 } else { 0.0 };
    let dv_dpy = if h > 1 { 0.5 * (h - 1) as f64 } else { 0.0 };
    let inside = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
    for b in 0..n {
        let cbase = if per_batch { b * hs * ws * 2 } else { 0 };
        for i in 0..hs {
            for j in 0..ws {
                let k = cbase + (i * ws + j) * 2;
                let px = normalized_to_pixel(coords.data()[k], w);
                let py = normalized_to_pixel(coords.data()[k + 1], h);
                let tap = BilinearTap::at(py, px);
                let corners = tap.corners();
                let (mut gpx, mut gpy) = (0.0, 0.0);
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    let gv = g.data()[((b * c + ch) * hs + i) * ws + j];
                    let mut v = [0.0; 4];
                    for (slot, &(yy, xx, wt)) in corners.iter().enumerate() {
                        if inside(yy, xx) {
                            let idx = plane + yy as usize * w + xx as usize;
                            v[slot] = x.data()[idx];
                            dx[idx] += wt * gv;
                        }
                    }
                    gpx += gv * ((1.0 - tap.fy) * (v[1] - v[0]) + tap.fy * (v[3] - v[2]));
                    gpy += gv * ((1.0 - tap.fx) * (v[2] - v[0]) + tap.fx * (v[3] - v[1]));
                }
                dc[k] += gpx * du_dpx;
                dc[k + 1] += gpy * dv_dpy;
            }
        }
    }
    Ok((Tensor::new(x.dims(), dx)?, Tensor::new(coords.dims(), dc)?))
}

pub(crate) fn deconv_adjoint(
    y: &Tensor,
    w: &Tensor,
    g: &Tensor,
    s: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, hs, ws) = y.nchw()?;
    let (_, oc, out_h, out_w) = g.nchw()?;
    let mut dy = vec![0.0; y.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    for b in 0..n {
        for o in 0..oc {
            let gp = &g.data()[(b * oc + o) * out_h * out_w..(b * oc + o + 1) * out_h * out_w];
            db[o] += gp.iter().sum::<f64>();
            for i in 0..c {
                let k = w.data()[o * c + i];
                let base = (b * c + i) * hs * ws;
                let mut acc = 0.0;
                for yy in 0..hs {
                    for xx in 0..ws {
                        let gv = gp[yy * s * out_w + xx * s];
                        dy[base + yy * ws + xx] += k * gv;
                        acc += gv * y.data()[base + yy * ws + xx];
                    }
                }
                dw[o * c + i] += acc;
            }
        }
    }
    Ok((
        Tensor::new(y.dims(), dy)?,
        Tensor::new(w.dims(), dw)?,
        Tensor::new(&[oc], db)?,
    ))
}
