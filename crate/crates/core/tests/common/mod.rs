//! Naive nested-loop reimplementation of the block used as an independent
//! oracle. Works on a single batch element stored as `[c][y][x]`.
#![allow(dead_code)]

use c2former::block::BlockParams;
use c2former::tensor::{ConvParams, Tensor};

pub type Map = Vec<Vec<Vec<f64>>>;
pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-5;

pub fn to_map(t: &Tensor, batch: usize) -> Map {
    let d = t.dims();
    let (c, h, w) = (d[1], d[2], d[3]);
    (0..c)
        .map(|k| {
            (0..h)
                .map(|y| (0..w).map(|x| t.at4(batch, k, y, x)).collect())
                .collect()
        })
        .collect()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let d = t.dims();
    (0..d[0]).map(|r| (0..d[1]).map(|c| t.at2(r, c)).collect()).collect()
}

fn dims(m: &Map) -> (usize, usize, usize) {
    (m.len(), m[0].len(), m[0][0].len())
}

pub fn conv(x: &Map, p: &ConvParams) -> Map {
    let (cin, h, w) = dims(x);
    let d = p.weight.dims();
    let (cout, k) = (d[0], d[2]);
    let pad = (k / 2) as isize;
    let wt = |o: usize, i: usize, a: usize, b: usize| p.weight.data()[((o * cin + i) * k + a) * k + b];
    let mut out = vec![vec![vec![0.0; w]; h]; cout];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = p.bias.data()[o];
                for i in 0..cin {
                    for a in 0..k {
                        for b in 0..k {
                            let sy = y as isize + a as isize - pad;
                            let sx = xx as isize + b as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += wt(o, i, a, b) * x[i][sy as usize][sx as usize];
                            }
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

fn relu(x: &Map) -> Map {
    x.iter()
        .map(|c| c.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

/// Per-channel mean and sqrt(population variance + eps).
pub fn stats(x: &Map) -> Vec<(f64, f64)> {
    x.iter()
        .map(|plane| {
            let vals: Vec<f64> = plane.iter().flatten().copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, (var + EPS).sqrt())
        })
        .collect()
}

pub fn modnorm(src: &Map, reference: &Map, wd: &ConvParams, wb: &ConvParams, wg: &ConvParams) -> Map {
    let hidden = relu(&conv(reference, wd));
    let beta = conv(&hidden, wb);
    let gamma = conv(&hidden, wg);
    let rs = stats(reference);
    let ss = stats(src);
    let (c, h, w) = dims(src);
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let norm = (src[k][y][x] - ss[k].0) / ss[k].1;
                out[k][y][x] = norm * (gamma[k][y][x] + rs[k].1) + (beta[k][y][x] + rs[k].0);
            }
        }
    }
    out
}

/// Positions in row-major order, one row per position.
pub fn flatten(x: &Map) -> Mat {
    let (c, h, w) = dims(x);
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            rows.push((0..c).map(|k| x[k][y][xx]).collect());
        }
    }
    rows
}

pub fn similarity(q: &Mat, k: &Mat) -> Mat {
    let c = q[0].len() as f64;
    q.iter()
        .map(|qr| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / c.sqrt())
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn attend(m: &Mat, v: &Mat) -> Mat {
    m.iter()
        .map(|row| {
            (0..v[0].len())
                .map(|c| row.iter().zip(v).map(|(a, vr)| a * vr[c]).sum())
                .collect()
        })
        .collect()
}

pub struct Descriptors {
    pub q_rgb: Mat,
    pub q_ir: Mat,
    pub k_rgb: Mat,
    pub k_ir: Mat,
    pub v_rgb: Mat,
    pub v_ir: Mat,
}

pub fn descriptors(rgb: &Map, ir: &Map, p: &BlockParams) -> Descriptors {
    let i = &p.ica;
    let n_rgb = modnorm(rgb, ir, &i.modnorm_rgb.wd, &i.modnorm_rgb.wb, &i.modnorm_rgb.wg);
    let n_ir = modnorm(ir, rgb, &i.modnorm_ir.wd, &i.modnorm_ir.wb, &i.modnorm_ir.wg);
    Descriptors {
        q_rgb: flatten(&conv(&n_rgb, &i.rgb.wq)),
        q_ir: flatten(&conv(&n_ir, &i.ir.wq)),
        k_rgb: flatten(&conv(rgb, &i.rgb.wk)),
        k_ir: flatten(&conv(ir, &i.ir.wk)),
        v_rgb: flatten(&conv(rgb, &i.rgb.wv)),
        v_ir: flatten(&conv(ir, &i.ir.wv)),
    }
}

/// Projects `(positions x C)` rows sitting on a `hs x ws` grid and scatters
/// them to every `s`-th pixel of an `h x w` map; other pixels get the bias.
pub fn upsample(rows: &Mat, p: &ConvParams, hs: usize, ws: usize, s: usize, h: usize, w: usize) -> Map {
    let c = rows[0].len();
    let oc = p.bias.len();
    let mut out = vec![vec![vec![0.0; w]; h]; oc];
    for o in 0..oc {
        for y in 0..h {
            for x in 0..w {
                let mut v = p.bias.data()[o];
                if y % s == 0 && x % s == 0 && y / s < hs && x / s < ws {
                    let r = &rows[(y / s) * ws + x / s];
                    for i in 0..c {
                        v += p.weight.data()[o * c + i] * r[i];
                    }
                }
                out[o][y][x] = v;
            }
        }
    }
    out
}

fn norm_coord(pixel: usize, extent: usize) -> f64 {
    if extent == 1 {
        -1.0
    } else {
        2.0 * pixel as f64 / (extent - 1) as f64 - 1.0
    }
}

fn sample(x: &Map, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = dims(x);
    let px = if w == 1 { 0.0 } else { (u + 1.0) / 2.0 * (w - 1) as f64 };
    let py = if h == 1 { 0.0 } else { (v + 1.0) / 2.0 * (h - 1) as f64 };
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let get = |k: usize, yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            x[k][yy as usize][xx as usize]
        }
    };
    (0..c)
        .map(|k| {
            get(k, y0, x0) * (1.0 - fy) * (1.0 - fx)
                + get(k, y0, x0 + 1.0) * (1.0 - fy) * fx
                + get(k, y0 + 1.0, x0) * fy * (1.0 - fx)
                + get(k, y0 + 1.0, x0 + 1.0) * fy * fx
        })
        .collect()
}

pub struct Stages {
    /// `[i][j] = (du, dv)`.
    pub offsets: Vec<Vec<(f64, f64)>>,
    pub sampled_rgb: Map,
    pub sampled_ir: Map,
    pub desc: Descriptors,
    pub m_rgb: Mat,
    pub m_ir: Mat,
    pub y_rgb: Map,
    pub y_ir: Map,
    pub out_rgb: Map,
    pub out_ir: Map,
}

fn concat(a: &Map, b: &Map) -> Map {
    a.iter().chain(b).cloned().collect()
}

fn to_grid(rows: Vec<Vec<f64>>, hs: usize, ws: usize) -> Map {
    let c = rows[0].len();
    (0..c)
        .map(|k| (0..hs).map(|i| (0..ws).map(|j| rows[i * ws + j][k]).collect()).collect())
        .collect()
}

pub fn block(rgb: &Map, ir: &Map, p: &BlockParams, s: usize) -> Stages {
    let (_, h, w) = dims(rgb);
    let (hs, ws) = (h / s, w / s);
    let xd = conv(&concat(rgb, ir), &p.afs.wc);
    let logits = conv(&relu(&conv(&xd, &p.afs.fd1)), &p.afs.fd2);
    let offsets: Vec<Vec<(f64, f64)>> = (0..hs)
        .map(|i| {
            (0..ws)
                .map(|j| {
                    let (y, x) = (i * s, j * s);
                    (2.0 * logits[0][y][x].tanh(), 2.0 * logits[1][y][x].tanh())
                })
                .collect()
        })
        .collect();
    let mut srgb = Vec::new();
    let mut sir = Vec::new();
    for i in 0..hs {
        for j in 0..ws {
            let (u, v) = (norm_coord(j * s, w), norm_coord(i * s, h));
            let (du, dv) = offsets[i][j];
            srgb.push(sample(rgb, u + du, v + dv));
            sir.push(sample(ir, u, v));
        }
    }
    let sampled_rgb = to_grid(srgb, hs, ws);
    let sampled_ir = to_grid(sir, hs, ws);
    let desc = descriptors(&sampled_rgb, &sampled_ir, p);
    let m_rgb = similarity(&desc.q_ir, &desc.k_rgb);
    let m_ir = similarity(&desc.q_rgb, &desc.k_ir);
    let y_rgb = upsample(&attend(&m_rgb, &desc.v_rgb), &p.ica.wm, hs, ws, s, h, w);
    let y_ir = upsample(&attend(&m_ir, &desc.v_ir), &p.ica.wn, hs, ws, s, h, w);
    let add = |a: &Map, b: &Map| -> Map {
        a.iter()
            .zip(b)
            .map(|(pa, pb)| {
                pa.iter()
                    .zip(pb)
                    .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
                    .collect()
            })
            .collect()
    };
    let out_rgb = add(rgb, &y_ir);
    let out_ir = add(ir, &y_rgb);
    Stages {
        offsets,
        sampled_rgb,
        sampled_ir,
        desc,
        m_rgb,
        m_ir,
        y_rgb,
        y_ir,
        out_rgb,
        out_ir,
    }
}

/// Largest absolute difference between nested tables of equal shape.
pub fn max_diff_map(a: &Map, b: &Map) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_diff_mat(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Hand-set small-integer parameters for the 2x2, C=2 instance. Every
/// convolution gets a distinct pattern so routing mistakes show up.
pub fn tiny_params() -> BlockParams {
    let mut p = BlockParams::zeros(2);
    for (idx, (_, conv)) in p.convs_mut().into_iter().enumerate() {
        let n = conv.weight.len();
        let w: Vec<f64> = (0..n)
            .map(|k| (((k * 7 + idx * 3) % 5) as f64 - 2.0) * if conv.kernel() == 3 { 0.1 } else { 0.5 })
            .collect();
        conv.weight = Tensor::new(conv.weight.dims(), w).unwrap();
        let b: Vec<f64> = (0..conv.bias.len())
            .map(|k| ((k + idx) % 3) as f64 * 0.25 - 0.25)
            .collect();
        conv.bias = Tensor::new(conv.bias.dims(), b).unwrap();
    }
    p
}

pub fn tiny_inputs() -> (Tensor, Tensor) {
    let rgb = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 0.0, -1.0, 3.0, -2.0, 1.0, 0.0]).unwrap();
    let ir = Tensor::new(&[1, 2, 2, 2], vec![0.0, 1.0, 2.0, 2.0, -1.0, 1.0, 0.0, 3.0]).unwrap();
    (rgb, ir)
}
