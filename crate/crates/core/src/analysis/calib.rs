use rand::{RngExt, SeedableRng};
use rand_distr::Normal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::ica::{cross_similarity, make_descriptors, IcaParams};
use crate::tensor::Tensor;

/// Chebyshev radius, in pixels, within which an argmax counts as a hit.
pub const DEFAULT_RADIUS: usize = 1;
/// Hit rates below this are reported as a low-confidence regime.
pub const LOW_CONFIDENCE_HIT_RATE: f64 = 0.5;

/// A synthetic RGB/IR pair misregistered by a known integer shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibScenario {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(dy, dx)`: the IR map is the RGB map rolled by this amount.
    pub shift: (i64, i64),
    pub noise_std: f64,
    pub seed: u64,
    /// Passes of a circular 3x3 box filter over the base noise.
    pub smoothing: usize,
}

impl CalibScenario {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scenario extents must be >= 1".into()));
        }
        let (dy, dx) = self.shift;
        if dy.unsigned_abs() as usize >= self.height || dx.unsigned_abs() as usize >= self.width {
            return Err(Error::Config(format!(
                "shift ({dy}, {dx}) must be smaller than {}x{}",
                self.height, self.width
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} invalid", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub x_rgb: Tensor,
    pub x_ir: Tensor,
    /// Ground-truth shift: `x_ir[y, x]` shows `x_rgb[y - dy, x - dx]`.
    pub shift: (i64, i64),
}

fn box_filter_circular(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.nchw().expect("rank-4");
    let (hi, wi) = (h as isize, w as isize);
    Tensor::from_fn(&[n, c, h, w], |k| {
        let (plane, rest) = (k / (h * w), k % (h * w));
        let (y, xx) = ((rest / w) as isize, (rest % w) as isize);
        let mut acc = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let yy = (y + dy).rem_euclid(hi) as usize;
                let xc = (xx + dx).rem_euclid(wi) as usize;
                acc += x.data()[plane * h * w + yy * w + xc];
            }
        }
        acc / 9.0
    })
}

fn roll(x: &Tensor, (dy, dx): (i64, i64)) -> Tensor {
    let (n, c, h, w) = x.nchw().expect("rank-4");
    Tensor::from_fn(&[n, c, h, w], |k| {
        let (plane, rest) = (k / (h * w), k % (h * w));
        let (y, xx) = ((rest / w) as i64, (rest % w) as i64);
        let sy = (y - dy).rem_euclid(h as i64) as usize;
        let sx = (xx - dx).rem_euclid(w as i64) as usize;
        x.data()[plane * h * w + sy * w + sx]
    })
}

/// Smoothed uniform noise as the RGB map; its circular shift plus fresh
/// Gaussian noise as the IR map. Batch size is 1.
pub fn gen_scenario(scn: &CalibScenario) -> Result<Scenario> {
    scn.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(scn.seed);
    let dims = [1, scn.channels, scn.height, scn.width];
    let mut base = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
    for _ in 0..scn.smoothing {
        base = box_filter_circular(&base);
    }
    let mut x_ir = roll(&base, scn.shift);
    if scn.noise_std > 0.0 {
        let normal = Normal::new(0.0, scn.noise_std)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in x_ir.data_mut() {
            *v += rng.sample(normal);
        }
    }
    Ok(Scenario {
        x_rgb: base,
        x_ir,
        shift: scn.shift,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryResult {
    /// IR query position `(y, x)`.
    pub query: (usize, usize),
    /// RGB key position with the largest attention weight.
    pub argmax: (usize, usize),
    /// RGB position showing the same content as the query.
    pub truth: (usize, usize),
    pub hit: bool,
    /// Euclidean distance between `argmax` and `truth`, in pixels.
    pub error: f64,
}

/// How well the untrained similarity map points at the true counterpart of
/// each IR query. Only queries whose counterpart lies inside the map without
/// wrapping are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub queries: Vec<QueryResult>,
    pub radius: usize,
    pub hit_rate: f64,
    pub mean_error: f64,
    pub low_confidence: bool,
}

impl RecoveryReport {
    /// One row per scored query.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_y,query_x,argmax_y,argmax_x,truth_y,truth_x,hit,error\n");
        for q in &self.queries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                q.query.0,
                q.query.1,
                q.argmax.0,
                q.argmax.1,
                q.truth.0,
                q.truth.1,
                u8::from(q.hit),
                q.error
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "queries,radius,hit_rate,mean_error,low_confidence\n{},{},{},{},{}\n",
            self.queries.len(),
            self.radius,
            self.hit_rate,
            self.mean_error,
            self.low_confidence
        )
    }
}

/// Probe-mode recovery: identity projections, zero normalization networks,
/// full resolution. IR features query RGB keys.
pub fn eval_alignment_recovery(scn: &Scenario, radius: usize) -> Result<RecoveryReport> {
    let (n, c, h, w) = scn.x_rgb.nchw()?;
    if n != 1 {
        return Err(Error::InvalidArgument(format!("expected batch 1, got {n}")));
    }
    let d = make_descriptors(&scn.x_rgb, &scn.x_ir, &IcaParams::probe(c))?;
    let m = cross_similarity(&d[0].q_ir, &d[0].k_rgb)?;
    let argmax = m.row_argmax();
    let (dy, dx) = scn.shift;
    let mut queries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = (y as i64 - dy, x as i64 - dx);
            if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                continue;
            }
            let truth = (ty as usize, tx as usize);
            let k = argmax[y * w + x];
            let found = (k / w, k % w);
            let ey = found.0.abs_diff(truth.0);
            let ex = found.1.abs_diff(truth.1);
            queries.push(QueryResult {
                query: (y, x),
                argmax: found,
                truth,
                hit: ey.max(ex) <= radius,
                error: ((ey * ey + ex * ex) as f64).sqrt(),
            });
        }
    }
    let count = queries.len().max(1) as f64;
    let hit_rate = queries.iter().filter(|q| q.hit).count() as f64 / count;
    let mean_error = queries.iter().map(|q| q.error).sum::<f64>() / count;
    Ok(RecoveryReport {
        low_confidence: queries.is_empty() || hit_rate < LOW_CONFIDENCE_HIT_RATE,
        queries,
        radius,
        hit_rate,
        mean_error,
    })
}
