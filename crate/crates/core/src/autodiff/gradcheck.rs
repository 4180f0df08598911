use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::graph::Fault;
use super::traced::{trace_block, INPUT_IR, INPUT_RGB};
use super::finite_diff_oracle;
use crate::block::{block_forward_detailed, init_params, BlockConfig, BlockParams};
use crate::error::Result;
use crate::tensor::Tensor;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// `|a - o| / max(1e-8, |a| + |o|)`.
pub fn rel_err(analytic: f64, oracle: f64) -> f64 {
    (analytic - oracle).abs() / (analytic.abs() + oracle.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    /// Convolution name (weight and bias together) or `input.rgb`/`input.ir`.
    pub group: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose +-h probes cross a relu or bilinear-cell boundary.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// `group,max_rel_err,checked,skipped` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,max_rel_err,checked,skipped\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{:e},{},{}\n",
                g.group, g.max_rel_err, g.checked, g.skipped
            ));
        }
        s
    }
}

/// Flat view of everything being differentiated: `(group, leaf, value)`.
fn flatten(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    p: &BlockParams,
    bias_enabled: bool,
) -> Vec<(String, String, Tensor)> {
    let mut out = Vec::new();
    for (name, conv) in p.convs() {
        out.push((name.into(), format!("{name}.weight"), conv.weight.clone()));
        if bias_enabled {
            out.push((name.into(), format!("{name}.bias"), conv.bias.clone()));
        }
    }
    out.push((INPUT_RGB.into(), INPUT_RGB.into(), x_rgb.clone()));
    out.push((INPUT_IR.into(), INPUT_IR.into(), x_ir.clone()));
    out
}

fn assemble(
    template: &BlockParams,
    bias_enabled: bool,
    flat: &[Tensor],
) -> (BlockParams, Tensor, Tensor) {
    let mut p = template.clone();
    let mut it = flat.iter();
    for (_, conv) in p.convs_mut() {
        conv.weight = it.next().expect("weight").clone();
        if bias_enabled {
            conv.bias = it.next().expect("bias").clone();
        }
    }
    let rgb = it.next().expect("rgb").clone();
    let ir = it.next().expect("ir").clone();
    (p, rgb, ir)
}

/// Neumaier summation; keeps the oracle's cancellation error near one
/// rounding of the individual terms rather than of the running total.
fn compensated_sum<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Default-initialized parameters for `cfg` and `[-1, 1]` uniform inputs of
/// batch 1 drawn from `seed`.
pub fn gradcheck_report(cfg: &BlockConfig, seed: u64) -> Result<GradcheckReport> {
    let params = init_params(cfg)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let dims = [1, cfg.channels, cfg.height, cfg.width];
    let x_rgb = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
    let x_ir = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
    gradcheck_block(&x_rgb, &x_ir, &params, cfg, None)
}

/// Compares tape gradients of `sum(out_rgb) + sum(out_ir)` against central
/// differences of the plain forward pass, per parameter group.
pub fn gradcheck_block(
    x_rgb: &Tensor,
    x_ir: &Tensor,
    params: &BlockParams,
    cfg: &BlockConfig,
    fault: Option<Fault>,
) -> Result<GradcheckReport> {
    let mut traced = trace_block(x_rgb, x_ir, params, cfg)?;
    if let Some(f) = fault {
        traced.graph.inject_fault(f);
    }
    let grads = traced.graph.backward(traced.loss, 1.0)?;
    let base_sig = traced.graph.kink_signature();

    let flat = flatten(x_rgb, x_ir, params, cfg.bias_enabled);
    let at: Vec<Tensor> = flat.iter().map(|(_, _, t)| t.clone()).collect();
    // The loss splits into sum(x_rgb) + sum(x_ir), whose gradient is exactly
    // one on the inputs, plus the fused-branch sum. Differencing only the
    // latter keeps the large residual terms out of the cancellation.
    let branch = |ts: &[Tensor]| -> Result<f64> {
        let (p, a, b) = assemble(params, cfg.bias_enabled, ts);
        let t = block_forward_detailed(&a, &b, &p, cfg)?;
        Ok(compensated_sum(t.ica.y_rgb.data().iter().chain(t.ica.y_ir.data())))
    };
    let mut oracle = finite_diff_oracle(branch, &at, FD_STEP)?;
    let n = oracle.len();
    for fd in &mut oracle[n - 2..] {
        *fd = fd.map(|v| v + 1.0);
    }

    let mut groups: Vec<GroupError> = Vec::new();
    let mut probe = at.clone();
    for (t, ((group, leaf, value), fd)) in flat.iter().zip(&oracle).enumerate() {
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.dims()));
        let entry = match groups.iter_mut().position(|g| &g.group == group) {
            Some(i) => &mut groups[i],
            None => {
                groups.push(GroupError {
                    group: group.clone(),
                    max_rel_err: 0.0,
                    checked: 0,
                    skipped: 0,
                });
                groups.last_mut().expect("just pushed")
            }
        };
        for k in 0..value.len() {
            let orig = value.data()[k];
            let mut smooth = true;
            for delta in [FD_STEP, -FD_STEP] {
                probe[t].data_mut()[k] = orig + delta;
                let (p, a, b) = assemble(params, cfg.bias_enabled, &probe);
                smooth &= trace_block(&a, &b, &p, cfg)?.graph.kink_signature() == base_sig;
            }
            probe[t].data_mut()[k] = orig;
            if !smooth {
                entry.skipped += 1;
                continue;
            }
            entry.checked += 1;
            entry.max_rel_err = entry
                .max_rel_err
                .max(rel_err(analytic.data()[k], fd.data()[k]));
        }
    }
    Ok(GradcheckReport {
        groups,
        tolerance: GRADCHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn default_config_passes() {
        let cfg = BlockConfig::new(4, 6, 6, 2, 7);
        let report = gradcheck_report(&cfg, 7).unwrap();
        eprintln!("{}", report.to_csv());
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn key_bias_gradient_vanishes() {
        // a key bias shifts every logit of a query row by the same amount
        let cfg = BlockConfig::new(4, 6, 6, 2, 3);
        let p = init_params(&cfg).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let t = trace_block(&x, &y, &p, &cfg).unwrap();
        let g = t.graph.backward(t.loss, 1.0).unwrap();
        for name in ["ica.rgb.wk.bias", "ica.ir.wk.bias"] {
            assert!(g.get(name).unwrap().max_abs() < 1e-14, "{name}");
        }
    }

    #[test]
    fn flatten_assemble_round_trip() {
        let cfg = BlockConfig::new(2, 4, 4, 2, 3);
        let p = init_params(&cfg).unwrap();
        let a = Tensor::full(&[1, 2, 4, 4], 0.5);
        let b = Tensor::full(&[1, 2, 4, 4], -0.5);
        for bias in [true, false] {
            let flat: Vec<Tensor> = flatten(&a, &b, &p, bias).into_iter().map(|f| f.2).collect();
            assert_eq!(flat.len(), if bias { 36 } else { 19 });
            let (p2, a2, b2) = assemble(&p, bias, &flat);
            assert_eq!((p2, a2, b2), (p.clone(), a.clone(), b.clone()));
        }
    }
}
