use crate::block::{BlockConfig, BlockParams};
use crate::error::Result;

/// FLOP counts per block component for one batch element, counting a
/// multiply-add as 2 FLOPs.
///
/// Softmax is charged 5 FLOPs per entry (scale, max-shift, exp, sum,
/// divide); normalization statistics and elementwise residual adds are not
/// counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    /// Six 1x1 query/key/value projections at the sampled resolution.
    pub descriptors: u64,
    /// Two modality-normalization branches of three 3x3 convolutions each.
    pub modnorm: u64,
    /// Both `q . k^T` products.
    pub attention_matmuls: u64,
    pub softmax: u64,
    /// Both `M . v` products.
    pub value_matmuls: u64,
    /// The two 1x1 stride-`s` upsampling projections.
    pub output_projection: u64,
    /// Offset network at full resolution plus bilinear sampling of both
    /// streams (4 taps each).
    pub afs: u64,
    pub parameter_count: u64,
}

impl FlopsReport {
    /// Attention-specific cost: both matmul pairs and the softmax.
    pub fn attention(&self) -> u64 {
        self.attention_matmuls + self.softmax + self.value_matmuls
    }

    pub fn total(&self) -> u64 {
        self.components().iter().map(|(_, v)| v).sum()
    }

    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("descriptors", self.descriptors),
            ("modnorm", self.modnorm),
            ("attentionMatmuls", self.attention_matmuls),
            ("softmax", self.softmax),
            ("valueMatmuls", self.value_matmuls),
            ("outputProjection", self.output_projection),
            ("afs", self.afs),
        ]
    }

    /// `component,value` rows, then `total` and `parameterCount`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,value\n");
        for (name, v) in self.components() {
            s.push_str(&format!("{name},{v}\n"));
        }
        s.push_str(&format!("total,{}\n", self.total()));
        s.push_str(&format!("parameterCount,{}\n", self.parameter_count));
        s
    }
}

fn ica_terms(c: u64, positions: u64) -> FlopsReport {
    let conv1 = 2 * c * c * positions;
    let conv3 = 18 * c * c * positions;
    let matmul = 2 * positions * positions * c;
    FlopsReport {
        descriptors: 6 * conv1,
        modnorm: 6 * conv3,
        attention_matmuls: 2 * matmul,
        softmax: 2 * 5 * positions * positions,
        value_matmuls: 2 * matmul,
        output_projection: 2 * conv1,
        afs: 0,
        parameter_count: 0,
    }
}

fn parameter_count(cfg: &BlockConfig) -> u64 {
    BlockParams::zeros(cfg.channels).param_count(cfg.bias_enabled) as u64
}

/// Closed-form costs of the block at `cfg`.
pub fn count_flops(cfg: &BlockConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let c = cfg.channels as u64;
    let full = (cfg.height * cfg.width) as u64;
    let sampled = (cfg.sampled_height() * cfg.sampled_width()) as u64;
    let offset_net = 2 * (2 * c) * c * full + 18 * c * c * full + 18 * c * 2 * full;
    let sampling = 2 * 8 * c * sampled;
    Ok(FlopsReport {
        afs: offset_net + sampling,
        parameter_count: parameter_count(cfg),
        ..ica_terms(c, sampled)
    })
}

/// Cross-attention applied directly to full-resolution features, with no
/// sampling stage; the stride is ignored.
pub fn count_flops_without_afs(cfg: &BlockConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let c = cfg.channels as u64;
    let afs = BlockParams::zeros(cfg.channels)
        .afs_param_count(cfg.bias_enabled) as u64;
    Ok(FlopsReport {
        parameter_count: parameter_count(cfg) - afs,
        ..ica_terms(c, (cfg.height * cfg.width) as u64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, hw: usize, s: usize) -> BlockConfig {
        BlockConfig::new(c, hw, hw, s, 0)
    }

    #[test]
    fn attention_term_closed_form() {
        let r = count_flops(&cfg(256, 64, 1)).unwrap();
        assert_eq!(r.attention_matmuls / 2, 2 * 4096 * 4096 * 256);
        assert_eq!(r.attention_matmuls / 2, 8_589_934_592);
    }

    #[test]
    fn total_is_sum_of_components() {
        let r = count_flops(&cfg(8, 12, 3)).unwrap();
        let sum = r.descriptors
            + r.modnorm
            + r.attention_matmuls
            + r.softmax
            + r.value_matmuls
            + r.output_projection
            + r.afs;
        assert_eq!(r.total(), sum);
    }

    #[test]
    fn stride_one_is_bare_attention_plus_sampling_network() {
        for (c, hw) in [(4, 6), (16, 9), (256, 64)] {
            let with = count_flops(&cfg(c, hw, 1)).unwrap();
            let without = count_flops_without_afs(&cfg(c, hw, 1)).unwrap();
            assert_eq!(with.total(), without.total() + with.afs);
            let afs_params = (2 * c * c + c) + (9 * c * c + c) + (18 * c + 2);
            assert_eq!(with.parameter_count, without.parameter_count + afs_params as u64);
        }
    }

    #[test]
    fn stride_three_ratio() {
        let s1 = count_flops(&cfg(256, 64, 1)).unwrap();
        let s3 = count_flops(&cfg(256, 64, 3)).unwrap();
        let ratio = s3.attention_matmuls as f64 / s1.attention_matmuls as f64;
        let closed = (21.0 * 21.0 / 4096.0f64).powi(2);
        assert!((ratio - closed).abs() < 1e-15);
        assert!(ratio < 1.0 / 80.0);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // weights 73C^2 + 18C, biases 16C + 2
        let mut c = cfg(5, 10, 2);
        assert_eq!(count_flops(&c).unwrap().parameter_count, 1915 + 82);
        c.bias_enabled = false;
        assert_eq!(count_flops(&c).unwrap().parameter_count, 1915);
    }

    #[test]
    fn doubling_channels() {
        let a = count_flops(&cfg(8, 12, 2)).unwrap();
        let b = count_flops(&cfg(16, 12, 2)).unwrap();
        for (x, y) in [
            (a.descriptors, b.descriptors),
            (a.modnorm, b.modnorm),
            (a.output_projection, b.output_projection),
        ] {
            assert_eq!(y, 4 * x);
        }
        assert_eq!(b.attention_matmuls, 2 * a.attention_matmuls);
        assert_eq!(b.value_matmuls, 2 * a.value_matmuls);
        assert_eq!(b.softmax, a.softmax);
        // the 2-channel offset head and the sampling scale linearly in C
        assert!(b.afs > 2 * a.afs && b.afs < 4 * a.afs);
    }

    #[test]
    fn attention_decreases_with_stride() {
        let mut prev = u64::MAX;
        for s in 1..=8 {
            let r = count_flops(&cfg(32, 64, s)).unwrap();
            assert!(r.attention() < prev);
            prev = r.attention();
        }
    }

    #[test]
    fn csv_has_every_component() {
        let csv = count_flops(&cfg(4, 6, 2)).unwrap().to_csv();
        assert_eq!(csv.lines().count(), 1 + 7 + 2);
        assert!(csv.starts_with("component,value\ndescriptors,"));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(count_flops(&cfg(0, 6, 2)).is_err());
        assert!(count_flops(&cfg(4, 2, 3)).is_err());
    }
}
