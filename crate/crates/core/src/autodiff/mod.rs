//! Reverse-mode differentiation over the block's operation set, and a
//! central-difference oracle to check it against.

mod gradcheck;
mod graph;
mod traced;

pub use gradcheck::{
    gradcheck_block, gradcheck_report, rel_err, GradcheckReport, GroupError, FD_STEP,
    GRADCHECK_TOL,
};
pub use graph::{Fault, Gradients, Graph, NodeId};
pub use traced::{trace_block, TracedBlock, INPUT_IR, INPUT_RGB};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e) - f(x - h e)) / 2h` for every coordinate
/// of every tensor in `at`. Returned gradients are aligned with `at`.
pub fn finite_diff_oracle<F>(mut f: F, at: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut point = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for t in 0..at.len() {
        let mut grad = Tensor::zeros(at[t].dims());
        for k in 0..at[t].len() {
            let orig = at[t].data()[k];
            point[t].data_mut()[k] = orig + h;
            let plus = f(&point)?;
            point[t].data_mut()[k] = orig - h;
            let minus = f(&point)?;
            point[t].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}
