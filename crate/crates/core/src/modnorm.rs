//! Modality normalization: instance-normalize one modality and remap it onto
//! the channel statistics of the other, with a learned residual correction.

use crate::error::{shape_err, Result};
use crate::tensor::{
    add_channel_stats, conv2d, instance_normalize, instance_stats, relu, ConvParams, Tensor,
};

/// The three 3x3 convolutions (`C -> C`) that predict `beta` and `gamma`
/// from the reference modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModNormParams {
    /// Shared trunk ahead of the relu.
    pub wd: ConvParams,
    /// `beta` head.
    pub wb: ConvParams,
    /// `gamma` head.
    pub wg: ConvParams,
}

impl ModNormParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            wd: ConvParams::zeros(c, c, 3),
            wb: ConvParams::zeros(c, c, 3),
            wg: ConvParams::zeros(c, c, 3),
        }
    }
}

/// Returns `IN(src) * gamma + beta`, where
/// `beta = wb * relu(wd * reference) + mu_ref` and
/// `gamma = wg * relu(wd * reference) + sigma_ref`.
///
/// Both streams use this one operation with the roles of `src` and
/// `reference` swapped.
pub fn modality_normalize(src: &Tensor, reference: &Tensor, p: &ModNormParams) -> Result<Tensor> {
    if src.dims() != reference.dims() {
        return Err(shape_err!(
            "modality_normalize {:?} vs {:?}",
            src.dims(),
            reference.dims()
        ));
    }
    src.nchw()?;
    let (mu_ref, sigma_ref) = instance_stats(reference)?;
    let hidden = relu(&conv2d(reference, &p.wd)?);
    let beta = add_channel_stats(&conv2d(&hidden, &p.wb)?, &mu_ref)?;
    let gamma = add_channel_stats(&conv2d(&hidden, &p.wg)?, &sigma_ref)?;
    instance_normalize(src)?.mul(&gamma)?.add(&beta)
}
