use std::path::Path;

use super::tensor_file::{read_tensor, write_tensor};
use crate::block::BlockParams;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// All weights and biases as one rank-1 tensor, in [`crate::block::CONV_NAMES`]
/// order with each bias directly after its weight. Biases are written even
/// when disabled (as zeros), so the layout depends only on `C`.
pub fn params_to_tensor(p: &BlockParams) -> Tensor {
    let mut data = Vec::new();
    for (_, conv) in p.convs() {
        data.extend_from_slice(conv.weight.data());
        data.extend_from_slice(conv.bias.data());
    }
    let n = data.len();
    Tensor::new(&[n], data).expect("flat")
}

pub fn params_from_tensor(t: &Tensor, channels: usize) -> Result<BlockParams> {
    let mut p = BlockParams::zeros(channels);
    let expected = p.param_count(true);
    if t.rank() != 1 || t.len() != expected {
        return Err(shape_err!(
            "parameter tensor {:?} does not hold {expected} values for C = {channels}",
            t.dims()
        ));
    }
    let mut offset = 0;
    let mut take = |dst: &mut Tensor| {
        let n = dst.len();
        dst.data_mut().copy_from_slice(&t.data()[offset..offset + n]);
        offset += n;
    };
    for (_, conv) in p.convs_mut() {
        take(&mut conv.weight);
        take(&mut conv.bias);
    }
    Ok(p)
}

pub fn write_params(path: impl AsRef<Path>, p: &BlockParams) -> Result<()> {
    write_tensor(path, &params_to_tensor(p))
}

pub fn read_params(path: impl AsRef<Path>, channels: usize) -> Result<BlockParams> {
    params_from_tensor(&read_tensor(path)?, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{init_params, BlockConfig};

    #[test]
    fn layout_and_round_trip() {
        let cfg = BlockConfig::new(3, 6, 6, 2, 9);
        let mut p = init_params(&cfg).unwrap();
        p.afs.wc.bias.data_mut()[1] = 0.75;
        let t = params_to_tensor(&p);
        // 73C^2 + 18C weights plus 16C + 2 biases
        assert_eq!(t.len(), 73 * 9 + 54 + 50);
        assert_eq!(&t.data()[..18], p.afs.wc.weight.data());
        assert_eq!(t.data()[19], 0.75);
        assert_eq!(params_from_tensor(&t, 3).unwrap(), p);
        assert!(params_from_tensor(&t, 4).is_err());
    }
}
