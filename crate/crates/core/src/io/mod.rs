//! File formats: `C2TF` tensors, parameter files, PGM heatmaps and JSON run
//! configs.

mod config;
mod params;
mod pgm;
mod tensor_file;

pub use config::RunConfig;
pub use params::{params_from_tensor, params_to_tensor, read_params, write_params};
pub use pgm::{encode_pgm, write_pgm};
pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, HEADER_LEN, MAGIC, VERSION,
};
