pub mod error;
pub mod tensor;
pub mod modnorm;
pub mod ica;
pub mod afs;
pub mod block;
pub mod autodiff;
pub mod analysis;
pub mod io;
pub mod cli;
