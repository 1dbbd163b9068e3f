pub mod autograd;
pub mod boxes;
pub mod cfc_crb;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod ops;
pub mod sfc_g2;
pub mod sppf_lska;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
