pub mod bench;
pub mod commands;
pub mod config;
pub mod ddim;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod f0cond;
pub mod io;
pub mod lcd;
pub mod lcm_infer;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod synthdata;

pub use error::{Error, Result};
