pub mod autoencoder;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod run;
pub mod schedules;
pub mod synthdata;
pub mod tensor;
pub mod videoedit;

pub use error::{Error, Result};
pub use tensor::Tensor;
