pub mod analysis;
pub mod bench;
pub mod config;
pub mod error;
pub mod frontend;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod model_config;
pub mod multistream;
mod par;
pub mod tdnnf;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use par::parallel_enabled;
pub use tensor::{Real, Tensor};
