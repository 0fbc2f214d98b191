//! Feature extraction and the convolutional stem.

pub mod io;
pub mod logmel;
pub mod specaugment;
pub mod stem;
