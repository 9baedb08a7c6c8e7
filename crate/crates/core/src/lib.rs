//! Multi-view video compression with a multi-grid implicit neural
//! representation: a sequence is encoded by overfitting a small decoder
//! network to it, and the trained weights are pruned, quantized and
//! entropy-coded into a compact bitstream.

pub mod codec;
pub mod compress;
pub mod config;
pub mod dataio;
pub mod filter;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod multigrid;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use model::Model;
