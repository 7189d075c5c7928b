//! Low-precision compression of optimizer states.
//!
//! The crate builds up from bit packing and quantization maps through
//! normalization schemes to full tensor quantizers, then uses them inside
//! compressed SGDM/AdamW (plus a factored second moment and the
//! low-precision-memory SGDM variant with gradient accumulation), and ships
//! a deterministic experiment harness over desk-scale problems.
//!
//! Built with the `parallel` feature (default), elementwise kernels and
//! replicated runs fan out over rayon; results are bit-identical to the
//! sequential fallback.

pub mod bitpack;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod normalize;
pub mod optim;
pub mod parallel;
pub mod problems;
pub mod qmap;
pub mod quantizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
