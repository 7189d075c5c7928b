//! Optimizers that keep their state compressed between steps.
//!
//! Each step decompresses the state of one tensor, runs the ordinary update
//! in full precision, and recompresses the raw (not bias-corrected) result,
//! so only a single tensor's worth of transient full-precision state exists
//! at a time.

mod adamw;
mod factored;
mod lpmm;
mod sgdm;
mod theory;

pub use adamw::{adamw_step, AdamWState, CompressedAdamW};
pub use factored::{factored_reconstruct, factored_update, FactoredPair};
pub use lpmm::{lpmm_sgdm_step, LpmmConfig, LpmmSgdm};
pub use sgdm::{sgdm_step, CompressedSgdm, SgdmState};
pub use theory::{theorem1_bound, FixedStepQuantizer};

use serde::{Deserialize, Serialize};

use crate::diagnostics::ErrorReport;
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, quantize, PackedTensor, QuantizerSpec};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

/// Tensors at or below this element count keep full-precision states.
pub const DEFAULT_ELIGIBILITY_THRESHOLD: usize = 4096;

/// True when a tensor of this shape is large enough to quantize.
pub fn eligible_for_quantization(shape: &[usize], threshold: usize) -> bool {
    shape.iter().product::<usize>() > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("adamw: lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adamw: betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adamw: eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("adamw: weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdmConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdmConfig {
    fn default() -> Self {
        SgdmConfig {
            lr: 0.1,
            momentum: 0.9,
        }
    }
}

impl SgdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("sgdm: lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sgdm: momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// How one optimizer state tensor is stored between steps.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredMoment {
    /// Initial state; decompresses to zeros.
    Absent,
    Full(Tensor),
    Packed(PackedTensor),
    Factored(FactoredPair),
}

impl StoredMoment {
    /// Approximate persistent storage cost in bytes (codes + f32 scales, or
    /// f32 elements for uncompressed states).
    pub fn storage_bytes(&self) -> usize {
        match self {
            StoredMoment::Absent => 0,
            StoredMoment::Full(t) => 4 * t.numel(),
            StoredMoment::Packed(p) => p.payload().len() + 4 * p.scales().scale_count(),
            StoredMoment::Factored(f) => 4 * f.stat_count(),
        }
    }
}

/// Compression applied to one kind of optimizer state.
#[derive(Debug, Clone)]
pub enum Compressor {
    /// Keep full precision; decompress(compress(x)) == x bitwise.
    Identity,
    /// Normalization + map + rounding quantizer.
    Map(QuantizerSpec),
    /// Fixed-step linear quantizer with a known variance bound.
    FixedStep(FixedStepQuantizer),
}

impl Compressor {
    pub fn is_identity(&self) -> bool {
        matches!(self, Compressor::Identity)
    }

    pub fn compress(&self, x: &Tensor, key: StreamKey) -> Result<StoredMoment> {
        match self {
            Compressor::Identity => Ok(StoredMoment::Full(x.clone())),
            Compressor::Map(spec) => Ok(StoredMoment::Packed(quantize(x, spec, key)?)),
            Compressor::FixedStep(q) => Ok(StoredMoment::Full(q.requantize(x, key))),
        }
    }

    pub fn decompress(&self, stored: &StoredMoment, shape: &[usize]) -> Result<Tensor> {
        decompress_moment(stored, shape)
    }

    /// One quantize/reconstruct round trip, the `Q(x)` of in-place update
    /// rules. Identity passes the tensor through untouched.
    pub fn requantize(&self, x: &Tensor, key: StreamKey) -> Result<Tensor> {
        match self {
            Compressor::Identity => Ok(x.clone()),
            Compressor::Map(spec) => dequantize(&quantize(x, spec, key)?),
            Compressor::FixedStep(q) => Ok(q.requantize(x, key)),
        }
    }
}

/// Reconstruct a stored moment as a full-precision tensor.
pub fn decompress_moment(stored: &StoredMoment, shape: &[usize]) -> Result<Tensor> {
    match stored {
        StoredMoment::Absent => Ok(Tensor::zeros(shape.to_vec())),
        StoredMoment::Full(t) => Ok(t.clone()),
        StoredMoment::Packed(p) => dequantize(p),
        StoredMoment::Factored(f) => factored_reconstruct(f),
    }
}

/// Per-step quantization quality of one tensor's states, collected on demand.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// First moment: raw update vs its stored reconstruction.
    pub m: Option<ErrorReport>,
    /// Second moment: raw update vs its stored reconstruction.
    pub v: Option<ErrorReport>,
    /// Second moment through the inverse square root transform.
    pub v_inv_sqrt: Option<ErrorReport>,
}

pub(crate) fn check_same_shape(theta: &Tensor, g: &Tensor) -> Result<()> {
    if !theta.same_shape(g) {
        return Err(Error::Shape(format!(
            "parameter shape {:?} vs gradient shape {:?}",
            theta.shape(),
            g.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligibility_threshold_is_exclusive() {
        assert!(!eligible_for_quantization(&[4096], DEFAULT_ELIGIBILITY_THRESHOLD));
        assert!(eligible_for_quantization(&[64, 65], DEFAULT_ELIGIBILITY_THRESHOLD));
        assert!(!eligible_for_quantization(&[1], DEFAULT_ELIGIBILITY_THRESHOLD));
        assert!(eligible_for_quantization(&[4097], DEFAULT_ELIGIBILITY_THRESHOLD));
        assert!(eligible_for_quantization(&[10], 0));
    }

    #[test]
    fn identity_compressor_roundtrips_bitwise() {
        let x = Tensor::from_vec(vec![0.1, -0.7, 3.3]);
        let c = Compressor::Identity;
        let stored = c.compress(&x, StreamKey::new(0)).unwrap();
        assert_eq!(c.decompress(&stored, x.shape()).unwrap(), x);
    }

    #[test]
    fn absent_moment_decompresses_to_zeros() {
        let z = decompress_moment(&StoredMoment::Absent, &[2, 3]).unwrap();
        assert_eq!(z, Tensor::zeros(vec![2, 3]));
    }

    #[test]
    fn config_validation() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdmConfig {
            lr: 0.0,
            momentum: 0.0
        }
        .validate()
        .is_err());
    }
}
