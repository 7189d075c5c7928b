//! Quantization scales and normalization into the unit interval.
//!
//! A scheme decides at what granularity absolute maxima are taken: one scale
//! for the whole tensor, one per index along an axis, one per contiguous
//! block of the row-major flattening, or rank-1 (one absmax vector per axis,
//! combined per element by taking the minimum across axes). Scales are kept
//! as f32, matching how they are stored on disk and counted in memory
//! overhead; all arithmetic widens to f64.
//!
//! Zero scales (an all-zero block, row or tensor) normalize to 0 and
//! denormalize back to 0, so all-zero data round-trips exactly.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{strides_of, Tensor};

/// Granularity of normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScheme {
    PerTensor,
    PerAxis(usize),
    /// Block-wise over the row-major flattening with the given block size.
    Block(usize),
    Rank1,
}

/// Identifiers stored in checkpoint headers.
pub const SCHEME_ID_PER_TENSOR: u8 = 0;
pub const SCHEME_ID_PER_AXIS: u8 = 1;
pub const SCHEME_ID_BLOCK: u8 = 2;
pub const SCHEME_ID_RANK1: u8 = 3;

impl NormScheme {
    pub fn id(&self) -> u8 {
        match self {
            NormScheme::PerTensor => SCHEME_ID_PER_TENSOR,
            NormScheme::PerAxis(_) => SCHEME_ID_PER_AXIS,
            NormScheme::Block(_) => SCHEME_ID_BLOCK,
            NormScheme::Rank1 => SCHEME_ID_RANK1,
        }
    }

    /// Number of scales this scheme stores for a tensor of `shape`.
    pub fn scale_count(&self, shape: &[usize]) -> usize {
        let numel: usize = shape.iter().product();
        match self {
            NormScheme::PerTensor => 1,
            NormScheme::PerAxis(a) => shape.get(*a).copied().unwrap_or(0),
            NormScheme::Block(b) => numel.div_ceil(*b),
            NormScheme::Rank1 => {
                if shape.len() <= 1 {
                    1
                } else {
                    shape.iter().sum()
                }
            }
        }
    }
}

/// Scales computed from one tensor, tagged by scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    shape: Vec<usize>,
    kind: ScaleKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScaleKind {
    PerTensor(f32),
    PerAxis { axis: usize, scales: Vec<f32> },
    Block { block: usize, scales: Vec<f32> },
    /// One absolute-maximum vector per tensor axis.
    Rank1 { axis_stats: Vec<Vec<f32>> },
}

impl ScaleState {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> &ScaleKind {
        &self.kind
    }

    pub fn scheme(&self) -> NormScheme {
        match &self.kind {
            ScaleKind::PerTensor(_) => NormScheme::PerTensor,
            ScaleKind::PerAxis { axis, .. } => NormScheme::PerAxis(*axis),
            ScaleKind::Block { block, .. } => NormScheme::Block(*block),
            ScaleKind::Rank1 { .. } => NormScheme::Rank1,
        }
    }

    pub fn scale_count(&self) -> usize {
        match &self.kind {
            ScaleKind::PerTensor(_) => 1,
            ScaleKind::PerAxis { scales, .. } | ScaleKind::Block { scales, .. } => scales.len(),
            ScaleKind::Rank1 { axis_stats } => axis_stats.iter().map(Vec::len).sum(),
        }
    }

    /// All scales concatenated in serialization order.
    pub fn flat_scales(&self) -> Vec<f32> {
        match &self.kind {
            ScaleKind::PerTensor(s) => vec![*s],
            ScaleKind::PerAxis { scales, .. } | ScaleKind::Block { scales, .. } => scales.clone(),
            ScaleKind::Rank1 { axis_stats } => axis_stats.concat(),
        }
    }

    /// Rebuild a state from serialized parts.
    pub fn from_parts(shape: Vec<usize>, scheme: NormScheme, scales: Vec<f32>) -> Result<Self> {
        let expected = scheme.scale_count(&shape);
        if scales.len() != expected {
            return Err(Error::Shape(format!(
                "{scheme:?} over shape {shape:?} needs {expected} scales, got {}",
                scales.len()
            )));
        }
        let kind = match scheme {
            NormScheme::PerTensor => ScaleKind::PerTensor(scales[0]),
            NormScheme::PerAxis(axis) => ScaleKind::PerAxis { axis, scales },
            NormScheme::Block(block) => ScaleKind::Block { block, scales },
            NormScheme::Rank1 => {
                if shape.len() <= 1 {
                    ScaleKind::PerTensor(scales[0])
                } else {
                    let mut axis_stats = Vec::with_capacity(shape.len());
                    let mut off = 0;
                    for &d in &shape {
                        axis_stats.push(scales[off..off + d].to_vec());
                        off += d;
                    }
                    ScaleKind::Rank1 { axis_stats }
                }
            }
        };
        Ok(ScaleState { shape, kind })
    }

    /// Scale applied to the element at a flat row-major index.
    pub fn scale_at_flat(&self, flat: usize) -> f64 {
        match &self.kind {
            ScaleKind::PerTensor(s) => f64::from(*s),
            ScaleKind::PerAxis { axis, scales } => {
                let stride = strides_of(&self.shape)[*axis];
                f64::from(scales[(flat / stride) % self.shape[*axis]])
            }
            ScaleKind::Block { block, scales } => f64::from(scales[flat / block]),
            ScaleKind::Rank1 { axis_stats } => {
                let strides = strides_of(&self.shape);
                let mut m = f64::INFINITY;
                for (r, stats) in axis_stats.iter().enumerate() {
                    let j = (flat / strides[r]) % self.shape[r];
                    m = m.min(f64::from(stats[j]));
                }
                m
            }
        }
    }
}

/// Absolute maxima along one axis: `out[j] = max |x| over the slice with
/// coordinate j on `axis`.
fn axis_absmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let strides = strides_of(shape);
    let len = shape[axis];
    let inner = strides[axis];
    let outer = data.len() / (len * inner);
    parallel::map_indexed(len, |j| {
        let mut m = 0.0f64;
        for o in 0..outer {
            let base = o * len * inner + j * inner;
            for i in 0..inner {
                m = m.max(data[base + i].abs());
            }
        }
        m
    })
}

/// Compute quantization scales for `x` under `scheme`.
///
/// Rank-1 over a tensor with a single axis degenerates to per-tensor
/// normalization (the per-slice maxima would be the elements themselves), so
/// that case returns a per-tensor state.
pub fn compute_scales(x: &Tensor, scheme: NormScheme) -> Result<ScaleState> {
    if x.numel() == 0 {
        return Err(Error::Shape("cannot compute scales of an empty tensor".into()));
    }
    let shape = x.shape().to_vec();
    let data = x.data();
    let kind = match scheme {
        NormScheme::PerTensor => ScaleKind::PerTensor(x.absmax() as f32),
        NormScheme::PerAxis(axis) => {
            if axis >= shape.len() {
                return Err(Error::Range(format!(
                    "axis {axis} out of range for shape {shape:?}"
                )));
            }
            let scales = axis_absmax(data, &shape, axis).iter().map(|&s| s as f32).collect();
            ScaleKind::PerAxis { axis, scales }
        }
        NormScheme::Block(block) => {
            if block == 0 {
                return Err(Error::Range("block size must be at least 1".into()));
            }
            let blocks = data.len().div_ceil(block);
            let scales = parallel::map_indexed(blocks, |k| {
                let lo = k * block;
                let hi = (lo + block).min(data.len());
                data[lo..hi].iter().fold(0.0f64, |a, &v| a.max(v.abs())) as f32
            });
            ScaleKind::Block { block, scales }
        }
        NormScheme::Rank1 => {
            if shape.len() <= 1 {
                ScaleKind::PerTensor(x.absmax() as f32)
            } else {
                let axis_stats = (0..shape.len())
                    .map(|r| axis_absmax(data, &shape, r).iter().map(|&s| s as f32).collect())
                    .collect();
                ScaleKind::Rank1 { axis_stats }
            }
        }
    };
    Ok(ScaleState { shape, kind })
}

/// Scale applied to the element at a multi-index.
pub fn elementwise_scale(state: &ScaleState, index: &[usize]) -> Result<f64> {
    if index.len() != state.shape.len()
        || index.iter().zip(&state.shape).any(|(i, d)| i >= d)
    {
        return Err(Error::Range(format!(
            "index {index:?} invalid for shape {:?}",
            state.shape
        )));
    }
    let strides = strides_of(&state.shape);
    let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
    Ok(state.scale_at_flat(flat))
}

fn check_shape(state: &ScaleState, t: &Tensor) -> Result<()> {
    if state.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "tensor shape {:?} does not match scale state shape {:?}",
            t.shape(),
            state.shape()
        )));
    }
    Ok(())
}

/// Divide each element by its scale; elements under a zero scale become 0.
pub fn normalize(x: &Tensor, state: &ScaleState) -> Result<Tensor> {
    check_shape(state, x)?;
    let data = x.data();
    let out = parallel::map_indexed(data.len(), |j| {
        let s = state.scale_at_flat(j);
        if s > 0.0 {
            data[j] / s
        } else {
            0.0
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// Multiply normalized values back by their scales.
pub fn denormalize(n: &Tensor, state: &ScaleState) -> Result<Tensor> {
    check_shape(state, n)?;
    let data = n.data();
    let out = parallel::map_indexed(data.len(), |j| data[j] * state.scale_at_flat(j));
    Tensor::new(n.shape().to_vec(), out)
}
