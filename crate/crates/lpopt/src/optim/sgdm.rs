//! SGDM with a compressed momentum buffer: decompress, update
//! `m <- beta m + g`, apply `theta <- theta - lr m`, recompress.

use std::collections::BTreeMap;

use crate::diagnostics::{inv_sqrt_error, relative_error};
use crate::error::{Error, Result};
use crate::parallel;
use crate::quantizer::checkpoint::Entry;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::{
    check_same_shape, decompress_moment, eligible_for_quantization, Compressor, SgdmConfig,
    StepDiagnostics, StoredMoment,
};

pub(crate) const LANE_M: u64 = 0;
pub(crate) const LANE_V: u64 = 1;
pub(crate) const LANE_PARAM: u64 = 2;
pub(crate) const LANE_GRAD: u64 = 3;

#[derive(Debug, Clone)]
pub struct SgdmState {
    pub m: StoredMoment,
    pub step: u64,
}

impl Default for SgdmState {
    fn default() -> Self {
        SgdmState {
            m: StoredMoment::Absent,
            step: 0,
        }
    }
}

/// One compressed-momentum SGDM step for a single tensor. `key` is the
/// tensor's stream key (seed and name already folded in).
pub fn sgdm_step(
    theta: &mut Tensor,
    state: &mut SgdmState,
    g: &Tensor,
    cfg: &SgdmConfig,
    m_comp: &Compressor,
    key: StreamKey,
    collect: bool,
) -> Result<StepDiagnostics> {
    check_same_shape(theta, g)?;
    let t = state.step + 1;
    let m_prev = decompress_moment(&state.m, theta.shape())?;
    let beta = cfg.momentum;
    let m_data = m_prev.data();
    let g_data = g.data();
    let m_new = Tensor::new(
        theta.shape().to_vec(),
        parallel::map_indexed(g_data.len(), |i| beta * m_data[i] + g_data[i]),
    )?;
    let lr = cfg.lr;
    let m_slice = m_new.data();
    parallel::for_each_indexed_mut(theta.data_mut(), |i, w| {
        *w -= lr * m_slice[i];
    });
    state.m = m_comp.compress(&m_new, key.with(t).with(LANE_M))?;
    state.step = t;

    let mut diag = StepDiagnostics::default();
    if collect && !m_comp.is_identity() {
        let stored = decompress_moment(&state.m, theta.shape())?;
        diag.m = Some(relative_error(&m_new, &stored)?);
    }
    Ok(diag)
}

/// SGDM over a set of named tensors, each with its own momentum state and
/// random stream. Tensors at or below the eligibility threshold keep
/// full-precision momentum.
pub struct CompressedSgdm {
    cfg: SgdmConfig,
    m_comp: Compressor,
    threshold: usize,
    seed: u64,
    states: BTreeMap<String, SgdmState>,
}

impl CompressedSgdm {
    pub fn new(cfg: SgdmConfig, m_comp: Compressor, threshold: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(CompressedSgdm {
            cfg,
            m_comp,
            threshold,
            seed,
            states: BTreeMap::new(),
        })
    }

    pub fn step(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[Tensor],
        collect: bool,
    ) -> Result<Vec<(String, StepDiagnostics)>> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let mut out = Vec::new();
        for ((name, theta), g) in params.iter_mut().zip(grads) {
            let comp = if eligible_for_quantization(theta.shape(), self.threshold) {
                self.m_comp.clone()
            } else {
                Compressor::Identity
            };
            let state = self.states.entry(name.clone()).or_default();
            let key = StreamKey::new(self.seed).with_name(name);
            let diag = sgdm_step(theta, state, g, &self.cfg, &comp, key, collect)?;
            out.push((name.clone(), diag));
        }
        Ok(out)
    }

    pub fn states(&self) -> &BTreeMap<String, SgdmState> {
        &self.states
    }

    /// Checkpoint entries for the current states, as stored.
    pub fn state_entries(&self) -> Vec<(String, Entry)> {
        let mut out = Vec::new();
        for (name, st) in &self.states {
            match &st.m {
                StoredMoment::Absent => {}
                StoredMoment::Full(t) => out.push((format!("{name}.m"), Entry::Fp32(t.clone()))),
                StoredMoment::Packed(p) => {
                    out.push((format!("{name}.m"), Entry::Packed(p.clone())))
                }
                StoredMoment::Factored(_) => unreachable!("sgdm stores no factored state"),
            }
        }
        out
    }
}

/// Helper shared by the drivers: error reports for a freshly compressed
/// second moment.
pub(crate) fn second_moment_reports(
    raw: &Tensor,
    stored: &StoredMoment,
) -> Result<(Option<crate::diagnostics::ErrorReport>, Option<crate::diagnostics::ErrorReport>)> {
    let rec = decompress_moment(stored, raw.shape())?;
    let plain = relative_error(raw, &rec)?;
    let inv = inv_sqrt_error(raw, &rec, 1e-6)?;
    Ok((Some(plain), Some(inv)))
}
