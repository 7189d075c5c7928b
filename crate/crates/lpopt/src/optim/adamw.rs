//! AdamW with compressed moments. The raw exponential moving averages are
//! what gets compressed; bias correction is recomputed transiently from the
//! step counter. Weight decay is decoupled, so zero decay recovers Adam.

use std::collections::BTreeMap;

use crate::diagnostics::relative_error;
use crate::error::{Error, Result};
use crate::parallel;
use crate::quantizer::checkpoint::Entry;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::sgdm::{second_moment_reports, LANE_M, LANE_V};
use super::{
    check_same_shape, decompress_moment, eligible_for_quantization, factored_reconstruct,
    factored_update, AdamWConfig, Compressor, FactoredPair, StepDiagnostics, StoredMoment,
};

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: StoredMoment,
    pub v: StoredMoment,
    pub step: u64,
}

impl Default for AdamWState {
    fn default() -> Self {
        AdamWState {
            m: StoredMoment::Absent,
            v: StoredMoment::Absent,
            step: 0,
        }
    }
}

/// One compressed AdamW step for a single tensor.
///
/// With `factor_v` set and a tensor of two or more dimensions, the second
/// moment is kept as factored row/column statistics instead of elementwise
/// state; one-dimensional second moments still go through `v_comp`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    theta: &mut Tensor,
    state: &mut AdamWState,
    g: &Tensor,
    cfg: &AdamWConfig,
    m_comp: &Compressor,
    v_comp: &Compressor,
    factor_v: bool,
    key: StreamKey,
    collect: bool,
) -> Result<StepDiagnostics> {
    check_same_shape(theta, g)?;
    let t = state.step + 1;
    let use_factored = factor_v && theta.ndim() >= 2;
    let g_data = g.data();
    let n = g_data.len();

    let m_prev = decompress_moment(&state.m, theta.shape())?;
    let (beta1, beta2) = (cfg.beta1, cfg.beta2);
    let m_prev_data = m_prev.data();
    let m_new = Tensor::new(
        theta.shape().to_vec(),
        parallel::map_indexed(n, |i| beta1 * m_prev_data[i] + (1.0 - beta1) * g_data[i]),
    )?;

    let (v_new, factored) = if use_factored {
        let mut f = match &state.v {
            StoredMoment::Factored(f) => f.clone(),
            StoredMoment::Absent => FactoredPair::zeros(theta.shape())?,
            other => {
                return Err(Error::Shape(format!(
                    "second moment stored as {other:?} but factorization requested"
                )))
            }
        };
        factored_update(&mut f, g, beta2)?;
        (factored_reconstruct(&f)?, Some(f))
    } else {
        let v_prev = decompress_moment(&state.v, theta.shape())?;
        let v_prev_data = v_prev.data();
        let v = Tensor::new(
            theta.shape().to_vec(),
            parallel::map_indexed(n, |i| {
                // reconstructed second moments cannot go negative with the
                // unsigned maps used for them, but guard regardless
                let prev = v_prev_data[i].max(0.0);
                beta2 * prev + (1.0 - beta2) * g_data[i] * g_data[i]
            }),
        )?;
        (v, None)
    };

    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (lr, eps, wd) = (cfg.lr, cfg.eps, cfg.weight_decay);
    let m_slice = m_new.data();
    let v_slice = v_new.data();
    parallel::for_each_indexed_mut(theta.data_mut(), |i, w| {
        let m_hat = m_slice[i] / bc1;
        let v_hat = v_slice[i] / bc2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * *w;
    });

    state.m = m_comp.compress(&m_new, key.with(t).with(LANE_M))?;
    state.v = match factored {
        Some(f) => StoredMoment::Factored(f),
        None => v_comp.compress(&v_new, key.with(t).with(LANE_V))?,
    };
    state.step = t;

    let mut diag = StepDiagnostics::default();
    if collect {
        if !m_comp.is_identity() {
            let stored = decompress_moment(&state.m, theta.shape())?;
            diag.m = Some(relative_error(&m_new, &stored)?);
        }
        if use_factored || !v_comp.is_identity() {
            let (plain, inv) = second_moment_reports(&v_new, &state.v)?;
            diag.v = plain;
            diag.v_inv_sqrt = inv;
        }
    }
    Ok(diag)
}

/// AdamW over a set of named tensors with per-tensor compressed state.
pub struct CompressedAdamW {
    cfg: AdamWConfig,
    m_comp: Compressor,
    v_comp: Compressor,
    factor_v: bool,
    threshold: usize,
    seed: u64,
    states: BTreeMap<String, AdamWState>,
}

impl CompressedAdamW {
    pub fn new(
        cfg: AdamWConfig,
        m_comp: Compressor,
        v_comp: Compressor,
        factor_v: bool,
        threshold: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(CompressedAdamW {
            cfg,
            m_comp,
            v_comp,
            factor_v,
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
            let eligible = eligible_for_quantization(theta.shape(), self.threshold);
            let m_comp = if eligible {
                self.m_comp.clone()
            } else {
                Compressor::Identity
            };
            let v_comp = if eligible {
                self.v_comp.clone()
            } else {
                Compressor::Identity
            };
            let state = self.states.entry(name.clone()).or_default();
            let key = StreamKey::new(self.seed).with_name(name);
            let diag = adamw_step(
                theta,
                state,
                g,
                &self.cfg,
                &m_comp,
                &v_comp,
                self.factor_v,
                key,
                collect,
            )?;
            out.push((name.clone(), diag));
        }
        Ok(out)
    }

    pub fn states(&self) -> &BTreeMap<String, AdamWState> {
        &self.states
    }

    /// Checkpoint entries for the current states, as stored. Factored second
    /// moments become two raw statistics vectors.
    pub fn state_entries(&self) -> Vec<(String, Entry)> {
        let mut out = Vec::new();
        for (name, st) in &self.states {
            push_moment(&mut out, format!("{name}.m"), &st.m);
            match &st.v {
                StoredMoment::Factored(f) => {
                    out.push((
                        format!("{name}.v_row"),
                        Entry::Fp32(Tensor::from_vec(f.row_stats().to_vec())),
                    ));
                    out.push((
                        format!("{name}.v_col"),
                        Entry::Fp32(Tensor::from_vec(f.col_stats().to_vec())),
                    ));
                }
                other => push_moment(&mut out, format!("{name}.v"), other),
            }
        }
        out
    }

    /// The same states decompressed to full precision, for size comparisons.
    pub fn state_entries_fp32(&self) -> Result<Vec<(String, Entry)>> {
        let mut out = Vec::new();
        for (name, st) in &self.states {
            for (suffix, m) in [("m", &st.m), ("v", &st.v)] {
                if matches!(m, StoredMoment::Absent) {
                    continue;
                }
                let shape = match m {
                    StoredMoment::Full(t) => t.shape().to_vec(),
                    StoredMoment::Packed(p) => p.shape().to_vec(),
                    StoredMoment::Factored(f) => f.shape().to_vec(),
                    StoredMoment::Absent => unreachable!(),
                };
                out.push((
                    format!("{name}.{suffix}"),
                    Entry::Fp32(decompress_moment(m, &shape)?),
                ));
            }
        }
        Ok(out)
    }
}

fn push_moment(out: &mut Vec<(String, Entry)>, name: String, m: &StoredMoment) {
    match m {
        StoredMoment::Absent => {}
        StoredMoment::Full(t) => out.push((name, Entry::Fp32(t.clone()))),
        StoredMoment::Packed(p) => out.push((name, Entry::Packed(p.clone()))),
        StoredMoment::Factored(_) => unreachable!("factored moments are split by the caller"),
    }
}
