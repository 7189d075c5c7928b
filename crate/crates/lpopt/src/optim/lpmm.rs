//! SGDM where parameters, gradient accumulators and momentum all live in low
//! precision. Each partial gradient sum is requantized as it accumulates;
//! the momentum update and the parameter update are requantized too. With
//! nearest rounding and updates below half the parameter step the parameters
//! freeze (arithmetic underflow); stochastic rounding keeps the expected
//! update intact, and accumulating several minibatch gradients before the
//! update enlarges it relative to the parameter grid.

use std::collections::BTreeMap;

use crate::diagnostics::bin_change_ratio;
use crate::error::{Error, Result};
use crate::parallel;
use crate::quantizer::{dequantize, quantize};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

use super::sgdm::{LANE_GRAD, LANE_M, LANE_PARAM};
use super::{
    check_same_shape, decompress_moment, eligible_for_quantization, Compressor, SgdmConfig,
    SgdmState,
};

/// Settings for low-precision-memory SGDM.
#[derive(Debug, Clone)]
pub struct LpmmConfig {
    pub base: SgdmConfig,
    /// Gradient accumulation steps per parameter update.
    pub n_accum: usize,
}

impl LpmmConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.n_accum == 0 {
            return Err(Error::Config("lpmm: n_accum must be at least 1".into()));
        }
        Ok(())
    }
}

/// One LPMM-SGDM step for a single tensor. `grads` holds the `n_accum`
/// minibatch gradients of this step. Returns the bin change ratio of the
/// parameter update when it is measurable (quantized parameters, positive
/// steps) and `collect` is set.
#[allow(clippy::too_many_arguments)]
pub fn lpmm_sgdm_step(
    theta: &mut Tensor,
    state: &mut SgdmState,
    grads: &[Tensor],
    cfg: &LpmmConfig,
    param_comp: &Compressor,
    grad_comp: &Compressor,
    m_comp: &Compressor,
    key: StreamKey,
    collect: bool,
) -> Result<Option<f64>> {
    if grads.len() != cfg.n_accum {
        return Err(Error::Config(format!(
            "expected {} accumulation gradients, got {}",
            cfg.n_accum,
            grads.len()
        )));
    }
    for g in grads {
        check_same_shape(theta, g)?;
    }
    let t = state.step + 1;
    let n = theta.numel();

    // g_0 = 0; g_i = Q(g_{i-1} + grad_i)
    let mut acc = Tensor::zeros(theta.shape().to_vec());
    for (i, g) in grads.iter().enumerate() {
        let acc_data = acc.data();
        let g_data = g.data();
        let sum = Tensor::new(
            theta.shape().to_vec(),
            parallel::map_indexed(n, |j| acc_data[j] + g_data[j]),
        )?;
        acc = grad_comp.requantize(&sum, key.with(t).with(LANE_GRAD).with(i as u64))?;
    }

    // m = Q(beta m + g_N); the update uses the quantized momentum
    let m_prev = decompress_moment(&state.m, theta.shape())?;
    let beta = cfg.base.momentum;
    let m_prev_data = m_prev.data();
    let acc_data = acc.data();
    let m_raw = Tensor::new(
        theta.shape().to_vec(),
        parallel::map_indexed(n, |j| beta * m_prev_data[j] + acc_data[j]),
    )?;
    state.m = m_comp.compress(&m_raw, key.with(t).with(LANE_M))?;
    let m_t = decompress_moment(&state.m, theta.shape())?;

    // theta = Q(theta - alpha m)
    let lr = cfg.base.lr;
    let theta_data = theta.data();
    let m_data = m_t.data();
    let candidate = Tensor::new(
        theta.shape().to_vec(),
        parallel::map_indexed(n, |j| theta_data[j] - lr * m_data[j]),
    )?;
    let param_key = key.with(t).with(LANE_PARAM);
    let (theta_new, ratio) = match param_comp {
        Compressor::Identity => (candidate, None),
        Compressor::Map(spec) => {
            let packed = quantize(&candidate, spec, param_key)?;
            let new = dequantize(&packed)?;
            let ratio = if collect {
                let min_gap = spec.map.min_adjacent_gap();
                let delta: Vec<f64> = (0..n)
                    .map(|j| packed.scales().scale_at_flat(j) * min_gap)
                    .collect();
                if delta.iter().all(|&d| d > 0.0) {
                    Some(bin_change_ratio(theta, &new, &delta)?)
                } else {
                    None
                }
            } else {
                None
            };
            (new, ratio)
        }
        Compressor::FixedStep(q) => {
            let new = q.requantize(&candidate, param_key);
            let ratio = if collect {
                Some(bin_change_ratio(theta, &new, &vec![q.delta; n])?)
            } else {
                None
            };
            (new, ratio)
        }
    };
    *theta = theta_new;
    state.step = t;
    Ok(ratio)
}

/// LPMM-SGDM over a set of named tensors.
pub struct LpmmSgdm {
    cfg: LpmmConfig,
    param_comp: Compressor,
    grad_comp: Compressor,
    m_comp: Compressor,
    threshold: usize,
    seed: u64,
    states: BTreeMap<String, SgdmState>,
}

impl LpmmSgdm {
    pub fn new(
        cfg: LpmmConfig,
        param_comp: Compressor,
        grad_comp: Compressor,
        m_comp: Compressor,
        threshold: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(LpmmSgdm {
            cfg,
            param_comp,
            grad_comp,
            m_comp,
            threshold,
            seed,
            states: BTreeMap::new(),
        })
    }

    pub fn n_accum(&self) -> usize {
        self.cfg.n_accum
    }

    /// Advance all tensors by one update. `grad_batches` holds `n_accum`
    /// gradient sets, each aligned with `params`. Returns the mean bin
    /// change ratio across tensors where it was measurable.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor)],
        grad_batches: &[Vec<Tensor>],
        collect: bool,
    ) -> Result<Option<f64>> {
        if grad_batches.len() != self.cfg.n_accum {
            return Err(Error::Config(format!(
                "expected {} gradient batches, got {}",
                self.cfg.n_accum,
                grad_batches.len()
            )));
        }
        let mut ratios = Vec::new();
        for (idx, (name, theta)) in params.iter_mut().enumerate() {
            let grads: Vec<Tensor> = grad_batches.iter().map(|b| b[idx].clone()).collect();
            let eligible = eligible_for_quantization(theta.shape(), self.threshold);
            let pick = |c: &Compressor| {
                if eligible {
                    c.clone()
                } else {
                    Compressor::Identity
                }
            };
            let state = self.states.entry(name.clone()).or_default();
            let key = StreamKey::new(self.seed).with_name(name);
            let ratio = lpmm_sgdm_step(
                theta,
                state,
                &grads,
                &self.cfg,
                &pick(&self.param_comp),
                &pick(&self.grad_comp),
                &pick(&self.m_comp),
                key,
                collect,
            )?;
            ratios.extend(ratio);
        }
        Ok(if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        })
    }

    pub fn states(&self) -> &BTreeMap<String, SgdmState> {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::sgdm_step;

    fn id() -> Compressor {
        Compressor::Identity
    }

    #[test]
    fn n1_identity_reduces_to_sgdm() {
        let base = SgdmConfig {
            lr: 0.05,
            momentum: 0.9,
        };
        let cfg = LpmmConfig { base, n_accum: 1 };
        let key = StreamKey::new(5);
        let mut theta_a = Tensor::from_vec((0..8).map(|i| key.uniform(i) - 0.5).collect());
        let mut theta_b = theta_a.clone();
        let mut st_a = SgdmState::default();
        let mut st_b = SgdmState::default();
        for t in 0..10u64 {
            let g = Tensor::from_vec((0..8).map(|i| key.with(t).uniform(i) - 0.5).collect());
            lpmm_sgdm_step(
                &mut theta_a, &mut st_a, &[g.clone()], &cfg, &id(), &id(), &id(),
                StreamKey::new(0), false,
            )
            .unwrap();
            sgdm_step(&mut theta_b, &mut st_b, &g, &base, &id(), StreamKey::new(0), false).unwrap();
        }
        assert_eq!(theta_a.data(), theta_b.data());
    }

    #[test]
    fn n2_identity_accumulates_gradients() {
        let base = SgdmConfig {
            lr: 0.05,
            momentum: 0.9,
        };
        let cfg = LpmmConfig { base, n_accum: 2 };
        let g1 = Tensor::from_vec(vec![0.5, -0.2]);
        let g2 = Tensor::from_vec(vec![0.1, 0.4]);
        let mut theta_a = Tensor::from_vec(vec![1.0, -1.0]);
        let mut theta_b = theta_a.clone();
        let mut st_a = SgdmState::default();
        let mut st_b = SgdmState::default();
        lpmm_sgdm_step(
            &mut theta_a, &mut st_a, &[g1.clone(), g2.clone()], &cfg, &id(), &id(), &id(),
            StreamKey::new(0), false,
        )
        .unwrap();
        let summed = Tensor::from_vec(vec![0.0 + 0.5 + 0.1, 0.0 + -0.2 + 0.4]);
        sgdm_step(&mut theta_b, &mut st_b, &summed, &base, &id(), StreamKey::new(0), false)
            .unwrap();
        assert_eq!(theta_a.data(), theta_b.data());
    }

    #[test]
    fn wrong_gradient_count_is_a_config_error() {
        let cfg = LpmmConfig {
            base: SgdmConfig {
                lr: 0.1,
                momentum: 0.0,
            },
            n_accum: 3,
        };
        let mut theta = Tensor::from_vec(vec![1.0]);
        let mut st = SgdmState::default();
        let res = lpmm_sgdm_step(
            &mut theta,
            &mut st,
            &[Tensor::from_vec(vec![0.1])],
            &cfg,
            &id(),
            &id(),
            &id(),
            StreamKey::new(0),
            false,
        );
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
