//! Convergence bound for compressed SGDM on smooth convex objectives, and
//! the fixed-step linear quantizer whose variance realizes the bound's
//! quantizer assumptions.

use crate::error::{Error, Result};
use crate::parallel;
use crate::quantizer::Rounding;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

/// Linear quantizer on the fixed grid `delta * k`, `|k| <= max_code`.
/// Stochastic rounding makes it unbiased for in-range inputs, with
/// elementwise variance at most `delta^2 / 4`.
#[derive(Debug, Clone, Copy)]
pub struct FixedStepQuantizer {
    pub delta: f64,
    pub max_code: i64,
    pub rounding: Rounding,
}

impl FixedStepQuantizer {
    /// Effectively unclipped grid (the bound must never bind for
    /// unbiasedness, so default it far beyond any state magnitude).
    pub fn new(delta: f64, rounding: Rounding) -> Self {
        FixedStepQuantizer {
            delta,
            max_code: 1 << 40,
            rounding,
        }
    }

    pub fn quantize_value(&self, x: f64, u: f64) -> f64 {
        let b = self.max_code as f64;
        let scaled = (x / self.delta).clamp(-b, b);
        let code = match self.rounding {
            Rounding::Nearest => scaled.round(),
            Rounding::Stochastic => {
                let lo = scaled.floor();
                if u < scaled - lo {
                    lo + 1.0
                } else {
                    lo
                }
            }
        };
        self.delta * code
    }

    /// Quantize a whole tensor, one counter-derived uniform per element.
    pub fn requantize(&self, x: &Tensor, key: StreamKey) -> Tensor {
        let data = x.data();
        let out = parallel::map_indexed(data.len(), |j| {
            self.quantize_value(data[j], key.uniform(j as u64))
        });
        Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
    }

    /// Worst-case root of E||Q(x) - x||^2 over d dimensions: delta sqrt(d)/2.
    pub fn variance_bound_sigma(&self, d: usize) -> f64 {
        self.delta * (d as f64).sqrt() / 2.0
    }
}

/// Right-hand side of the suboptimality bound for compressed SGDM after `t`
/// steps on an L-smooth convex objective:
///
/// `(1/2t) (L beta / (1-beta) + (1-beta)/alpha) dist0^2
///  + alpha sigma^2 / (1-beta) + alpha sigma_m^2 / (1-beta)`
///
/// where `dist0` is the distance from the start to the minimizer, `sigma`
/// bounds the gradient noise and `sigma_m` the momentum quantizer noise.
/// Valid for step sizes `0 < alpha <= (1-beta)/L`.
pub fn theorem1_bound(
    l: f64,
    beta: f64,
    alpha: f64,
    t: u64,
    dist0: f64,
    sigma: f64,
    sigma_m: f64,
) -> Result<f64> {
    if !(l > 0.0) {
        return Err(Error::Domain("smoothness constant must be positive".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Domain("momentum must lie in [0, 1)".into()));
    }
    if t == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    let alpha_max = (1.0 - beta) / l;
    if !(alpha > 0.0 && alpha <= alpha_max * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!(
            "step size {alpha} outside (0, {alpha_max}]"
        )));
    }
    let transient = (l * beta / (1.0 - beta) + (1.0 - beta) / alpha) * dist0 * dist0
        / (2.0 * t as f64);
    let noise = alpha * sigma * sigma / (1.0 - beta);
    let quant = alpha * sigma_m * sigma_m / (1.0 - beta);
    Ok(transient + noise + quant)
}
