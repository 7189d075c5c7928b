//! Experiment configuration: JSON schema, scheme-string grammar and
//! optimizer/problem construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::normalize::NormScheme;
use crate::optim::{
    AdamWConfig, Compressor, FixedStepQuantizer, LpmmConfig, SgdmConfig,
    DEFAULT_ELIGIBILITY_THRESHOLD,
};
use crate::problems::{logistic_regression, quadratic, small_mlp, Problem};
use crate::qmap::{build_de_map, build_linear_map};
use crate::quantizer::{QuantizerSpec, Rounding};
use crate::rng::splitmix64;

/// Parse a quantizer scheme string: `<norm>/<map>[:<bits>][:sr]`, e.g.
/// `b128/de`, `rank1/linear:4`, `pertensor/linear:8:sr`. Norms: `pertensor`,
/// `b<N>`, `rank1`, `axis<N>`. Maps: `linear`, `de`, `de0`.
pub fn parse_scheme(s: &str, signed: bool, default_bits: u8) -> Result<QuantizerSpec> {
    let err = |msg: String| Error::Config(format!("scheme {s:?}: {msg}"));
    let mut parts = s.split(':');
    let body = parts.next().unwrap_or_default();
    let mut bits = default_bits;
    let mut rounding = Rounding::Nearest;
    for extra in parts {
        match extra {
            "sr" | "stochastic" => rounding = Rounding::Stochastic,
            "nearest" => rounding = Rounding::Nearest,
            other => {
                bits = other
                    .parse()
                    .map_err(|_| err(format!("unknown modifier {other:?}")))?;
            }
        }
    }
    let (norm_str, map_str) = body
        .split_once('/')
        .ok_or_else(|| err("expected <norm>/<map>".into()))?;
    let scheme = match norm_str {
        "pertensor" | "tensor" => NormScheme::PerTensor,
        "rank1" => NormScheme::Rank1,
        other => {
            if let Some(b) = other.strip_prefix('b') {
                NormScheme::Block(b.parse().map_err(|_| err(format!("bad block size {b:?}")))?)
            } else if let Some(a) = other.strip_prefix("axis") {
                NormScheme::PerAxis(a.parse().map_err(|_| err(format!("bad axis {a:?}")))?)
            } else {
                return Err(err(format!("unknown normalization {other:?}")));
            }
        }
    };
    let map = match map_str {
        "linear" => build_linear_map(bits, signed)?,
        "de" => build_de_map(bits, signed, true)?,
        "de0" | "de-0" => build_de_map(bits, signed, false)?,
        other => return Err(err(format!("unknown map {other:?}"))),
    };
    Ok(QuantizerSpec::new(scheme, map, rounding))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        d: usize,
        #[serde(default = "default_condition")]
        condition_number: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
    Logreg {
        n_samples: usize,
        d: usize,
    },
    Mlp {
        #[serde(default = "default_layers")]
        layer_sizes: Vec<usize>,
        #[serde(default = "default_mlp_samples")]
        n_samples: usize,
    },
}

fn default_condition() -> f64 {
    10.0
}

fn default_layers() -> Vec<usize> {
    vec![8, 64, 80, 1]
}

fn default_mlp_samples() -> usize {
    128
}

impl ProblemConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProblemConfig::Quadratic { .. } => "quadratic",
            ProblemConfig::Logreg { .. } => "logreg",
            ProblemConfig::Mlp { .. } => "mlp",
        }
    }
}

/// Build the problem named by the config. The problem seed is derived from
/// the run seed, so one seed determines the whole run.
pub fn build_problem(
    cfg: &ProblemConfig,
    seed: u64,
    batch: Option<usize>,
) -> Result<Box<dyn Problem>> {
    let pseed = splitmix64(seed ^ 0x70726f62);
    Ok(match cfg {
        ProblemConfig::Quadratic {
            d,
            condition_number,
            noise_sigma,
        } => {
            if *d < 1 || *condition_number < 1.0 {
                return Err(Error::Config(
                    "quadratic: need d >= 1 and condition_number >= 1".into(),
                ));
            }
            Box::new(quadratic(*d, *condition_number, pseed, *noise_sigma))
        }
        ProblemConfig::Logreg { n_samples, d } => {
            if *n_samples < 1 || *d < 1 {
                return Err(Error::Config("logreg: need n_samples, d >= 1".into()));
            }
            Box::new(logistic_regression(*n_samples, *d, pseed).with_batch(batch))
        }
        ProblemConfig::Mlp {
            layer_sizes,
            n_samples,
        } => {
            if layer_sizes.len() < 3 {
                return Err(Error::Config("mlp: need at least one hidden layer".into()));
            }
            Box::new(small_mlp(layer_sizes, *n_samples, pseed).with_batch(batch))
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpmmSection {
    #[serde(default = "default_n_accum")]
    pub n_accum: usize,
    #[serde(default = "default_param_scheme")]
    pub param_scheme: String,
    #[serde(default = "default_grad_scheme")]
    pub grad_scheme: String,
    #[serde(default = "default_momentum_scheme")]
    pub momentum_scheme: String,
}

fn default_n_accum() -> usize {
    1
}

fn default_param_scheme() -> String {
    "b2048/linear:8:sr".into()
}

fn default_grad_scheme() -> String {
    "b2048/linear:8:sr".into()
}

fn default_momentum_scheme() -> String {
    "b2048/de:8:sr".into()
}

impl Default for LpmmSection {
    fn default() -> Self {
        LpmmSection {
            n_accum: default_n_accum(),
            param_scheme: default_param_scheme(),
            grad_scheme: default_grad_scheme(),
            momentum_scheme: default_momentum_scheme(),
        }
    }
}

/// One experiment: problem, optimizer, quantization schemes, horizon, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    /// `adamw32`, `adamw4`, `adamw4-factor`, `sgdm32` or `lpmm-sgdm`.
    pub optimizer: String,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub sgdm: SgdmConfig,
    #[serde(default)]
    pub lpmm: LpmmSection,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_threshold")]
    pub quantize_threshold: usize,
    #[serde(default)]
    pub batch: Option<usize>,
    /// Scheme override for the first moment of the 4-bit optimizers.
    #[serde(default)]
    pub first_moment_scheme: Option<String>,
    /// Scheme override for the second moment of the 4-bit optimizers.
    #[serde(default)]
    pub second_moment_scheme: Option<String>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_log_every() -> u64 {
    10
}

fn default_threshold() -> usize {
    DEFAULT_ELIGIBILITY_THRESHOLD
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(v)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_value(load_json(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        // resolve every referenced name before any work happens
        build_problem(&self.problem, self.seed, self.batch)?;
        self.moment_compressors()?;
        Ok(())
    }

    /// First- and second-moment compressors plus the factorization flag for
    /// the configured optimizer name.
    pub fn moment_compressors(&self) -> Result<(Compressor, Compressor, bool)> {
        let m_scheme = self.first_moment_scheme.as_deref().unwrap_or("b128/de");
        let v_scheme = self.second_moment_scheme.as_deref().unwrap_or("rank1/linear");
        match self.optimizer.as_str() {
            "adamw32" | "sgdm32" => Ok((Compressor::Identity, Compressor::Identity, false)),
            "adamw4" => Ok((
                Compressor::Map(parse_scheme(m_scheme, true, 4)?),
                Compressor::Map(parse_scheme(v_scheme, false, 4)?),
                false,
            )),
            "adamw4-factor" => Ok((
                Compressor::Map(parse_scheme(m_scheme, true, 4)?),
                Compressor::Map(parse_scheme(v_scheme, false, 4)?),
                true,
            )),
            "lpmm-sgdm" => Ok((
                Compressor::Map(parse_scheme(&self.lpmm.momentum_scheme, true, 8)?),
                Compressor::Identity,
                false,
            )),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    pub fn lpmm_config(&self) -> Result<(LpmmConfig, Compressor, Compressor)> {
        let cfg = LpmmConfig {
            base: self.sgdm,
            n_accum: self.lpmm.n_accum,
        };
        cfg.validate()?;
        Ok((
            cfg,
            Compressor::Map(parse_scheme(&self.lpmm.param_scheme, true, 8)?),
            Compressor::Map(parse_scheme(&self.lpmm.grad_scheme, true, 8)?),
        ))
    }
}

/// Replication settings for the convergence-bound check on a quadratic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCheckConfig {
    pub d: usize,
    #[serde(default = "default_condition")]
    pub condition_number: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_bound_momentum")]
    pub momentum: f64,
    /// Step size; defaults to the largest admissible (1 - momentum) / L.
    #[serde(default)]
    pub lr: Option<f64>,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Fixed step of the stochastic linear momentum quantizer.
    #[serde(default = "default_momentum_delta")]
    pub momentum_delta: f64,
}

fn default_bound_momentum() -> f64 {
    0.9
}

fn default_momentum_delta() -> f64 {
    0.01
}

impl BoundCheckConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: BoundCheckConfig = serde_json::from_value(load_json(path)?)
            .map_err(|e| Error::Config(format!("invalid bound-check config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.condition_number < 1.0 || self.steps == 0 {
            return Err(Error::Config(
                "bound check: need d >= 1, condition_number >= 1, steps >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("bound check: momentum must lie in [0, 1)".into()));
        }
        let alpha_max = (1.0 - self.momentum) / self.condition_number;
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr <= alpha_max * (1.0 + 1e-12)) {
                return Err(Error::Config(format!(
                    "bound check: lr {lr} outside (0, {alpha_max}]"
                )));
            }
        }
        if !(self.momentum_delta > 0.0) {
            return Err(Error::Config("bound check: momentum_delta must be positive".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.lr
            .unwrap_or((1.0 - self.momentum) / self.condition_number)
    }

    pub fn momentum_quantizer(&self) -> FixedStepQuantizer {
        FixedStepQuantizer::new(self.momentum_delta, Rounding::Stochastic)
    }
}

/// Load a JSON file.
pub fn load_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Apply a `key=value` override onto a JSON config. Dotted keys descend into
/// nested objects; values parse as JSON when possible, else as strings.
pub fn apply_override(config: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split never yields an empty iterator")
}
