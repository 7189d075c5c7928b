//! Experiment runner: seeded convergence runs, scheme sweeps, convergence-
//! bound replication and checkpoint analysis, all emitting deterministic CSV.

pub mod config;

pub use config::{
    apply_override, load_json, parse_scheme, BoundCheckConfig, ExperimentConfig, ProblemConfig,
};

use std::fmt::Write as _;
use std::time::Instant;

use crate::diagnostics::{relative_error, ErrorReport};
use crate::error::{Error, Result};
use crate::optim::{
    CompressedAdamW, CompressedSgdm, LpmmSgdm, SgdmState, StepDiagnostics,
    StoredMoment,
};
use crate::problems::Problem;
use crate::quantizer::checkpoint::{load_checkpoint, to_bytes, Entry};
use crate::quantizer::{dequantize, quantize};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

/// One logged row of a run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub m_rel_l2: Option<f64>,
    pub m_max_abs: Option<f64>,
    pub m_zero_fraction: Option<f64>,
    pub v_rel_l2: Option<f64>,
    pub v_max_abs: Option<f64>,
    pub v_zero_fraction: Option<f64>,
    pub v_inv_sqrt_rel_l2: Option<f64>,
    pub bin_change_ratio: Option<f64>,
    pub wall_time_s: f64,
}

/// End-of-run summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub optimizer: String,
    pub problem: String,
    pub steps: u64,
    pub seed: u64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub mean_m_rel_l2: Option<f64>,
    pub mean_v_rel_l2: Option<f64>,
    pub mean_v_inv_sqrt_rel_l2: Option<f64>,
    pub mean_v_zero_fraction: Option<f64>,
    pub state_bytes: usize,
    pub state_bytes_fp32: usize,
    pub compression_ratio: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub summary: Option<RunSummary>,
    /// Step at which the loss became non-finite, if the run aborted.
    pub aborted_at: Option<u64>,
}

enum Driver {
    AdamW(CompressedAdamW),
    Sgdm(CompressedSgdm),
    Lpmm(LpmmSgdm),
}

impl Driver {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.optimizer.as_str() {
            "adamw32" | "adamw4" | "adamw4-factor" => {
                let (m, v, factored) = cfg.moment_compressors()?;
                Ok(Driver::AdamW(CompressedAdamW::new(
                    cfg.adamw,
                    m,
                    v,
                    factored,
                    cfg.quantize_threshold,
                    cfg.seed,
                )?))
            }
            "sgdm32" => {
                let (m, _, _) = cfg.moment_compressors()?;
                Ok(Driver::Sgdm(CompressedSgdm::new(
                    cfg.sgdm,
                    m,
                    cfg.quantize_threshold,
                    cfg.seed,
                )?))
            }
            "lpmm-sgdm" => {
                let (m, _, _) = cfg.moment_compressors()?;
                let (lpmm_cfg, param, grad) = cfg.lpmm_config()?;
                Ok(Driver::Lpmm(LpmmSgdm::new(
                    lpmm_cfg,
                    param,
                    grad,
                    m,
                    cfg.quantize_threshold,
                    cfg.seed,
                )?))
            }
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    fn state_entries(&self) -> Vec<(String, Entry)> {
        match self {
            Driver::AdamW(o) => o.state_entries(),
            Driver::Sgdm(o) => o.state_entries(),
            Driver::Lpmm(o) => {
                let mut out = Vec::new();
                for (name, st) in o.states() {
                    push_sgdm_entry(&mut out, name, st);
                }
                out
            }
        }
    }

    fn state_entries_fp32(&self) -> Result<Vec<(String, Entry)>> {
        match self {
            Driver::AdamW(o) => o.state_entries_fp32(),
            _ => self
                .state_entries()
                .into_iter()
                .map(|(n, e)| Ok((n, Entry::Fp32(e.to_tensor()?))))
                .collect(),
        }
    }
}

fn push_sgdm_entry(out: &mut Vec<(String, Entry)>, name: &str, st: &SgdmState) {
    match &st.m {
        StoredMoment::Absent => {}
        StoredMoment::Full(t) => out.push((format!("{name}.m"), Entry::Fp32(t.clone()))),
        StoredMoment::Packed(p) => out.push((format!("{name}.m"), Entry::Packed(p.clone()))),
        StoredMoment::Factored(_) => {}
    }
}

fn merge_reports(reports: &[Option<ErrorReport>]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let defined: Vec<&ErrorReport> = reports.iter().flatten().collect();
    if defined.is_empty() {
        return (None, None, None);
    }
    let rels: Vec<f64> = defined.iter().filter_map(|r| r.rel_l2).collect();
    let rel = if rels.is_empty() {
        None
    } else {
        Some(rels.iter().sum::<f64>() / rels.len() as f64)
    };
    let max_abs = defined.iter().map(|r| r.max_abs).fold(0.0f64, f64::max);
    let zero = defined.iter().map(|r| r.zero_fraction).sum::<f64>() / defined.len() as f64;
    (rel, Some(max_abs), Some(zero))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Execute one experiment. Deterministic in (config, seed): the CSV emitted
/// from the returned records is byte-identical across repeated runs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = config::build_problem(&cfg.problem, cfg.seed, cfg.batch)?;
    let mut driver = Driver::build(cfg)?;
    let mut params = problem.initial_params();
    let mut records = Vec::new();
    let mut aborted_at = None;

    for t in 1..=cfg.steps {
        let log_now = t % cfg.log_every == 0 || t == cfg.steps;
        let (diags, ratio): (Vec<(String, StepDiagnostics)>, Option<f64>) = match &mut driver {
            Driver::AdamW(o) => {
                let grads = problem.stochastic_grad(&params, t);
                (o.step(&mut params, &grads, log_now)?, None)
            }
            Driver::Sgdm(o) => {
                let grads = problem.stochastic_grad(&params, t);
                (o.step(&mut params, &grads, log_now)?, None)
            }
            Driver::Lpmm(o) => {
                let n = o.n_accum() as u64;
                let batches: Vec<Vec<Tensor>> = (0..n)
                    .map(|i| problem.stochastic_grad(&params, t * n + i))
                    .collect();
                let ratio = o.step(&mut params, &batches, log_now)?;
                (Vec::new(), ratio)
            }
        };
        if log_now {
            let loss = problem.loss(&params);
            let grad_norm = problem
                .full_grad(&params)
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            let m_reports: Vec<Option<ErrorReport>> =
                diags.iter().map(|(_, d)| d.m).collect();
            let v_reports: Vec<Option<ErrorReport>> =
                diags.iter().map(|(_, d)| d.v).collect();
            let v_inv: Vec<Option<ErrorReport>> =
                diags.iter().map(|(_, d)| d.v_inv_sqrt).collect();
            let (m_rel, m_max, m_zero) = merge_reports(&m_reports);
            let (v_rel, v_max, v_zero) = merge_reports(&v_reports);
            let (v_inv_rel, _, _) = merge_reports(&v_inv);
            records.push(RunRecord {
                step: t,
                loss,
                grad_norm,
                m_rel_l2: m_rel,
                m_max_abs: m_max,
                m_zero_fraction: m_zero,
                v_rel_l2: v_rel,
                v_max_abs: v_max,
                v_zero_fraction: v_zero,
                v_inv_sqrt_rel_l2: v_inv_rel,
                bin_change_ratio: ratio,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            if !loss.is_finite() {
                aborted_at = Some(t);
                break;
            }
        }
    }

    let summary = if aborted_at.is_none() {
        let state_entries = driver.state_entries();
        let state_bytes = to_bytes(&state_entries)?.len();
        let fp32_entries = driver.state_entries_fp32()?;
        let state_bytes_fp32 = to_bytes(&fp32_entries)?.len();
        let last = records.last();
        Some(RunSummary {
            optimizer: cfg.optimizer.clone(),
            problem: cfg.problem.kind().to_string(),
            steps: cfg.steps,
            seed: cfg.seed,
            final_loss: last.map_or(f64::NAN, |r| r.loss),
            final_grad_norm: last.map_or(f64::NAN, |r| r.grad_norm),
            mean_m_rel_l2: mean_of(records.iter().map(|r| r.m_rel_l2)),
            mean_v_rel_l2: mean_of(records.iter().map(|r| r.v_rel_l2)),
            mean_v_inv_sqrt_rel_l2: mean_of(records.iter().map(|r| r.v_inv_sqrt_rel_l2)),
            mean_v_zero_fraction: mean_of(records.iter().map(|r| r.v_zero_fraction)),
            state_bytes,
            state_bytes_fp32,
            compression_ratio: (state_bytes_fp32 > 0)
                .then(|| state_bytes as f64 / state_bytes_fp32 as f64),
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    } else {
        None
    };

    Ok(RunOutput {
        records,
        summary,
        aborted_at,
    })
}

fn push_opt(line: &mut String, v: Option<f64>) {
    if let Some(x) = v {
        let _ = write!(line, ",{x}");
    } else {
        line.push(',');
    }
}

/// Fixed-column CSV for run records. Wall time is excluded so output is a
/// pure function of (config, seed); it lives in the summary instead.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(
        "step,loss,grad_norm,m_rel_l2,m_max_abs,m_zero_fraction,v_rel_l2,v_max_abs,v_zero_fraction,v_inv_sqrt_rel_l2,bin_change_ratio\n",
    );
    for r in records {
        let mut line = format!("{},{},{}", r.step, r.loss, r.grad_norm);
        for v in [
            r.m_rel_l2,
            r.m_max_abs,
            r.m_zero_fraction,
            r.v_rel_l2,
            r.v_max_abs,
            r.v_zero_fraction,
            r.v_inv_sqrt_rel_l2,
            r.bin_change_ratio,
        ] {
            push_opt(&mut line, v);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// One row of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub name: String,
    pub status: String,
    pub summary: Option<RunSummary>,
}

/// Run several configs, in parallel when available; rows keep config order.
/// Invalid members are reported in their row while the rest still run.
pub fn sweep(configs: &[(String, ExperimentConfig)]) -> Result<Vec<SweepRow>> {
    if configs.is_empty() {
        return Err(Error::Config("sweep needs at least one config".into()));
    }
    let rows = crate::parallel::map_indexed(configs.len(), |i| {
        let (name, cfg) = &configs[i];
        match run(cfg) {
            Ok(out) => match out.aborted_at {
                None => SweepRow {
                    index: i,
                    name: name.clone(),
                    status: "ok".into(),
                    summary: out.summary,
                },
                Some(t) => SweepRow {
                    index: i,
                    name: name.clone(),
                    status: format!("error: non-finite loss at step {t}"),
                    summary: None,
                },
            },
            Err(e) => SweepRow {
                index: i,
                name: name.clone(),
                status: format!("error: {e}"),
                summary: None,
            },
        }
    });
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "index,name,optimizer,problem,steps,seed,status,final_loss,mean_m_rel_l2,mean_v_rel_l2,mean_v_inv_sqrt_rel_l2,mean_v_zero_fraction,state_bytes,state_bytes_fp32,compression_ratio\n",
    );
    for r in rows {
        match &r.summary {
            Some(s) => {
                let mut line = format!(
                    "{},{},{},{},{},{},{},{}",
                    r.index, r.name, s.optimizer, s.problem, s.steps, s.seed, r.status, s.final_loss
                );
                for v in [
                    s.mean_m_rel_l2,
                    s.mean_v_rel_l2,
                    s.mean_v_inv_sqrt_rel_l2,
                    s.mean_v_zero_fraction,
                ] {
                    push_opt(&mut line, v);
                }
                let _ = write!(
                    line,
                    ",{},{},{}",
                    s.state_bytes,
                    s.state_bytes_fp32,
                    s.compression_ratio.map_or(String::new(), |x| x.to_string())
                );
                out.push_str(&line);
            }
            None => {
                let _ = write!(
                    out,
                    "{},{},,,,,{},,,,,,,,",
                    r.index,
                    r.name,
                    r.status.replace(',', ";")
                );
            }
        }
        out.push('\n');
    }
    out
}

/// Result of replicated bound checks on the quadratic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundCheckReport {
    pub bound: f64,
    pub runs: usize,
    pub within_bound: usize,
    pub fraction_within: f64,
    pub mean_suboptimality: f64,
    pub max_suboptimality: f64,
    pub sigma: f64,
    pub sigma_m: f64,
    pub step_size: f64,
    pub pass: bool,
}

/// Run seeded replications of momentum-quantized SGDM on a quadratic and
/// compare the suboptimality of the averaged iterate against the
/// convergence bound. Passes when at least 95% of runs respect the bound.
pub fn bound_check(cfg: &BoundCheckConfig, runs: usize) -> Result<BoundCheckReport> {
    cfg.validate()?;
    if runs == 0 {
        return Err(Error::Config("bound check needs at least one run".into()));
    }
    let alpha = cfg.step_size();
    let quantizer = cfg.momentum_quantizer();
    let sigma_m = quantizer.variance_bound_sigma(cfg.d);
    let base = crate::problems::quadratic(
        cfg.d,
        cfg.condition_number,
        crate::rng::splitmix64(cfg.seed ^ 0x626f756e64),
        cfg.noise_sigma,
    );
    let dist0 = base.distance_from_start();
    let bound = crate::optim::theorem1_bound(
        cfg.condition_number,
        cfg.momentum,
        alpha,
        cfg.steps,
        dist0,
        cfg.noise_sigma,
        sigma_m,
    )?;

    let subopts = crate::parallel::map_indexed(runs, |i| {
        simulate_bound_run(cfg, &base, alpha, &quantizer, i as u64)
    });
    let within = subopts.iter().filter(|&&s| s <= bound).count();
    let mean = subopts.iter().sum::<f64>() / runs as f64;
    let max = subopts.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let fraction = within as f64 / runs as f64;
    Ok(BoundCheckReport {
        bound,
        runs,
        within_bound: within,
        fraction_within: fraction,
        mean_suboptimality: mean,
        max_suboptimality: max,
        sigma: cfg.noise_sigma,
        sigma_m,
        step_size: alpha,
        pass: fraction >= 0.95,
    })
}

fn simulate_bound_run(
    cfg: &BoundCheckConfig,
    base: &crate::problems::Quadratic,
    alpha: f64,
    quantizer: &crate::optim::FixedStepQuantizer,
    run_idx: u64,
) -> f64 {
    use crate::optim::{sgdm_step, Compressor, SgdmConfig};
    // same geometry, fresh noise stream per replication
    let problem = base.clone().with_noise_seed(crate::rng::splitmix64(cfg.seed ^ run_idx));
    let mut params = problem.initial_params();
    let sgdm_cfg = SgdmConfig {
        lr: alpha,
        momentum: cfg.momentum,
    };
    let comp = Compressor::FixedStep(*quantizer);
    let key = StreamKey::new(cfg.seed).with(run_idx).with_name("theta");
    let mut state = crate::optim::SgdmState::default();
    let mut avg = vec![0.0f64; cfg.d];
    for t in 1..=cfg.steps {
        for (a, w) in avg.iter_mut().zip(params[0].1.data()) {
            *a += w;
        }
        let g = problem.stochastic_grad(&params, t);
        sgdm_step(&mut params[0].1, &mut state, &g[0], &sgdm_cfg, &comp, key, false)
            .expect("bound-check step");
    }
    for a in avg.iter_mut() {
        *a /= cfg.steps as f64;
    }
    let avg_params = vec![("theta".to_string(), Tensor::from_vec(avg))];
    problem.loss(&avg_params)
}

/// One row of checkpoint analysis: a stored tensor requantized under a
/// scheme, with its reconstruction errors.
#[derive(Debug, Clone)]
pub struct AnalyzeRow {
    pub tensor_name: String,
    pub scheme: String,
    pub map: String,
    pub bits: u8,
    pub rel_l2: Option<f64>,
    pub max_abs: f64,
    pub zero_fraction: f64,
}

/// Apply each scheme to every tensor stored in a checkpoint. Sign handling
/// follows the data: tensors with negative entries get signed maps.
pub fn quantize_analyze(path: &std::path::Path, schemes: &[String]) -> Result<Vec<AnalyzeRow>> {
    if schemes.is_empty() {
        return Err(Error::Config("need at least one scheme to analyze".into()));
    }
    let entries = load_checkpoint(path)?;
    let mut rows = Vec::new();
    for (name, entry) in &entries {
        let x = entry.to_tensor()?;
        if x.numel() == 0 {
            continue;
        }
        let signed = x.data().iter().any(|&v| v < 0.0);
        for scheme in schemes {
            let spec = parse_scheme(scheme, signed, 4)?;
            let packed = quantize(&x, &spec, StreamKey::new(0).with_name(name))?;
            let back = dequantize(&packed)?;
            let report = relative_error(&x, &back)?;
            rows.push(AnalyzeRow {
                tensor_name: name.clone(),
                scheme: crate::quantizer::scheme_name(&spec.scheme),
                map: crate::quantizer::map_name(&spec.map).to_string(),
                bits: spec.map.bitwidth(),
                rel_l2: report.rel_l2,
                max_abs: report.max_abs,
                zero_fraction: report.zero_fraction,
            });
        }
    }
    Ok(rows)
}

pub fn analyze_to_csv(rows: &[AnalyzeRow]) -> String {
    let mut out = String::from("tensor_name,scheme,map,bits,rel_l2,max_abs,zero_fraction\n");
    for r in rows {
        let mut line = format!("{},{},{},{}", r.tensor_name, r.scheme, r.map, r.bits);
        push_opt(&mut line, r.rel_l2);
        let _ = write!(line, ",{},{}", r.max_abs, r.zero_fraction);
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(optimizer: &str) -> ExperimentConfig {
        let v: serde_json::Value = serde_json::from_str(&format!(
            r#"{{
                "problem": {{"kind": "logreg", "n_samples": 60, "d": 8}},
                "optimizer": "{optimizer}",
                "adamw": {{"lr": 0.05, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}},
                "steps": 40,
                "seed": 11,
                "quantize_threshold": 0
            }}"#
        ))
        .unwrap();
        ExperimentConfig::from_value(v).unwrap()
    }

    #[test]
    fn repeated_runs_emit_identical_csv() {
        let cfg = quick_config("adamw4");
        let a = records_to_csv(&run(&cfg).unwrap().records);
        let b = records_to_csv(&run(&cfg).unwrap().records);
        assert_eq!(a, b);
        assert!(!a.contains("wall"));
    }

    #[test]
    fn identity_and_reference_runs_share_loss_columns() {
        let mut quantized = quick_config("adamw4");
        // a threshold nothing crosses disables compression entirely
        quantized.quantize_threshold = usize::MAX;
        let reference = quick_config("adamw32");
        let a = run(&quantized).unwrap();
        let b = run(&reference).unwrap();
        let losses = |o: &RunOutput| o.records.iter().map(|r| r.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn quantized_run_reports_state_errors_and_compression() {
        let cfg = quick_config("adamw4");
        let out = run(&cfg).unwrap();
        let summary = out.summary.unwrap();
        assert!(summary.mean_m_rel_l2.unwrap() > 0.0);
        assert!(summary.mean_v_rel_l2.unwrap() > 0.0);
        assert!(summary.state_bytes < summary.state_bytes_fp32);
    }

    #[test]
    fn sweep_keeps_order_and_survives_bad_members() {
        let good = quick_config("adamw4");
        let mut bad = quick_config("adamw4");
        bad.optimizer = "bogus".into();
        let rows = sweep(&[
            ("good".into(), good.clone()),
            ("bad".into(), bad),
            ("good2".into(), good),
        ])
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("error"));
        assert_eq!(rows[2].status, "ok");
        let csv_a = sweep_to_csv(&rows);
        let rows_b = sweep(&[
            ("good".into(), quick_config("adamw4")),
            (
                "bad".into(),
                { let mut b = quick_config("adamw4"); b.optimizer = "bogus".into(); b },
            ),
            ("good2".into(), quick_config("adamw4")),
        ])
        .unwrap();
        assert_eq!(csv_a, sweep_to_csv(&rows_b));
    }

    #[test]
    fn noiseless_identity_bound_check_has_wide_margin() {
        let cfg = BoundCheckConfig {
            d: 6,
            condition_number: 5.0,
            noise_sigma: 0.0,
            momentum: 0.0,
            lr: None,
            steps: 400,
            seed: 3,
            momentum_delta: 1e-9,
        };
        let report = bound_check(&cfg, 5).unwrap();
        assert!(report.pass);
        assert_eq!(report.within_bound, 5);
        assert!(report.max_suboptimality < report.bound / 2.0);
    }
}
