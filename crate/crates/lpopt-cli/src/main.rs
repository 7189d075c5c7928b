//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on numerical
//! failures (diverged runs, bound violations).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lpopt::error::Error;
use lpopt::harness::{
    self, analyze_to_csv, apply_override, load_json, records_to_csv, sweep_to_csv,
    BoundCheckConfig, ExperimentConfig, SweepRow,
};

#[derive(Parser)]
#[command(name = "lpopt", about = "Low-precision optimizer state experiments")]
struct Cli {
    /// Force sequential execution even in parallel builds.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and emit per-step CSV plus a JSON summary.
    Run(RunArgs),
    /// Run every config of a directory or comma-separated list; emit one
    /// summary row per config.
    Sweep(SweepArgs),
    /// Replicate momentum-quantized SGDM on a quadratic and compare the
    /// averaged-iterate suboptimality against the convergence bound.
    BoundCheck(BoundCheckArgs),
    /// Requantize every tensor of a checkpoint under the given schemes and
    /// report reconstruction errors.
    QuantizeAnalyze(AnalyzeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-step records to this CSV file (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Additional dotted-key overrides, e.g. --set steps=100 --set sgdm.lr=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of *.json configs or a comma-separated list of files.
    #[arg(long)]
    configs: String,
    /// Write the combined CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundCheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeded replications.
    #[arg(long, default_value_t = 100)]
    runs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint file to analyze.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated scheme list, e.g. b128/de,b128/de0,rank1/linear
    #[arg(long)]
    schemes: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        lpopt::parallel::set_sequential(true);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::BoundCheck(args) => cmd_bound_check(args),
        Command::QuantizeAnalyze(args) => cmd_analyze(args),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Error> {
    let mut value = load_json(&args.config)?;
    for set in &args.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {set:?}")))?;
        apply_override(&mut value, key, raw)?;
    }
    if let Some(seed) = args.seed {
        apply_override(&mut value, "seed", &seed.to_string())?;
    }
    let mut cfg = ExperimentConfig::from_value(value)?;
    if let Some(out) = args.out {
        cfg.out = Some(out);
    }
    let result = harness::run(&cfg)?;
    let csv = records_to_csv(&result.records);
    write_or_print(&cfg.out, &csv)?;
    if let Some(step) = result.aborted_at {
        eprintln!("run aborted: non-finite loss at step {step}");
        return Ok(ExitCode::from(2));
    }
    let summary = result.summary.expect("finished runs carry a summary");
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(ExitCode::SUCCESS)
}

fn config_files(spec: &str) -> Result<Vec<PathBuf>, Error> {
    let path = Path::new(spec);
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        entries.sort();
        entries
    } else {
        spec.split(',').map(PathBuf::from).collect()
    };
    if files.is_empty() {
        return Err(Error::Config(format!("no configs found in {spec:?}")));
    }
    Ok(files)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, Error> {
    let files = config_files(&args.configs)?;
    // unparseable members become error rows; the rest still runs
    let mut parse_failures: Vec<SweepRow> = Vec::new();
    let mut runnable: Vec<(usize, String, ExperimentConfig)> = Vec::new();
    for (index, file) in files.iter().enumerate() {
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        match ExperimentConfig::from_path(file) {
            Ok(cfg) => runnable.push((index, name, cfg)),
            Err(e) => parse_failures.push(SweepRow {
                index,
                name,
                status: format!("error: {e}"),
                summary: None,
            }),
        }
    }
    let configs: Vec<(String, ExperimentConfig)> = runnable
        .iter()
        .map(|(_, n, c)| (n.clone(), c.clone()))
        .collect();
    let mut rows: Vec<SweepRow> = if configs.is_empty() {
        Vec::new()
    } else {
        harness::sweep(&configs)?
            .into_iter()
            .map(|mut row| {
                row.index = runnable[row.index].0;
                row
            })
            .collect()
    };
    rows.extend(parse_failures);
    rows.sort_by_key(|r| r.index);
    let csv = sweep_to_csv(&rows);
    write_or_print(&args.out, &csv)?;
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    if failures > 0 {
        eprintln!("{failures} of {} sweep members failed", rows.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bound_check(args: BoundCheckArgs) -> Result<ExitCode, Error> {
    let cfg = BoundCheckConfig::from_path(&args.config)?;
    let report = harness::bound_check(&cfg, args.runs)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "bound violated: only {}/{} runs within bound",
            report.within_bound, report.runs
        );
        Ok(ExitCode::from(2))
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, Error> {
    let schemes: Vec<String> = args
        .schemes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let rows = harness::quantize_analyze(&args.input, &schemes)?;
    write_or_print(&args.out, &analyze_to_csv(&rows))?;
    Ok(ExitCode::SUCCESS)
}
