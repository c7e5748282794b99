//! `sia` command-line front end: conversion, simulation, kernel sweeps,
//! report regeneration and synthetic data.
//!
//! Exit status is 0 on success, 1 for I/O failures, 2 for invalid input or
//! flags, and 3 when `--strict` is set and a simulator invariant fails.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use sia_core::convert::{convert_network, ConvertError, ConvertOptions, LayerReport};
use sia_core::metrics::{
    accuracy_curve_parallel, accuracy_dat, kernel_sweep, latency_csv, latency_json, latency_table,
    spike_rate_profile, sweep_csv, AccuracyPoint, LabeledInput, LatencyRow, MetricsError,
    RunReport, SweepRow, SWEEP_KERNELS,
};
use sia_core::model_io::{
    decode_input, encode_input, load_ann, load_network, load_spikes, save_ann, save_network,
    save_spikes, spikes_path, ModelIoError,
};
use sia_core::network::FracBits;
use sia_core::sim::{run_network, CycleModel, SiaConfig, SimError, TransferModel};
use sia_core::snn::{LeakShift, NeuronMode};
use sia_core::synth::{labeled_dataset, margin_dataset, toy_ann, ToyNetSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        match e {
            ModelIoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ConvertError> for CliError {
    fn from(e: ConvertError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sia",
    version,
    about = "Spiking-network conversion and accelerator simulation"
)]
pub struct Cli {
    /// Directory for every file a command writes.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Treat a violated simulator invariant as fatal (exit status 3).
    #[arg(long, global = true)]
    pub strict: bool,
    /// Worker threads for batch evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a float ANN bundle into a spiking network.
    Convert(ConvertArgs),
    /// Simulate a converted network on a spike input file.
    Run(RunArgs),
    /// Latency sweep of a 3 -> 64 channel conv layer on 32x32 over kernel sizes.
    Bench(BenchArgs),
    /// Regenerate latency and spike-rate tables from a saved report.
    Report(ReportArgs),
    /// Write a seeded toy ANN bundle and one labeled spike input.
    Synth(SynthArgs),
    /// Accuracy against timesteps of a seeded toy network on synthetic data.
    Accuracy(AccuracyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    If,
    Lif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CycleModelArg {
    RowParallel,
    ColumnSerial,
}

impl From<CycleModelArg> for CycleModel {
    fn from(m: CycleModelArg) -> Self {
        match m {
            CycleModelArg::RowParallel => CycleModel::RowParallel,
            CycleModelArg::ColumnSerial => CycleModel::ColumnSerial,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct NeuronArgs {
    /// Neuron model; overrides what the network file stores.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// LIF leak `u >> k`; only meaningful with `--mode lif`.
    #[arg(long, default_value_t = 4)]
    pub leak_shift: u32,
}

impl NeuronArgs {
    fn mode(&self) -> Result<Option<NeuronMode>, CliError> {
        match self.mode {
            None => Ok(None),
            Some(ModeArg::If) => Ok(Some(NeuronMode::If)),
            Some(ModeArg::Lif) => {
                let leak_shift = LeakShift::new(self.leak_shift)
                    .map_err(|e| CliError::Invalid(e.to_string()))?;
                Ok(Some(NeuronMode::Lif { leak_shift }))
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Accelerator clock in Hz.
    #[arg(long, default_value_t = 100_000_000)]
    pub clock: u64,
    /// Leave host transfer cycles out of the ledger.
    #[arg(long)]
    pub no_transfer: bool,
    /// Hide aggregation behind the next channel's PE work.
    #[arg(long)]
    pub overlap: bool,
    #[arg(long, value_enum, default_value = "row-parallel")]
    pub cycle_model: CycleModelArg,
    #[command(flatten)]
    pub neuron: NeuronArgs,
}

impl SimArgs {
    pub fn config(&self) -> Result<SiaConfig, CliError> {
        let cfg = SiaConfig {
            clock_hz: self.clock,
            mode: self.neuron.mode()?,
            cycle_model: self.cycle_model.into(),
            transfer: TransferModel {
                enabled: !self.no_transfer,
                ..TransferModel::default()
            },
            overlap_aggregation: self.overlap,
            ..SiaConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// ANN bundle (`<name>`, `<name>.manifest.json` or `<name>.weights.bin`).
    pub ann: PathBuf,
    /// Output stem inside `--out-dir`.
    #[arg(long, default_value = "net")]
    pub out: String,
    /// Timesteps recorded in the network file.
    #[arg(long = "T", default_value_t = 8)]
    pub timesteps: u32,
    #[arg(long, default_value_t = 8)]
    pub frac_g: u8,
    #[arg(long, default_value_t = 8)]
    pub frac_h: u8,
    #[command(flatten)]
    pub neuron: NeuronArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Converted network.
    pub net: PathBuf,
    /// Spike input file.
    pub spikes: PathBuf,
    /// Use only the first T frames of the input.
    #[arg(long = "T")]
    pub timesteps: Option<usize>,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Kernel sizes, comma separated; each must be 3, 5, 7 or 11.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_KERNELS)]
    pub k: Vec<usize>,
    #[arg(long = "T", default_value_t = 1)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `report.json` written by `run`.
    pub report: PathBuf,
    /// Clock for the latency table; defaults to the report's own clock.
    #[arg(long)]
    pub clock: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames in the spike input.
    #[arg(long = "T", default_value_t = 16)]
    pub timesteps: usize,
    /// Minimum lead, in output levels, of the input's true class.
    #[arg(long, default_value_t = 8.0)]
    pub margin: f64,
    /// Output stem inside `--out-dir`.
    #[arg(long, default_value = "toy")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct AccuracyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long = "T-values", value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub t_values: Vec<usize>,
    /// Keep only inputs whose true class leads by this many output levels.
    #[arg(long)]
    pub margin: Option<f64>,
    #[command(flatten)]
    pub sim: SimArgs,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvertOutcome {
    pub manifest: PathBuf,
    pub layers: Vec<LayerReport>,
}

pub fn cmd_convert(args: &ConvertArgs, out_dir: &Path) -> Result<ConvertOutcome, CliError> {
    let model = load_ann(&args.ann)?;
    let options = ConvertOptions {
        timesteps: args.timesteps,
        frac: FracBits {
            g: args.frac_g,
            h: args.frac_h,
        },
        mode: args.neuron.mode()?.unwrap_or_default(),
        ..ConvertOptions::default()
    };
    let conversion = convert_network(&model, &options)?;
    ensure_dir(out_dir)?;
    let paths = save_network(&out_dir.join(&args.out), &conversion.network)?;
    write(out_dir, "convert_report.json", &to_json(&conversion.report))?;
    Ok(ConvertOutcome {
        manifest: paths.manifest,
        layers: conversion.report,
    })
}

pub fn cmd_run(args: &RunArgs, out_dir: &Path, strict: bool) -> Result<RunReport, CliError> {
    let cfg = args.sim.config()?;
    let net = load_network(&args.net)?;
    let mut frames = decode_input(&load_spikes(&args.spikes)?)?;
    if let Some(t) = args.timesteps {
        if t == 0 || t > frames.len() {
            return Err(CliError::Invalid(format!(
                "--T {t} is outside 1..={} (frames in {})",
                frames.len(),
                args.spikes.display()
            )));
        }
        frames.truncate(t);
    }
    let run = run_network(&net, &frames, &cfg)?;
    let report = RunReport::from_run(&run, &cfg);
    ensure_dir(out_dir)?;
    write(out_dir, "report.json", &report.to_json())?;
    write(out_dir, "report.csv", &report.to_csv()?)?;
    let rows = latency_table(&report, cfg.clock_hz);
    write(out_dir, "latency.csv", &latency_csv(&rows)?)?;
    write(out_dir, "latency.json", &latency_json(&rows))?;
    write(
        out_dir,
        "spike_rates.dat",
        &spike_rate_profile(&report).to_dat(),
    )?;
    check_invariants(&report, strict)?;
    Ok(report)
}

fn check_invariants(report: &RunReport, strict: bool) -> Result<(), CliError> {
    let inv = report.invariants;
    if inv.hold() {
        return Ok(());
    }
    let msg = format!(
        "{} bank conflicts, {} membrane continuity mismatches, {} ledger mismatches",
        inv.bank_conflicts, inv.continuity_mismatches, inv.ledger_mismatches
    );
    if strict {
        Err(CliError::Invariant(msg))
    } else {
        warn!("{msg}");
        Ok(())
    }
}

pub fn cmd_bench(args: &BenchArgs, out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    for &k in &args.k {
        if !SWEEP_KERNELS.contains(&k) {
            return Err(CliError::Invalid(format!(
                "kernel size {k} is not a reference size (3, 5, 7, 11)"
            )));
        }
    }
    let cfg = args.sim.config()?;
    let rows = kernel_sweep(&args.k, &cfg, args.seed, args.timesteps)?;
    ensure_dir(out_dir)?;
    write(out_dir, "bench.csv", &sweep_csv(&rows)?)?;
    write(out_dir, "bench.json", &to_json(&rows))?;
    Ok(rows)
}

pub fn cmd_report(args: &ReportArgs, out_dir: &Path) -> Result<Vec<LatencyRow>, CliError> {
    let text = fs::read_to_string(&args.report)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.report.display())))?;
    let report: RunReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", args.report.display())))?;
    let clock = args.clock.unwrap_or(report.clock_hz);
    if clock == 0 {
        return Err(CliError::Invalid("clock must be nonzero".into()));
    }
    let rows = latency_table(&report, clock);
    ensure_dir(out_dir)?;
    write(out_dir, "latency.csv", &latency_csv(&rows)?)?;
    write(out_dir, "latency.json", &latency_json(&rows))?;
    write(
        out_dir,
        "spike_rates.dat",
        &spike_rate_profile(&report).to_dat(),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOutcome {
    pub seed: u64,
    pub timesteps: usize,
    pub label: usize,
    pub ann: PathBuf,
    pub spikes: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs, out_dir: &Path) -> Result<SynthOutcome, CliError> {
    if args.timesteps == 0 {
        return Err(CliError::Invalid("--T must be at least 1".into()));
    }
    let spec = ToyNetSpec {
        seed: args.seed,
        ..ToyNetSpec::default()
    };
    let ann = toy_ann(&spec);
    let input = margin_dataset(&ann, 1, args.margin, args.timesteps, args.seed)
        .pop()
        .ok_or_else(|| {
            CliError::Invalid(format!(
                "no input reaches a margin of {} levels",
                args.margin
            ))
        })?;
    ensure_dir(out_dir)?;
    let stem = out_dir.join(&args.name);
    let paths = save_ann(&stem, &ann)?;
    let spikes = save_spikes(&spikes_path(&stem), &encode_input(&input.frames)?)?;
    let outcome = SynthOutcome {
        seed: args.seed,
        timesteps: args.timesteps,
        label: input.label,
        ann: paths.manifest,
        spikes,
    };
    write(
        out_dir,
        &format!("{}.synth.json", args.name),
        &to_json(&outcome),
    )?;
    Ok(outcome)
}

pub fn cmd_accuracy(
    args: &AccuracyArgs,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<AccuracyPoint>, CliError> {
    let cfg = args.sim.config()?;
    let max_t = args.t_values.iter().copied().max().unwrap_or(0);
    if max_t == 0 {
        return Err(CliError::Invalid("--T-values must be at least 1".into()));
    }
    let ann = toy_ann(&ToyNetSpec {
        seed: args.seed,
        ..ToyNetSpec::default()
    });
    let net = convert_network(&ann, &ConvertOptions::default())?.network;
    let data: Vec<LabeledInput> = match args.margin {
        Some(m) => margin_dataset(&ann, args.samples, m, max_t, args.seed),
        None => labeled_dataset(&ann, args.samples, max_t, args.seed)
            .into_iter()
            .map(|(_, d)| d)
            .collect(),
    };
    info!("{} inputs, T up to {max_t}", data.len());
    let points = accuracy_curve_parallel(&net, &data, &args.t_values, &cfg, jobs)?;
    ensure_dir(out_dir)?;
    write(out_dir, "accuracy.dat", &accuracy_dat(&points))?;
    write(out_dir, "accuracy.json", &to_json(&points))?;
    Ok(points)
}

/// Executes a parsed command line, prints its summary and returns the
/// process exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Convert(args) => {
            let o = cmd_convert(args, out)?;
            println!(
                "{:<12} {:<14} {:>8} {:>6} {:>10}",
                "layer", "kind", "sat %", "theta", "clipped"
            );
            for l in &o.layers {
                println!(
                    "{:<12} {:<14} {:>8.3} {:>6} {:>10}",
                    l.name,
                    l.kind,
                    l.weight_saturation * 100.0,
                    l.threshold,
                    l.clipped_g + l.clipped_h + l.clipped_bias
                );
            }
            println!("wrote {}", o.manifest.display());
        }
        Command::Run(args) => {
            let r = cmd_run(args, out, cli.strict)?;
            println!(
                "{:<12} {:>12} {:>10} {:>10}",
                "layer", "cycles", "ms", "rate"
            );
            for l in &r.layers {
                println!(
                    "{:<12} {:>12} {:>10.3} {:>10.4}",
                    l.name,
                    l.cycles,
                    l.latency_s * 1e3,
                    l.spike_rate
                );
            }
            println!(
                "total {} cycles, {:.3} ms, {:.3} GOPS effective of {:.1} peak",
                r.totals.cycles,
                r.totals.latency_s * 1e3,
                r.totals.effective_gops,
                r.totals.peak_gops
            );
            match r.predicted_class {
                Some(c) => println!("class {c} (counts {:?})", r.output_counts),
                None => println!("no output neurons"),
            }
        }
        Command::Bench(args) => {
            let rows = cmd_bench(args, out)?;
            println!("{:<8} {:>12} {:>10}", "kernel", "cycles", "ms");
            for r in &rows {
                println!(
                    "{:<8} {:>12} {:>10.3}",
                    format!("{0}x{0}", r.kernel),
                    r.cycles,
                    r.latency_ms
                );
            }
        }
        Command::Report(args) => {
            for r in cmd_report(args, out)? {
                println!(
                    "{:<12} {:<12} {:>12} {:>10.3}",
                    r.layer, r.output_size, r.cycles, r.latency_ms
                );
            }
        }
        Command::Synth(args) => {
            let o = cmd_synth(args, out)?;
            println!(
                "wrote {} and {} (label {})",
                o.ann.display(),
                o.spikes.display(),
                o.label
            );
        }
        Command::Accuracy(args) => {
            for p in cmd_accuracy(args, out, cli.jobs)? {
                println!(
                    "T={:<4} {}/{} {:.4}",
                    p.timesteps, p.correct, p.total, p.accuracy
                );
            }
        }
    }
    Ok(())
}
