//! `sparsepm`: simulate, bounds and verify subcommands.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sparsepm::bounds::bounds_report;
use sparsepm::codec::CodecConfig;
use sparsepm::montecarlo::{aggregate, run_trials};
use sparsepm::verify::run_all;

use config::{Command, ListValue, RawConfig, RunConfig};
use output::{BoundsRow, SimulateRow, Sink};

#[derive(Debug, Parser)]
#[command(name = "sparsepm", version, about = "Posterior matching over the BSC with sparse feedback")]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Monte Carlo sweep over K and channel; one CSV row per point.
    Simulate,
    /// Closed-form bounds; one CSV row per (K, channel).
    Bounds,
    /// Numerical checks of the drift and partition inequalities.
    Verify,
}

#[derive(Debug, Args)]
struct Flags {
    /// TOML file with RunConfig keys; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Message lengths, e.g. `16,32` or `1..512`.
    #[arg(long = "K", global = true, value_name = "LIST")]
    k: Option<String>,
    /// Crossover probabilities.
    #[arg(long, global = true, value_name = "LIST", conflicts_with = "capacity")]
    p: Option<String>,
    /// Target capacities, each resolved to a crossover probability.
    #[arg(long, global = true, value_name = "LIST", visible_alias = "C")]
    capacity: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    trials: Option<u64>,
    #[arg(long, global = true, visible_alias = "master-seed")]
    seed: Option<u64>,
    /// Largest block length, 1 to 24.
    #[arg(long, global = true)]
    dmax: Option<u32>,
    /// sed, sead or wmad-lookahead.
    #[arg(long, global = true)]
    rule: Option<String>,
    /// dense or sparse.
    #[arg(long, global = true)]
    feedback: Option<String>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Corrupt planner output so that `verify` must fail.
    #[arg(long, global = true, hide = true)]
    inject_fault: bool,
}

impl Flags {
    fn raw(&self, command: Option<&Cmd>) -> RawConfig {
        RawConfig {
            command: command.map(|c| match c {
                Cmd::Simulate => "simulate".to_string(),
                Cmd::Bounds => "bounds".to_string(),
                Cmd::Verify => "verify".to_string(),
            }),
            k: self.k.clone().map(ListValue::Text),
            p: self.p.clone().map(ListValue::Text),
            c: self.capacity.clone().map(ListValue::Text),
            epsilon: self.epsilon,
            trials: self.trials,
            master_seed: self.seed,
            dmax: self.dmax,
            rule: self.rule.clone(),
            feedback_mode: self.feedback.clone(),
            output_path: self.output.clone(),
            threads: self.threads,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when every step ran but a verification check failed.
fn run(cli: &Cli) -> Result<bool> {
    let file = match &cli.flags.config {
        Some(path) => RawConfig::from_file(path)?,
        None => RawConfig::default(),
    };
    let cfg = RunConfig::resolve(file.overlay(cli.flags.raw(cli.command.as_ref())))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| match cfg.command {
        Command::Simulate => simulate(&cfg).map(|_| true),
        Command::Bounds => bounds(&cfg).map(|_| true),
        Command::Verify => verify(&cfg, cli.flags.inject_fault),
    })
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let mut sink = Sink::open(cfg.output_path.as_deref())?;
    sink.header(SimulateRow::HEADER)?;
    for &k in &cfg.k {
        for point in &cfg.channels {
            let codec = CodecConfig { k, channel: point.channel, epsilon: cfg.epsilon, dmax: cfg.dmax, rule: cfg.rule, feedback: cfg.feedback_mode };
            let records = run_trials(&codec, cfg.trials, cfg.master_seed).with_context(|| format!("K = {k}, p = {}", point.p))?;
            let stats = aggregate(k, &records);
            let bounds = bounds_report(k, &point.channel, cfg.epsilon);
            sink.row(&SimulateRow { k, point, cfg, stats: &stats, bounds: &bounds }.fields())?;
        }
    }
    sink.finish()
}

fn bounds(cfg: &RunConfig) -> Result<()> {
    let mut sink = Sink::open(cfg.output_path.as_deref())?;
    sink.header(BoundsRow::HEADER)?;
    for &k in &cfg.k {
        for point in &cfg.channels {
            let report = bounds_report(k, &point.channel, cfg.epsilon);
            sink.row(&BoundsRow { k, point, epsilon: cfg.epsilon, report: &report }.fields())?;
        }
    }
    sink.finish()
}

fn verify(cfg: &RunConfig, inject_fault: bool) -> Result<bool> {
    let outcomes = run_all(cfg.trials, cfg.master_seed, inject_fault);
    println!("{:<28} {:>10} {:>14} {:>10}  result", "check", "instances", "worst", "tolerance");
    for o in &outcomes {
        let bound = format!("{}{:e}", if o.lower { ">=" } else { "<=" }, o.tolerance);
        let result = if o.passed() { "pass" } else { "FAIL" };
        println!("{:<28} {:>10} {:>14.6e} {:>10}  {result}", o.name, o.instances, o.worst, bound);
    }
    if let Some(path) = &cfg.output_path {
        let mut sink = Sink::open(Some(path))?;
        sink.header(&["check", "instances", "worst", "tolerance", "bound", "passed"])?;
        for o in &outcomes {
            let bound = if o.lower { "lower" } else { "upper" };
            sink.row(&[o.name.to_string(), o.instances.to_string(), o.worst.to_string(), o.tolerance.to_string(), bound.into(), o.passed().to_string()])?;
        }
        sink.finish()?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", outcomes.len());
    }
    Ok(failed == 0)
}
