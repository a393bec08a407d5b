use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sliceout::costmodel::{co2_savings, table1_costs, Co2Inputs, Co2Mode, CostReport};
use sliceout::slicing::{Normalization, SchemeKind};
use sliceout::trainer::{self, BenchConfig, BenchModel, BenchReport, EpochMetrics, Precision, RunRecord};
use sliceout::verify::{run_suite, Suite};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Column order of metrics.csv.
pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "scheme",
    "p",
    "step_time_ms",
    "peak_activation_bytes",
    "copy_bytes",
    "multiply_ops",
    "train_loss",
    "train_acc",
    "test_acc",
];

#[derive(Debug, Parser)]
#[command(name = "sliceout", version, about = "Train and measure networks with contiguous-slice dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML experiment file.
    Train(TrainArgs),
    /// Compare step time and activation memory against standard dropout.
    Bench(BenchArgs),
    /// Run the verification suites.
    Verify(VerifyArgs),
    /// Per-layer analytic costs and CO2 savings.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "mlp")]
    pub model: BenchModel,
    #[arg(long, default_value_t = 2048)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    /// Comma-separated scheme names.
    #[arg(long, value_delimiter = ',', default_value = "standard,controlled,sliceout")]
    pub schemes: Vec<SchemeKind>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Timed steps per trial.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    #[arg(long, default_value = "flow")]
    pub normalization: Normalization,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip a normalization factor to check that the harness notices.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub scheme: SchemeKind,
    #[arg(long)]
    pub b: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub co2: Option<Co2Mode>,
    #[arg(long, default_value_t = 0.0)]
    pub speedup: f64,
    #[arg(long, default_value_t = 0.0)]
    pub memory_gain: f64,
    #[arg(long, default_value_t = 4)]
    pub pool: usize,
    #[arg(long, default_value_t = 0.05)]
    pub headroom: f64,
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.config, out).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a, out).map(|_| ()),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Cost(a) => cmd_cost(&a, out),
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    epoch: usize,
    scheme: &'a str,
    p: f64,
    step_time_ms: f64,
    peak_activation_bytes: u64,
    copy_bytes: u64,
    multiply_ops: u64,
    train_loss: f64,
    train_acc: f64,
    test_acc: f64,
}

impl<'a> From<&'a EpochMetrics> for MetricsRow<'a> {
    fn from(e: &'a EpochMetrics) -> Self {
        MetricsRow {
            epoch: e.epoch,
            scheme: &e.scheme,
            p: e.p,
            step_time_ms: e.step_time_ms,
            peak_activation_bytes: e.peak_activation_bytes,
            copy_bytes: e.copy_bytes,
            multiply_ops: e.multiply_ops,
            train_loss: e.train_loss,
            train_acc: e.train_acc,
            test_acc: e.test_acc,
        }
    }
}

pub fn write_metrics(path: &Path, record: &RunRecord) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for e in &record.epochs {
        w.serialize(MetricsRow::from(e))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    train_examples: usize,
    test_examples: usize,
    final_epoch: &'a EpochMetrics,
    epochs: &'a [EpochMetrics],
}

pub fn cmd_train(config: &Path, out: &mut dyn Write) -> CliResult<RunRecord> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let record = trainer::train(&cfg.train_config(), &data)?;
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output.display())))?;
    write_metrics(&cfg.output.join(METRICS_FILE), &record)?;
    let summary = Summary {
        config: &cfg,
        train_examples: data.train.len(),
        test_examples: data.test.len(),
        final_epoch: record.last(),
        epochs: &record.epochs,
    };
    fs::write(cfg.output.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    let last = record.last();
    write!(out, "final train_acc {:.4}", last.train_acc)?;
    if !data.test.is_empty() {
        write!(out, " test_acc {:.4}", last.test_acc)?;
    }
    writeln!(out, " ({} epochs, metrics in {})", record.epochs.len(), cfg.output.display())?;
    Ok(record)
}

pub fn bench_config(a: &BenchArgs) -> BenchConfig {
    BenchConfig {
        schemes: a.schemes.clone(),
        trials: a.trials,
        steps: a.steps,
        precision: a.precision,
        normalization: a.normalization,
        seed: a.seed,
        ..BenchConfig::new(a.model, a.width, a.batch, a.p)
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<BenchReport> {
    let report = trainer::bench_compare(&bench_config(a))?;
    writeln!(
        out,
        "{} width={} batch={} p={} trials={} (percent of standard dropout)",
        a.model_name(),
        report.width,
        report.batch,
        report.p,
        report.trials
    )?;
    writeln!(out, "{:<11}{:>10}{:>10}{:>14}{:>16}{:>12}", "scheme", "time %", "peak %", "step ms", "peak bytes", "copy bytes")?;
    for r in &report.rows {
        writeln!(
            out,
            "{:<11}{:>10.1}{:>10.1}{:>14.3}{:>16}{:>12}",
            r.scheme.to_string(),
            r.rel_time_pct,
            r.rel_peak_pct,
            r.median_step_ms,
            r.peak_activation_bytes,
            r.copy_bytes
        )?;
    }
    if let Some(path) = &a.output {
        fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(report)
}

impl BenchArgs {
    fn model_name(&self) -> &'static str {
        match self.model {
            BenchModel::Mlp => "mlp",
            BenchModel::Resblock => "resblock",
            BenchModel::Attention => "attention",
        }
    }
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = run_suite(a.suite, a.inject_fault, a.seed)?;
    for c in &report.checks {
        let tag = match c.passed {
            Some(true) => "ok  ",
            Some(false) => "FAIL",
            None => "info",
        };
        writeln!(out, "{tag} {} {}", c.name, c.detail)?;
    }
    let failed = report.failures();
    writeln!(out, "{} checks, {} failed", report.checks.len(), failed)?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} verification checks failed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    #[serde(flatten)]
    report: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    co2_mode: Option<Co2Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    co2_savings: Option<f64>,
}

pub fn cmd_cost(a: &CostArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = table1_costs(a.scheme, a.b, a.n, a.m, a.p)?;
    let savings = match a.co2 {
        Some(mode) => {
            let inputs = Co2Inputs { speedup: a.speedup, memory_gain: a.memory_gain, pool: a.pool, headroom: a.headroom };
            Some(co2_savings(mode, &inputs)?)
        }
        None => None,
    };
    if a.json {
        let o = CostOutput { report, co2_mode: a.co2, co2_savings: savings };
        writeln!(out, "{}", serde_json::to_string(&o)?)?;
        return Ok(());
    }
    let r = &report;
    writeln!(out, "scheme                  {}", r.scheme)?;
    writeln!(out, "b n m p                 {} {} {} {}", r.b, r.n, r.m, r.p)?;
    writeln!(out, "kept widths             {} {}", r.w_in, r.w_out)?;
    writeln!(out, "weight manipulation rw  {}", r.weight_manipulation_rw)?;
    writeln!(out, "extra copy elements     {}", r.extra_copy_elements)?;
    writeln!(out, "multiply ops            {}", r.multiply_ops)?;
    writeln!(out, "output activations      {}", r.activation_elements)?;
    if let (Some(mode), Some(s)) = (a.co2, savings) {
        writeln!(out, "co2 savings ({mode})  {s}")?;
    }
    Ok(())
}
