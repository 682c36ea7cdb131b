//! Command-line driver. Exit codes: 0 when every verdict passes, 1 when any
//! fails, 2 on configuration or runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::pipeline::{self, RunOptions};
use crate::report::Report;
use crate::scenario::Scenario;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "normal-shift",
    version,
    about = "Normal-shift dynamics: residual checks, hypersurface shifts, blow-ups and metrizability"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and dimension-check a scenario without running it.
    Validate(Common),
    /// Normality residuals at seeded sample points.
    Check(Common),
    /// Normal shift of the scenario's hypersurface.
    Shift(Common),
    /// Normal blow-up of a point.
    Blowup(Common),
    /// Trajectory inheritance against a deformed connection.
    Metrizability(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the scenario's `output` key, then `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the tolerance of the action's main verdict.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Overrides the number of sample points.
    #[arg(long)]
    samples: Option<usize>,
}

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    let (action, common) = match &cli.command {
        Command::Validate(c) => ("validate", c),
        Command::Check(c) => ("check", c),
        Command::Shift(c) => ("shift", c),
        Command::Blowup(c) => ("blowup", c),
        Command::Metrizability(c) => ("metrizability", c),
    };
    let scenario = match Scenario::from_path(&common.config) {
        Ok(s) => s,
        Err(diags) => {
            let _ = writeln!(err, "{}: {} problem(s)", common.config.display(), diags.0.len());
            let _ = write!(err, "{diags}");
            return EXIT_ERROR;
        }
    };
    if action == "validate" {
        let _ = write!(out, "{}", describe(&scenario));
        return EXIT_PASS;
    }
    let opts = RunOptions { seed: common.seed, tolerance: common.tolerance, samples: common.samples, threads: None };
    let result = match action {
        "check" => pipeline::check(&scenario, &opts),
        "shift" => pipeline::shift(&scenario, &opts),
        "blowup" => pipeline::blowup(&scenario, &opts),
        _ => pipeline::metrizability(&scenario, &opts),
    };
    let report: Report = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return EXIT_ERROR;
        }
    };
    let dir = common
        .out
        .clone()
        .or_else(|| scenario.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name));
    if let Err(e) = report.write(&dir) {
        let _ = writeln!(err, "error: writing {}: {e}", dir.display());
        return EXIT_ERROR;
    }
    let _ = write!(out, "{}", report.summary());
    let _ = writeln!(out, "artifacts: {}", dir.display());
    if report.pass() {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

/// Listing printed by `validate`: blocks present and every expression with
/// the variables it may use.
pub fn describe(s: &Scenario) -> String {
    let mut lines = vec![
        format!("scenario {} (dim {}, seed {})", s.name, s.dim, s.seed),
        format!("metric: {:?}", kind_name(s)),
        format!("force: {}", s.force.kind),
        format!(
            "integrator: {:?}, {} output times up to t = {}",
            s.integrator.method,
            s.t_grid.len(),
            s.t_grid.last().unwrap_or(&0.0)
        ),
    ];
    let blocks: Vec<&str> = [
        Some("check"),
        s.shift.as_ref().map(|_| "shift"),
        s.blowup.as_ref().map(|_| "blowup"),
        s.metrizability.as_ref().map(|_| "metrizability"),
    ]
    .into_iter()
    .flatten()
    .collect();
    lines.push(format!("actions: {}", blocks.join(", ")));
    lines.push("fields:".into());
    for d in &s.declared {
        lines.push(format!("  {} = {:?}  [{}]", d.field, d.source, d.vars.join(", ")));
    }
    lines.push("diagnostics: none".into());
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

fn kind_name(s: &Scenario) -> &'static str {
    match s.metric.kind() {
        normal_shift_core::geometry::MetricKind::Flat => "flat",
        normal_shift_core::geometry::MetricKind::Conformal { .. } => "conformal",
        normal_shift_core::geometry::MetricKind::General => "general",
    }
}
