//! The `wasserquick` command line.
//!
//! Every command writes its product to `--out` (or stdout) and a short
//! human-readable summary to stderr unless `--quiet` is given. Exit codes:
//! 0 success, 1 input or configuration error, 2 infeasible problem,
//! 3 numerical failure.

pub mod samples;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::detect::{bin_edges_empirical, binned_distribution};
use crate::error::{Error, Result};
use crate::lfd::{solve_lfd, verify_weak_boundedness, LfdProblem, LfdSolution, SolverOptions};
use crate::sim::{
    calibrate_methods, compare_prepared, curve_csv, gen_stream, prepare_methods_with, ExperimentConfig, OutputFormat,
};
use crate::space::GroundMetric;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "wasserquick", version, about = "Robust quickest change detection with Wasserstein ambiguity sets")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed overriding every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output format: csv or json.
    #[arg(long, global = true)]
    pub format: Option<OutputFormat>,
    /// Suppress the summary on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the least favorable pair of two sample files.
    SolveLfd {
        pre: PathBuf,
        post: PathBuf,
        #[arg(long)]
        r1: f64,
        #[arg(long)]
        r2: f64,
        /// l1, l2 or linf.
        #[arg(long, default_value = "l1")]
        metric: GroundMetric,
    },
    /// Check a saved LFD and report the weak boundedness condition.
    Verify { lfd: PathBuf },
    /// Empirical-quantile bin edges and the binned nominal of a sample file.
    Bin {
        pre: PathBuf,
        /// Number of bins.
        #[arg(long = "L", value_name = "L")]
        bins: usize,
    },
    /// Calibrate thresholds for every configured method and target ARL.
    Calibrate,
    /// Run every method at its calibrated threshold on one scenario stream.
    Simulate {
        /// Use a saved LFD instead of solving from training samples.
        #[arg(long, value_name = "PATH")]
        lfd: Option<PathBuf>,
    },
    /// Delay versus false-alarm curves for the configured methods.
    Compare,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::Usage(_) => EXIT_INPUT,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Numerical { .. } | Error::Calibration(_) => EXIT_NUMERICAL,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

struct Output<'a> {
    path: Option<PathBuf>,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    quiet: bool,
}

impl Output<'_> {
    fn product(&mut self, text: &str) -> Result<()> {
        match &self.path {
            Some(path) => std::fs::write(path, text)
                .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display()))),
            None => self
                .stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::invalid(format!("cannot write output: {e}"))),
        }
    }

    fn note(&mut self, line: &str) {
        if !self.quiet {
            let _ = writeln!(self.stderr, "{line}");
        }
    }
}

fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let config = match (&cli.command, &cli.config) {
        (Command::Calibrate | Command::Simulate { .. } | Command::Compare, None) => {
            return Err(Error::Usage("this command needs --config".into()));
        }
        (_, Some(path)) => Some(load_config(path, cli.seed)?),
        (_, None) => None,
    };
    let io = config.as_ref().map(|c| c.io.clone()).unwrap_or_default();
    let format = cli.format.unwrap_or(io.format);
    let mut out = Output {
        path: cli.out.clone().or(io.output_path),
        stdout,
        stderr,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::SolveLfd {
            pre,
            post,
            r1,
            r2,
            metric,
        } => {
            json_only(cli.format, "solve-lfd")?;
            cmd_solve_lfd(pre, post, *r1, *r2, *metric, &mut out)
        }
        Command::Verify { lfd } => {
            json_only(cli.format, "verify")?;
            cmd_verify(lfd, &mut out)
        }
        Command::Bin { pre, bins } => cmd_bin(pre, *bins, cli.format.unwrap_or(OutputFormat::Json), &mut out),
        Command::Calibrate => cmd_calibrate(config.as_ref().expect("checked above"), format, &mut out),
        Command::Simulate { lfd } => cmd_simulate(config.as_ref().expect("checked above"), lfd.as_deref(), format, &mut out),
        Command::Compare => cmd_compare(config.as_ref().expect("checked above"), format, &mut out),
    }
}

fn json_only(format: Option<OutputFormat>, command: &str) -> Result<()> {
    match format {
        Some(OutputFormat::Csv) => Err(Error::Usage(format!("{command} writes JSON only"))),
        _ => Ok(()),
    }
}

/// Reads and validates a configuration, applying a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed {
        config.scenario.seed = seed;
        config.sim.seed = seed;
    }
    Ok(config)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn weak_boundedness_note(solution: &LfdSolution, out: &mut Output<'_>) -> Option<(f64, bool)> {
    match verify_weak_boundedness(solution) {
        Ok(report) => {
            out.note(&format!(
                "worst-case mean likelihood ratio: {} ({})",
                report.worst_case_mean_lr,
                if report.satisfied { "condition holds" } else { "condition FAILS" }
            ));
            Some((report.worst_case_mean_lr, report.satisfied))
        }
        Err(e) => {
            out.note(&format!("weak boundedness not checked: {e}"));
            None
        }
    }
}

fn cmd_solve_lfd(pre: &Path, post: &Path, r1: f64, r2: f64, metric: GroundMetric, out: &mut Output<'_>) -> Result<()> {
    let problem = LfdProblem::new(samples::read_samples(pre)?, samples::read_samples(post)?, r1, r2, metric)?;
    let solution = solve_lfd(&problem, &SolverOptions::default())?;
    out.note(&format!("objective: {}", solution.objective));
    out.note(&format!("relative gap: {:e}", solution.certificate.relative_gap));
    weak_boundedness_note(&solution, out);
    let mut text = solution.to_json();
    text.push('\n');
    out.product(&text)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct VerifyReport {
    objective: f64,
    gap: f64,
    support_size: usize,
    worst_case_mean_lr: Option<f64>,
    weakly_bounded: Option<bool>,
}

fn cmd_verify(path: &Path, out: &mut Output<'_>) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let solution = LfdSolution::from_json(&text)?;
    out.note(&format!("{}: invariants hold", path.display()));
    let wb = weak_boundedness_note(&solution, out);
    out.product(&to_json(&VerifyReport {
        objective: solution.objective,
        gap: solution.certificate.relative_gap,
        support_size: solution.support.len(),
        worst_case_mean_lr: wb.map(|w| w.0),
        weakly_bounded: wb.map(|w| w.1),
    }))
}

#[derive(Serialize)]
struct BinReport {
    edges: Vec<f64>,
    masses: Vec<f64>,
}

fn cmd_bin(pre: &Path, bins: usize, format: OutputFormat, out: &mut Output<'_>) -> Result<()> {
    if bins < 2 {
        return Err(Error::Usage(format!("--L must be at least 2, got {bins}")));
    }
    let xs = samples::read_scalars(pre)?;
    let edges = bin_edges_empirical(&xs, bins)?;
    let masses = binned_distribution(&xs, &edges);
    out.note(&format!("{} edges from {} samples", edges.len(), xs.len()));
    let text = match format {
        OutputFormat::Json => to_json(&BinReport { edges, masses }),
        OutputFormat::Csv => {
            let mut rows = vec![["bin", "lower", "upper", "mass"].map(String::from)];
            for (i, m) in masses.iter().enumerate() {
                let lower = if i == 0 { f64::NEG_INFINITY } else { edges[i - 1] };
                let upper = edges.get(i).copied().unwrap_or(f64::INFINITY);
                rows.push([i.to_string(), lower.to_string(), upper.to_string(), m.to_string()]);
            }
            csv_text(rows)?
        }
    };
    out.product(&text)
}

fn csv_text<R, F>(rows: impl IntoIterator<Item = R>) -> Result<String>
where
    R: IntoIterator<Item = F>,
    F: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(row).map_err(|e| Error::invalid(format!("CSV output: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("CSV output: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CalibrationRow {
    method: String,
    gamma: f64,
    #[serde(flatten)]
    result: crate::sim::CalibrationResult,
}

fn cmd_calibrate(config: &ExperimentConfig, format: OutputFormat, out: &mut Output<'_>) -> Result<()> {
    let prepared = prepare_methods_with(config, None)?;
    for w in &prepared.warnings {
        out.note(&format!("warning: {w}"));
    }
    let rows: Vec<CalibrationRow> = calibrate_methods(config, &prepared)?
        .into_iter()
        .map(|(method, gamma, result)| CalibrationRow {
            method: method.to_string(),
            gamma,
            result,
        })
        .collect();
    for r in &rows {
        out.note(&format!(
            "{} gamma={}: threshold {} arl {} ± {}",
            r.method, r.gamma, r.result.threshold, r.result.achieved_arl, r.result.arl_stderr
        ));
    }
    let text = match format {
        OutputFormat::Json => to_json(&rows),
        OutputFormat::Csv => {
            let header = ["method", "gamma", "threshold", "arl", "arl_stderr", "reps", "truncated"].map(String::from);
            csv_text(std::iter::once(header).chain(rows.iter().map(|r| {
                [
                    r.method.clone(),
                    r.gamma.to_string(),
                    r.result.threshold.to_string(),
                    r.result.achieved_arl.to_string(),
                    r.result.arl_stderr.to_string(),
                    r.result.replications.to_string(),
                    r.result.truncated.to_string(),
                ]
            })))?
        }
    };
    out.product(&text)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SimulationRow {
    method: String,
    gamma: f64,
    threshold: f64,
    stopped_at: Option<u64>,
    false_alarm: bool,
    /// Post-change observations seen up to and including the alarm.
    delay: Option<u64>,
}

fn cmd_simulate(
    config: &ExperimentConfig,
    lfd: Option<&Path>,
    format: OutputFormat,
    out: &mut Output<'_>,
) -> Result<()> {
    let given = match lfd {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
            Some(LfdSolution::from_json(&text)?)
        }
        None => None,
    };
    let prepared = prepare_methods_with(config, given)?;
    for w in &prepared.warnings {
        out.note(&format!("warning: {w}"));
    }
    let stream = gen_stream(&config.scenario)?;
    let tau = config.scenario.change_point;
    let mut rows = Vec::new();
    for (method, gamma, cal) in calibrate_methods(config, &prepared)? {
        let setup = prepared
            .setups
            .iter()
            .find(|s| s.method == method)
            .expect("calibrated methods come from the setups");
        let decision = setup.detector.run(&stream, cal.threshold);
        let false_alarm = match (decision.stopped_at, tau) {
            (Some(t), Some(tau)) => t < tau,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let delay = match (decision.stopped_at, tau) {
            (Some(t), Some(tau)) if t >= tau => Some(t - tau + 1),
            _ => None,
        };
        rows.push(SimulationRow {
            method: method.to_string(),
            gamma,
            threshold: cal.threshold,
            stopped_at: decision.stopped_at,
            false_alarm,
            delay,
        });
    }
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let text = match format {
        OutputFormat::Json => to_json(&rows),
        OutputFormat::Csv => {
            let header = ["method", "gamma", "threshold", "stopped_at", "false_alarm", "delay"].map(String::from);
            csv_text(std::iter::once(header).chain(rows.iter().map(|r| {
                [
                    r.method.clone(),
                    r.gamma.to_string(),
                    r.threshold.to_string(),
                    opt(r.stopped_at),
                    r.false_alarm.to_string(),
                    opt(r.delay),
                ]
            })))?
        }
    };
    out.product(&text)
}

fn cmd_compare(config: &ExperimentConfig, format: OutputFormat, out: &mut Output<'_>) -> Result<()> {
    let prepared = prepare_methods_with(config, None)?;
    let comparison = compare_prepared(config, &prepared)?;
    for w in &comparison.warnings {
        out.note(&format!("warning: {w}"));
    }
    for p in &comparison.points {
        out.note(&format!(
            "{} gamma={}: arl {} edd {} ± {}",
            p.method, p.gamma, p.arl_est, p.edd_est, p.edd_stderr
        ));
    }
    let text = match format {
        OutputFormat::Json => to_json(&comparison),
        OutputFormat::Csv => curve_csv(&comparison.points)?,
    };
    out.product(&text)
}
