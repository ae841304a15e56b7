//! The `lll` command line: `solve`, `check`, `qbound`, `enumerate`, `estimate`.
//!
//! Exit codes: 0 success / condition holds, 1 input error, 2 cutoff /
//! condition fails. Events and variables are numbered from 1 in all output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{
    check_lll_condition, decay_report, default_chi, enumerate_valid_trees, m_bound,
    oracle_check_q, q_series, q_table, AnalysisError, ChiVector, EnumerationCaps,
};
use crate::model::{render_ratio, EventSystem, ModelError, Rational, DEFAULT_ENUMERATION_CAP};
use crate::problems::{
    cnf_to_event_system, hypergraph_2coloring_system, parse_dimacs, CnfFormula, DimacsError,
    Hypergraph, HypergraphError,
};
use crate::sampler::{
    reconstruct_witness_forest, run_with_table, verify_progress, DrawTable, ExecutionTrace,
    Outcome, RunOptions, SamplerError, DEFAULT_MAX_CALLS,
};

/// Environment variable overriding the scope enumeration cap.
pub const ENUM_CAP_ENV: &str = "LLL_ENUM_CAP";

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Dimacs {
        path: PathBuf,
        #[source]
        source: DimacsError,
    },
    #[error("{path}: {source}")]
    Hypergraph {
        path: PathBuf,
        #[source]
        source: HypergraphError,
    },
    #[error("{path}: {source}")]
    Instance {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("--chi: {0}")]
    Chi(AnalysisError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InstanceKind {
    Json,
    Dimacs,
    Hypergraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    Human,
}

#[derive(Debug, Parser)]
#[command(name = "lll", version, about = "Local lemma resampling solver and analysis toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub config: RunConfig,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Instance file.
    #[arg(long, global = true)]
    pub instance: Option<PathBuf>,
    /// Instance format; defaults to dimacs for .cnf/.dimacs files, json otherwise.
    #[arg(long, value_enum, global = true)]
    pub kind: Option<InstanceKind>,
    #[arg(long, value_enum, default_value = "json", global = true)]
    pub format: OutputFormat,
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// Draw the seed from system entropy instead of --seed.
    #[arg(long, global = true)]
    pub entropy_seed: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_CALLS, global = true)]
    pub max_calls: u64,
    /// Record assignment snapshots and check progress and forest structure.
    #[arg(long, global = true)]
    pub verify: bool,
    /// `auto`, a file holding the entries, or an inline list like `1/4,1/3`.
    #[arg(long, global = true)]
    pub chi: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Run the resampling algorithm once.
    Solve,
    /// Check the local lemma condition for a chi vector.
    Check,
    /// Tabulate Q_{n,i}, its decay against M^n, and the series cross-check.
    Qbound {
        #[arg(long = "n", default_value_t = 12)]
        n: usize,
    },
    /// List valid trees rooted at an event and cross-check the recurrence.
    Enumerate {
        /// 1-based root event.
        #[arg(long, default_value_t = 1)]
        root: usize,
        #[arg(long = "n", default_value_t = 3)]
        n: usize,
    },
    /// Estimate Pr[at least n resample calls] over seeded replicas.
    Estimate {
        #[arg(long, default_value_t = 10_000)]
        runs: u64,
        #[arg(long, default_value_t = 3)]
        threshold: usize,
    },
}

/// Parsed instance plus whatever the original format lets us say about it.
pub struct LoadedInstance {
    pub system: EventSystem,
    pub formula: Option<CnfFormula>,
}

pub fn load_instance(path: &Path, kind: Option<InstanceKind>) -> Result<LoadedInstance, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let kind = kind.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("cnf" | "dimacs") => InstanceKind::Dimacs,
        _ => InstanceKind::Json,
    });
    let path = path.to_path_buf();
    Ok(match kind {
        InstanceKind::Dimacs => {
            let formula = parse_dimacs(&text).map_err(|source| CliError::Dimacs { path, source })?;
            LoadedInstance {
                system: cnf_to_event_system(&formula),
                formula: Some(formula),
            }
        }
        InstanceKind::Hypergraph => {
            let h = Hypergraph::from_json(&text)
                .map_err(|source| CliError::Hypergraph { path, source })?;
            LoadedInstance {
                system: hypergraph_2coloring_system(&h),
                formula: None,
            }
        }
        InstanceKind::Json => LoadedInstance {
            system: EventSystem::from_json(&text)
                .map_err(|source| CliError::Instance { path, source })?,
            formula: None,
        },
    })
}

fn enumeration_cap() -> Result<u64, CliError> {
    match std::env::var(ENUM_CAP_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{ENUM_CAP_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(DEFAULT_ENUMERATION_CAP),
    }
}

fn resolve_chi(spec: &str, system: &EventSystem) -> Result<ChiVector, CliError> {
    let chi = if spec == "auto" {
        default_chi(system.dependency())
    } else if Path::new(spec).is_file() {
        let text = std::fs::read_to_string(spec).map_err(|source| CliError::Io {
            path: spec.into(),
            source,
        })?;
        let cleaned: String = text
            .chars()
            .map(|c| if matches!(c, '[' | ']' | '"') { ' ' } else { c })
            .collect();
        ChiVector::parse(&cleaned).map_err(CliError::Chi)?
    } else {
        ChiVector::parse(spec).map_err(CliError::Chi)?
    };
    if chi.len() != system.num_events() {
        return Err(CliError::Chi(AnalysisError::DimensionMismatch {
            what: "chi",
            expected: system.num_events(),
            got: chi.len(),
        }));
    }
    Ok(chi)
}

fn ratios(rs: &[Rational]) -> Value {
    Value::Array(rs.iter().map(|r| Value::String(render_ratio(r))).collect())
}

fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Six significant figures.
fn sig6(x: f64) -> String {
    if !x.is_finite() || x == 0.0 {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("float");
    format!("{rounded}")
}

fn human_ratio(r: &Rational) -> String {
    format!("{} ({})", render_ratio(r), sig6(to_f64(r)))
}

/// Result of one command: process exit code and the rendered report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub exit_code: i32,
    pub output: String,
}

/// Parses arguments and executes; usage and input errors become exit code 1
/// with the diagnostic as output.
pub fn run_cli<I, T>(args: I) -> Report
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            return Report {
                exit_code: code,
                output: e.to_string(),
            };
        }
    };
    match execute(&cli) {
        Ok(report) => report,
        Err(e) => Report {
            exit_code: 1,
            output: format!("error: {e}\n"),
        },
    }
}

/// Entry point for the binary: prints the report (or writes it to `--out`).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let out = Cli::try_parse_from(&args).ok().and_then(|c| c.config.out);
    let report = run_cli(args);
    if report.exit_code == 1 || out.is_none() {
        if report.exit_code == 1 {
            eprint!("{}", report.output);
        } else {
            print!("{}", report.output);
        }
        return report.exit_code;
    }
    let path = out.expect("checked");
    if let Err(e) = std::fs::write(&path, &report.output) {
        eprintln!("error: {}: {e}", path.display());
        return 1;
    }
    report.exit_code
}

pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    let config = &cli.config;
    let path = config
        .instance
        .as_deref()
        .ok_or_else(|| CliError::Usage("--instance is required".into()))?;
    let instance = load_instance(path, config.kind)?;
    let seed = if config.entropy_seed {
        rand::random()
    } else {
        config.seed
    };
    if config.max_calls == 0 {
        return Err(CliError::Usage("--max-calls must be positive".into()));
    }
    match &cli.command {
        Command::Solve => cmd_solve(config, &instance, seed),
        Command::Check => cmd_check(config, &instance.system),
        Command::Qbound { n } => cmd_qbound(config, &instance.system, *n),
        Command::Enumerate { root, n } => cmd_enumerate(config, &instance.system, *root, *n),
        Command::Estimate { runs, threshold } => {
            cmd_estimate(config, &instance.system, seed, *runs, *threshold)
        }
    }
}

fn render(format: OutputFormat, json: Value, csv: impl FnOnce() -> String, human: impl FnOnce() -> String) -> String {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&json).expect("report serializes");
            s.push('\n');
            s
        }
        OutputFormat::Csv => csv(),
        OutputFormat::Human => human(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct VerificationTally {
    traces: u64,
    progress_violations: u64,
    locality_violations: u64,
    preorder_failures: u64,
    neighbor_failures: u64,
    sibling_failures: u64,
    tree_count_failures: u64,
}

impl VerificationTally {
    fn of(trace: &ExecutionTrace, system: &EventSystem) -> Result<Self, SamplerError> {
        let progress = verify_progress(trace, system)?;
        let checks = reconstruct_witness_forest(trace, system).checks;
        Ok(Self {
            traces: 1,
            progress_violations: progress.violations.len() as u64,
            locality_violations: progress.locality_violations.len() as u64,
            preorder_failures: (!checks.preorder_matches) as u64,
            neighbor_failures: (!checks.neighbor_of_parent) as u64,
            sibling_failures: (!checks.increasing_siblings) as u64,
            tree_count_failures: (!checks.tree_count_within_m) as u64,
        })
    }

    fn add(self, o: Self) -> Self {
        Self {
            traces: self.traces + o.traces,
            progress_violations: self.progress_violations + o.progress_violations,
            locality_violations: self.locality_violations + o.locality_violations,
            preorder_failures: self.preorder_failures + o.preorder_failures,
            neighbor_failures: self.neighbor_failures + o.neighbor_failures,
            sibling_failures: self.sibling_failures + o.sibling_failures,
            tree_count_failures: self.tree_count_failures + o.tree_count_failures,
        }
    }

    fn clean(&self) -> bool {
        *self == Self { traces: self.traces, ..Self::default() }
    }

    fn to_json(self) -> Value {
        json!({
            "traces": self.traces,
            "progress_violations": self.progress_violations,
            "locality_violations": self.locality_violations,
            "preorder_failures": self.preorder_failures,
            "neighbor_failures": self.neighbor_failures,
            "sibling_failures": self.sibling_failures,
            "tree_count_failures": self.tree_count_failures,
            "clean": self.clean(),
        })
    }
}

fn cmd_solve(config: &RunConfig, instance: &LoadedInstance, seed: u64) -> Result<Report, CliError> {
    let system = &instance.system;
    let table = DrawTable::new(system.variables());
    let options = RunOptions {
        max_calls: config.max_calls,
        snapshots: config.verify,
    };
    let trace = run_with_table(system, &table, seed, options);
    let values = trace.final_assignment.values();
    let verification = if config.verify {
        Some(VerificationTally::of(&trace, system)?)
    } else {
        None
    };
    let mut json = json!({
        "command": "solve",
        "seed": seed,
        "outcome": trace.outcome.to_string(),
        "resample_calls": trace.resample_calls(),
        "phases": trace.phases(),
        "assignment": values
            .iter()
            .enumerate()
            .map(|(x, v)| json!({"variable": x + 1, "value": v}))
            .collect::<Vec<_>>(),
    });
    if instance.formula.is_some() {
        let literals: Vec<i64> = values
            .iter()
            .enumerate()
            .map(|(x, &v)| if v == 1 { x as i64 + 1 } else { -(x as i64 + 1) })
            .collect();
        json["literals"] = json!(literals);
    }
    if let Some(v) = verification {
        json["verification"] = v.to_json();
    }
    let output = render(
        config.format,
        json,
        || {
            let mut s = String::from("variable,value\n");
            for (x, v) in values.iter().enumerate() {
                let _ = writeln!(s, "{},{v}", x + 1);
            }
            s
        },
        || {
            let mut s = String::new();
            let _ = writeln!(s, "outcome:        {}", trace.outcome);
            let _ = writeln!(s, "seed:           {seed}");
            let _ = writeln!(s, "resample calls: {}", trace.resample_calls());
            let _ = writeln!(s, "phases:         {}", trace.phases());
            let assignment: Vec<String> = values
                .iter()
                .enumerate()
                .map(|(x, v)| format!("X{}={v}", x + 1))
                .collect();
            let _ = writeln!(s, "assignment:     {}", assignment.join(" "));
            if let Some(v) = verification {
                let _ = writeln!(s, "verification:   {}", if v.clean() { "clean" } else { "VIOLATIONS" });
            }
            s
        },
    );
    Ok(Report {
        exit_code: if trace.outcome == Outcome::Success { 0 } else { 2 },
        output,
    })
}

fn cmd_check(config: &RunConfig, system: &EventSystem) -> Result<Report, CliError> {
    let probs = system.event_probabilities(enumeration_cap()?)?;
    let chi = resolve_chi(config.chi.as_deref().unwrap_or("auto"), system)?;
    let report = check_lll_condition(system.dependency(), &chi, &probs)?;
    let m = m_bound(&chi);
    let json = json!({
        "command": "check",
        "all_hold": report.all_hold,
        "m_bound": render_ratio(&m),
        "chi": ratios(chi.values()),
        "rows": serde_json::to_value(&report.rows).expect("rows serialize"),
    });
    let output = render(
        config.format,
        json,
        || {
            let mut s = String::from("event,holds,lhs,rhs,slack\n");
            for r in &report.rows {
                let _ = writeln!(
                    s,
                    "{},{},{:e},{:e},{:e}",
                    r.event,
                    r.holds,
                    to_f64(&r.lhs),
                    to_f64(&r.rhs),
                    to_f64(&r.slack)
                );
            }
            s
        },
        || {
            let mut s = String::new();
            for (r, c) in report.rows.iter().zip(chi.values()) {
                let _ = writeln!(
                    s,
                    "E{:<4} {}  Pr = {}  rhs = {}  slack = {}  chi = {}",
                    r.event,
                    if r.holds { "holds" } else { "FAILS" },
                    human_ratio(&r.lhs),
                    human_ratio(&r.rhs),
                    human_ratio(&r.slack),
                    human_ratio(c)
                );
            }
            let _ = writeln!(s, "M = {}", human_ratio(&m));
            let _ = writeln!(s, "condition {}", if report.all_hold { "holds" } else { "fails" });
            s
        },
    );
    Ok(Report {
        exit_code: if report.all_hold { 0 } else { 2 },
        output,
    })
}

fn cmd_qbound(config: &RunConfig, system: &EventSystem, n: usize) -> Result<Report, CliError> {
    let probs = system.event_probabilities(enumeration_cap()?)?;
    let chi = resolve_chi(config.chi.as_deref().unwrap_or("auto"), system)?;
    let graph = system.dependency();
    let condition = check_lll_condition(graph, &chi, &probs)?;
    let table = q_table(graph, &probs, n)?;
    let decay = decay_report(&table, &chi, Some(&condition))?;
    let series = q_series(graph, &probs, n)?;
    let series_agrees = series.iter().enumerate().all(|(i, s)| {
        s.coeff(0) == &Rational::from_integer(0.into())
            && (1..=n).all(|k| s.coeff(k) == table.value(k, i))
    });
    let json = json!({
        "command": "qbound",
        "n": n,
        "probabilities": ratios(&probs),
        "chi": ratios(chi.values()),
        "condition_holds": condition.all_hold,
        "q_table": table.to_json_value(),
        "decay": serde_json::to_value(&decay).expect("decay serializes"),
        "series_agrees": series_agrees,
    });
    let output = render(
        config.format,
        json,
        || decay.to_csv(),
        || {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "condition {}; M = {}; series/recurrence {}",
                if condition.all_hold { "holds" } else { "FAILS" },
                human_ratio(&decay.m),
                if series_agrees { "agree" } else { "DISAGREE" }
            );
            if let Some(w) = decay.warning {
                let _ = writeln!(s, "warning: {w}");
            }
            let _ = writeln!(s, "{:>4}  {:>14}  {:>14}  {:>14}  {:>10}", "n", "sum_i Q_n,i", "M^n", "ratio", "log-slope");
            for r in &decay.rows {
                let slope = r.log_slope.map(sig6).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    s,
                    "{:>4}  {:>14}  {:>14}  {:>14}  {:>10}",
                    r.n,
                    sig6(r.sum_q_f64),
                    sig6(r.m_pow_n_f64),
                    sig6(r.ratio_f64),
                    slope
                );
            }
            s
        },
    );
    Ok(Report {
        exit_code: 0,
        output,
    })
}

fn cmd_enumerate(
    config: &RunConfig,
    system: &EventSystem,
    root: usize,
    n: usize,
) -> Result<Report, CliError> {
    let m = system.num_events();
    if root == 0 || root > m {
        return Err(CliError::Usage(format!("--root must be in 1..={m}")));
    }
    let probs = system.event_probabilities(enumeration_cap()?)?;
    let graph = system.dependency();
    let caps = EnumerationCaps::default();
    let trees = enumerate_valid_trees(graph, &probs, root - 1, n, caps)?;
    let oracle = oracle_check_q(graph, &probs, n, caps)?;
    let all_pass = oracle.iter().all(|r| r.pass);
    let listed: Vec<Value> = trees
        .trees
        .iter()
        .map(|t| {
            json!({
                "preorder": t.labels.iter().map(|l| l + 1).collect::<Vec<_>>(),
                "parents": t.parents.iter().map(|p| p.map(|p| p + 1)).collect::<Vec<_>>(),
                "weight": render_ratio(&t.weight(&probs)),
            })
        })
        .collect();
    let json = json!({
        "command": "enumerate",
        "root": root,
        "n": n,
        "count": trees.trees.len(),
        "weight": render_ratio(&trees.weight),
        "trees": listed,
        "oracle": {
            "all_pass": all_pass,
            "rows": serde_json::to_value(&oracle).expect("rows serialize"),
        },
    });
    let output = render(
        config.format,
        json,
        || {
            let mut s = String::from("tree,preorder,weight\n");
            for (k, t) in trees.trees.iter().enumerate() {
                let labels: Vec<String> = t.labels.iter().map(|l| (l + 1).to_string()).collect();
                let _ = writeln!(s, "{},{},{:e}", k + 1, labels.join(" "), to_f64(&t.weight(&probs)));
            }
            s
        },
        || {
            let mut s = String::new();
            for t in &trees.trees {
                let labels: Vec<String> = t.labels.iter().map(|l| format!("E{}", l + 1)).collect();
                let _ = writeln!(s, "{}", labels.join(" "));
            }
            let _ = writeln!(s, "{} trees, weight {}", trees.trees.len(), human_ratio(&trees.weight));
            let _ = writeln!(
                s,
                "recurrence vs enumeration for n <= {n}: {}",
                if all_pass { "all agree" } else { "MISMATCH" }
            );
            s
        },
    );
    Ok(Report {
        exit_code: if all_pass { 0 } else { 2 },
        output,
    })
}

/// Fraction of runs with at least `threshold` calls, with a Wilson 95% interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    pub threshold: usize,
    pub hits: u64,
    pub runs: u64,
    pub fraction: f64,
    /// `sqrt(f (1 - f) / R)`.
    pub std_error: f64,
    pub ci95: (f64, f64),
}

impl TailEstimate {
    pub fn new(threshold: usize, hits: u64, runs: u64) -> Self {
        let r = runs as f64;
        let f = hits as f64 / r;
        let z2 = Z_95 * Z_95;
        let centre = (f + z2 / (2.0 * r)) / (1.0 + z2 / r);
        let half = Z_95 / (1.0 + z2 / r) * (f * (1.0 - f) / r + z2 / (4.0 * r * r)).sqrt();
        Self {
            threshold,
            hits,
            runs,
            fraction: f,
            std_error: (f * (1.0 - f) / r).sqrt(),
            ci95: ((centre - half).max(0.0), (centre + half).min(1.0)),
        }
    }
}

fn cmd_estimate(
    config: &RunConfig,
    system: &EventSystem,
    seed: u64,
    runs: u64,
    threshold: usize,
) -> Result<Report, CliError> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let table = DrawTable::new(system.variables());
    let options = RunOptions {
        max_calls: config.max_calls,
        snapshots: config.verify,
    };
    // replica r uses seed + r; results are collected in replica order
    let results: Vec<(usize, Outcome, Option<VerificationTally>)> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let trace = run_with_table(system, &table, seed.wrapping_add(r), options);
            let tally = if config.verify {
                Some(VerificationTally::of(&trace, system)?)
            } else {
                None
            };
            Ok((trace.resample_calls(), trace.outcome, tally))
        })
        .collect::<Result<_, SamplerError>>()?;

    let tail: Vec<TailEstimate> = (0..=threshold)
        .map(|n| {
            let hits = results.iter().filter(|(calls, _, _)| *calls >= n).count() as u64;
            TailEstimate::new(n, hits, runs)
        })
        .collect();
    let successes = results.iter().filter(|(_, o, _)| *o == Outcome::Success).count();
    let verification = results
        .iter()
        .filter_map(|(_, _, t)| *t)
        .reduce(VerificationTally::add);

    let reference = match &config.chi {
        Some(spec) if threshold >= 1 => {
            let chi = resolve_chi(spec, system)?;
            let probs = system.event_probabilities(enumeration_cap()?)?;
            let condition = check_lll_condition(system.dependency(), &chi, &probs)?;
            let qt = q_table(system.dependency(), &probs, threshold)?;
            let decay = decay_report(&qt, &chi, Some(&condition))?;
            Some((condition.all_hold, decay))
        }
        _ => None,
    };

    let tail_json: Vec<Value> = tail
        .iter()
        .map(|t| {
            let mut row = json!({
                "n": t.threshold,
                "hits": t.hits,
                "fraction": t.fraction,
                "std_error": t.std_error,
                "ci95": [t.ci95.0, t.ci95.1],
            });
            if let Some((_, decay)) = &reference {
                if t.threshold >= 1 {
                    let d = decay.row(t.threshold);
                    row["sum_q"] = json!(render_ratio(&d.sum_q));
                    row["sum_q_f64"] = json!(d.sum_q_f64);
                    row["m_pow_n"] = json!(render_ratio(&d.m_pow_n));
                    row["m_pow_n_f64"] = json!(d.m_pow_n_f64);
                }
            }
            row
        })
        .collect();
    let headline = &tail[threshold];
    let mut json = json!({
        "command": "estimate",
        "seed": seed,
        "runs": runs,
        "threshold": threshold,
        "max_calls": config.max_calls,
        "successes": successes,
        "cutoffs": runs as usize - successes,
        "fraction": headline.fraction,
        "std_error": headline.std_error,
        "ci95": [headline.ci95.0, headline.ci95.1],
        "tail": tail_json,
    });
    if let Some((holds, _)) = &reference {
        json["condition_holds"] = json!(holds);
    }
    if let Some(v) = verification {
        json["verification"] = v.to_json();
    }
    let output = render(
        config.format,
        json,
        || {
            let mut s = String::from("n,hits,fraction,std_error,ci_low,ci_high,sum_q,m_pow_n\n");
            for t in tail.iter().skip(1) {
                let (q, mp) = reference
                    .as_ref()
                    .map(|(_, d)| {
                        let row = d.row(t.threshold);
                        (format!("{:e}", row.sum_q_f64), format!("{:e}", row.m_pow_n_f64))
                    })
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{q},{mp}",
                    t.threshold, t.hits, t.fraction, t.std_error, t.ci95.0, t.ci95.1
                );
            }
            s
        },
        || {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "{runs} runs from seed {seed}: {successes} succeeded, {} cut off",
                runs as usize - successes
            );
            let _ = writeln!(
                s,
                "Pr[calls >= {threshold}] ~ {} (95% CI {} .. {})",
                sig6(headline.fraction),
                sig6(headline.ci95.0),
                sig6(headline.ci95.1)
            );
            if let Some((holds, decay)) = &reference {
                if threshold >= 1 {
                    let row = decay.row(threshold);
                    let _ = writeln!(
                        s,
                        "sum_i Q_n,i = {}  M^n = {}  (condition {})",
                        sig6(row.sum_q_f64),
                        sig6(row.m_pow_n_f64),
                        if *holds { "holds" } else { "fails" }
                    );
                }
            }
            if let Some(v) = verification {
                let _ = writeln!(s, "verification: {}", if v.clean() { "clean" } else { "VIOLATIONS" });
            }
            s
        },
    );
    Ok(Report {
        exit_code: 0,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_rounds() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn wilson_interval() {
        let t = TailEstimate::new(0, 100, 100);
        assert_eq!(t.fraction, 1.0);
        assert_eq!(t.ci95.1, 1.0);
        assert!(t.ci95.0 > 0.96);
        let t = TailEstimate::new(1, 50, 100);
        assert!((t.ci95.0 - 0.4038).abs() < 1e-3 && (t.ci95.1 - 0.5962).abs() < 1e-3);
        assert!((t.std_error - 0.05).abs() < 1e-12);
    }

    #[test]
    fn chi_list_parsing_rejects_out_of_range() {
        let sys = EventSystem::new(
            vec![crate::model::VariableSpec::binary()],
            vec![crate::model::EventSpec::extensional(vec![0], [vec![0]]).unwrap()],
        )
        .unwrap();
        assert!(matches!(resolve_chi("1", &sys), Err(CliError::Chi(_))));
        assert!(matches!(resolve_chi("1/2,1/2", &sys), Err(CliError::Chi(_))));
        assert_eq!(resolve_chi("1/3", &sys).unwrap().values()[0], Rational::new(1.into(), 3.into()));
    }
}
