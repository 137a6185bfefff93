//! Command-line front end.
//!
//! `simulate`, `monitor`, `diagnose` and `report`. Settings resolve as
//! flags > environment (`ANYTIME_DML_OUT_DIR`, output directory only) > `--config` file >
//! built-in defaults. The config file is flat `key = value` text; `#` starts a comment
//! and unknown keys are rejected.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage or configuration failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::boundary::BoundaryForm;
use crate::crossfit::{identification_diagnostics, Aggregation, FoldRule};
use crate::engine::{CsPoint, Estimand, RhoChoice, StopDecision, StopRule, StreamConfig, StreamState};
use crate::nuisance::{LearnerKind, LearnerSpec};
use crate::scores::{
    aipw_score, late_score, pate_score, plr_score, GammaParam, LinearScore, NuisanceEval, Observation, Side,
};
use crate::sim::{peek_grid, run_band, run_coverage, CoverageConfig, Dgp, LateDgpParams, PartialIdDgpParams};
use crate::Error;

pub const OUT_DIR_ENV: &str = "ANYTIME_DML_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "anytime-dml", version, about = "Anytime-valid confidence sequences for DML estimands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a coverage experiment or a single partial-identification band.
    Simulate(SimulateArgs),
    /// Stream a CSV through the engine, printing one NDJSON record per peek.
    Monitor(MonitorArgs),
    /// Identification, nuisance-quality and orthogonality diagnostics for a CSV.
    Diagnose(DiagnoseArgs),
    /// Summarise an NDJSON peek log into plot-ready CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
struct StreamFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    estimand: Option<String>,
    #[arg(long)]
    k_folds: Option<String>,
    #[arg(long)]
    burn_in: Option<String>,
    #[arg(long)]
    peek_every: Option<String>,
    /// Fixed mixture parameter; tuned at the first peek when absent.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<String>,
    #[arg(long)]
    clip_eps: Option<String>,
    #[arg(long)]
    refit_factor: Option<String>,
    /// dml1 or dml2.
    #[arg(long)]
    aggregation: Option<String>,
    /// mixture or printed.
    #[arg(long)]
    boundary: Option<String>,
    /// gbt, ridge or logistic.
    #[arg(long)]
    outcome_learner: Option<String>,
    /// logistic, gbt or ridge.
    #[arg(long)]
    propensity_learner: Option<String>,
    #[arg(long)]
    n_rounds: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    max_depth: Option<String>,
    #[arg(long)]
    min_leaf: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    stream: StreamFlags,
    /// late or partial-id.
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    n_max: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<String>,
    #[arg(long)]
    gamma_data: Option<String>,
    #[arg(long)]
    alpha_z: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
}

#[derive(Debug, Args)]
struct MonitorArgs {
    /// CSV with header y, a, [z], x1..xd.
    input: PathBuf,
    #[command(flatten)]
    stream: StreamFlags,
    /// none, excludes-zero, sign-determined or width-below:<w>.
    #[arg(long)]
    stop_rule: Option<String>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    input: PathBuf,
    #[command(flatten)]
    stream: StreamFlags,
    #[arg(long)]
    c0: Option<String>,
    #[arg(long)]
    c1: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// NDJSON peek log.
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<String>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::EstimandMismatch(_) => usage(e.to_string()),
            _ => runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

const STREAM_KEYS: &[&str] = &[
    "out_dir",
    "seed",
    "alpha",
    "estimand",
    "k_folds",
    "burn_in",
    "peek_every",
    "rho",
    "gamma",
    "clip_eps",
    "refit_factor",
    "aggregation",
    "boundary",
    "outcome_learner",
    "propensity_learner",
    "n_rounds",
    "learning_rate",
    "max_depth",
    "min_leaf",
];

impl StreamFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
        vec![
            ("out_dir", self.out_dir.as_ref()),
            ("seed", self.seed.as_ref()),
            ("alpha", self.alpha.as_ref()),
            ("estimand", self.estimand.as_ref()),
            ("k_folds", self.k_folds.as_ref()),
            ("burn_in", self.burn_in.as_ref()),
            ("peek_every", self.peek_every.as_ref()),
            ("rho", self.rho.as_ref()),
            ("gamma", self.gamma.as_ref()),
            ("clip_eps", self.clip_eps.as_ref()),
            ("refit_factor", self.refit_factor.as_ref()),
            ("aggregation", self.aggregation.as_ref()),
            ("boundary", self.boundary.as_ref()),
            ("outcome_learner", self.outcome_learner.as_ref()),
            ("propensity_learner", self.propensity_learner.as_ref()),
            ("n_rounds", self.n_rounds.as_ref()),
            ("learning_rate", self.learning_rate.as_ref()),
            ("max_depth", self.max_depth.as_ref()),
            ("min_leaf", self.min_leaf.as_ref()),
        ]
    }
}

/// Resolved key/value settings for one command.
#[derive(Debug, Clone, Default)]
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(
        allowed: &[&str],
        defaults: &[(&str, &str)],
        config: Option<&Path>,
        flags: &[(&'static str, Option<&String>)],
    ) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if !allowed.contains(&k.as_str()) {
                    return Err(usage(format!("unknown config key '{k}'")));
                }
                values.insert(k, v);
            }
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                values.insert("out_dir".into(), dir);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("invalid value '{v}' for '{key}'"))),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        self.get(key)?
            .ok_or_else(|| usage(format!("missing required setting '{key}'")))
    }

    fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parses flat `key = value` text. Hyphens in keys are read as underscores.
fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected 'key = value'", i + 1)))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{rendered}")
            } else {
                write!(stderr, "{rendered}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, stdout),
        Command::Monitor(a) => cmd_monitor(&a, stdout, stderr),
        Command::Diagnose(a) => cmd_diagnose(&a, stdout),
        Command::Report(a) => cmd_report(&a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn learner(settings: &Settings, key: &str) -> CliResult<LearnerSpec> {
    let kind: LearnerKind = match settings.raw(key) {
        Some(v) => v.parse().map_err(|e: Error| usage(e.to_string()))?,
        None => return Err(usage(format!("missing '{key}'"))),
    };
    let mut spec = LearnerSpec::of_kind(kind);
    if let Some(v) = settings.get("n_rounds")? {
        spec.n_rounds = v;
    }
    if let Some(v) = settings.get("learning_rate")? {
        spec.learning_rate = v;
    }
    if let Some(v) = settings.get("max_depth")? {
        spec.max_depth = v;
    }
    if let Some(v) = settings.get("min_leaf")? {
        spec.min_leaf = v;
    }
    Ok(spec)
}

fn stream_config(settings: &Settings, estimand: Estimand) -> CliResult<StreamConfig> {
    let mut cfg = StreamConfig::new(estimand);
    cfg.alpha = settings.require("alpha")?;
    cfg.k_folds = settings.require("k_folds")?;
    cfg.burn_in = settings.require("burn_in")?;
    cfg.seed = settings.require("seed")?;
    cfg.clip_eps = settings.require("clip_eps")?;
    cfg.refit_factor = settings.require("refit_factor")?;
    cfg.rho = match settings.get::<f64>("rho")? {
        Some(r) => RhoChoice::Fixed(r),
        None => RhoChoice::TuneAtBurnIn,
    };
    cfg.gamma = match settings.get::<f64>("gamma")? {
        Some(g) => Some(GammaParam::new(g).map_err(|e| usage(e.to_string()))?),
        None => None,
    };
    cfg.aggregation = match settings.raw("aggregation").unwrap_or("dml2") {
        "dml1" => Aggregation::Dml1,
        "dml2" => Aggregation::Dml2,
        other => return Err(usage(format!("unknown aggregation '{other}'"))),
    };
    cfg.boundary = match settings.raw("boundary").unwrap_or("mixture") {
        "mixture" => BoundaryForm::Mixture,
        "printed" => BoundaryForm::Printed,
        other => return Err(usage(format!("unknown boundary form '{other}'"))),
    };
    cfg.fold_rule = FoldRule::RoundRobin;
    cfg.outcome_learner = learner(settings, "outcome_learner")?;
    cfg.propensity_learner = learner(settings, "propensity_learner")?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

const STREAM_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("alpha", "0.05"),
    ("k_folds", "5"),
    ("burn_in", "250"),
    ("peek_every", "250"),
    ("clip_eps", "0.01"),
    ("refit_factor", "2"),
    ("aggregation", "dml2"),
    ("boundary", "mixture"),
    ("outcome_learner", "gbt"),
    ("propensity_learner", "logistic"),
];

/// Stream defaults with some entries replaced or added.
fn defaults_with(overrides: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    let mut out: Vec<_> = STREAM_DEFAULTS
        .iter()
        .filter(|(k, _)| !overrides.iter().any(|(o, _)| o == k))
        .copied()
        .collect();
    out.extend_from_slice(overrides);
    out
}

fn out_dir(settings: &Settings) -> CliResult<PathBuf> {
    let dir = PathBuf::from(settings.raw("out_dir").unwrap_or("results"));
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut allowed: Vec<&str> = STREAM_KEYS.to_vec();
    allowed.extend(["dgp", "reps", "n_max", "tau", "gamma_data", "alpha_z", "theta"]);
    let defaults = defaults_with(&[("k_folds", "4"), ("reps", "200"), ("n_max", "5000")]);
    let mut flags = args.stream.pairs();
    flags.extend([
        ("dgp", args.dgp.as_ref()),
        ("reps", args.reps.as_ref()),
        ("n_max", args.n_max.as_ref()),
        ("tau", args.tau.as_ref()),
        ("gamma_data", args.gamma_data.as_ref()),
        ("alpha_z", args.alpha_z.as_ref()),
        ("theta", args.theta.as_ref()),
    ]);
    let mut settings = Settings::resolve(&allowed, &defaults, args.stream.config.as_deref(), &flags)?;
    let dgp_name: String = settings.require("dgp")?;
    let seed: u64 = settings.require("seed")?;
    let n_max: usize = settings.require("n_max")?;
    let burn_in: usize = settings.require("burn_in")?;
    let every: usize = settings.require("peek_every")?;
    if every == 0 {
        return Err(usage("peek_every must be positive"));
    }
    let grid = peek_grid(burn_in, every, n_max);
    match dgp_name.as_str() {
        "late" => {
            let estimand = settings.get::<Estimand>("estimand").map(|e| e.unwrap_or(Estimand::Late))?;
            if estimand != Estimand::Late {
                return Err(usage("the late design pairs with the late estimand"));
            }
            let params = LateDgpParams::draw_with(
                2,
                settings.get("theta")?.unwrap_or(3.0),
                settings.get("alpha_z")?.unwrap_or(2.0),
                0.4,
                seed,
            );
            let stream = stream_config(&settings, estimand)?;
            coverage_artifacts(&settings, Dgp::Late(params), stream, grid, stdout)
        }
        "partial-id" | "partial_id" => {
            let gamma: f64 = settings.get("gamma")?.unwrap_or(0.6f64.exp());
            settings.values.insert("gamma".into(), gamma.to_string());
            let gamma_data: f64 = settings.get("gamma_data")?.unwrap_or(gamma);
            let params = PartialIdDgpParams::draw_with(4, settings.get("tau")?.unwrap_or(-0.5), gamma_data, 0.0, seed);
            match settings.get::<Estimand>("estimand")? {
                None | Some(Estimand::PateLower) | Some(Estimand::PateUpper) => {
                    let stream = stream_config(&settings, Estimand::PateLower)?;
                    band_artifacts(&settings, &params, stream, n_max, &grid, stdout)
                }
                Some(e @ (Estimand::Ate | Estimand::Plr)) => {
                    let stream = stream_config(&settings, e)?;
                    coverage_artifacts(&settings, Dgp::PartialId(params), stream, grid, stdout)
                }
                Some(Estimand::Late) => Err(usage("the partial-id design has no instrument")),
            }
        }
        other => Err(usage(format!("unknown dgp '{other}' (expected late or partial-id)"))),
    }
}

fn coverage_artifacts(
    settings: &Settings,
    dgp: Dgp,
    stream: StreamConfig,
    grid: Vec<usize>,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let cfg = CoverageConfig {
        dgp,
        stream,
        reps: settings.require("reps")?,
        n_max: settings.require("n_max")?,
        peek_grid: grid,
        seed: settings.require("seed")?,
    };
    let result = run_coverage(&cfg)?;
    let dir = out_dir(settings)?;
    let logs = dir.join("peek_logs");
    fs::create_dir_all(&logs)?;

    let mut agg = csv::Writer::from_writer(Vec::new());
    agg.write_record(["method", "n", "cum_miscoverage", "mean_width"]).map_err(csv_err)?;
    for (method, curve) in [("asympcs", &result.cs_curve), ("batch", &result.batch_curve)] {
        for c in curve {
            agg.write_record([
                method.to_string(),
                c.n.to_string(),
                c.cum_miscoverage.to_string(),
                c.mean_width.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    write_file(&dir.join("coverage.csv"), &csv_string(agg)?)?;

    let mut runs = csv::Writer::from_writer(Vec::new());
    runs.write_record(["method", "rep", "n", "estimate", "lower", "upper", "missed"])
        .map_err(csv_err)?;
    let z = crate::sim::normal_critical_value(cfg.stream.alpha);
    for method in ["asympcs", "batch"] {
        for rep in &result.reps {
            for (g, &n) in cfg.peek_grid.iter().enumerate() {
                let p = rep.points[g];
                let (lo, hi) = match (method, p) {
                    ("asympcs", Some(p)) => (Some(p.lower_int), Some(p.upper_int)),
                    (_, Some(p)) => {
                        let half = z * p.sigma_hat / (p.n as f64).sqrt();
                        (Some(p.theta_hat - half), Some(p.theta_hat + half))
                    }
                    _ => (None, None),
                };
                let missed = if method == "asympcs" {
                    rep.cs_missed[g]
                } else {
                    rep.batch_missed[g]
                };
                runs.write_record([
                    method.to_string(),
                    rep.rep.to_string(),
                    n.to_string(),
                    fmt_opt(p.map(|p| p.theta_hat)),
                    fmt_opt(lo),
                    fmt_opt(hi),
                    (missed as u8).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    write_file(&dir.join("coverage_runs.csv"), &csv_string(runs)?)?;
    for rep in &result.reps {
        let text: String = rep.points.iter().flatten().map(|p| p.to_ndjson() + "\n").collect();
        write_file(&logs.join(format!("rep_{:04}.ndjson", rep.rep)), &text)?;
    }
    write_file(&dir.join("settings.txt"), &settings.dump())?;
    writeln!(
        stdout,
        "truth {} reps {} final n {}: asympcs cumulative miscoverage {} batch {}",
        result.truth,
        cfg.reps,
        cfg.peek_grid.last().copied().unwrap_or(0),
        result.final_cs_miscoverage(),
        result.final_batch_miscoverage()
    )?;
    writeln!(stdout, "nested running intersections in every run: {}", result.all_nested())?;
    writeln!(stdout, "wrote {}", dir.display())?;
    Ok(())
}

fn band_artifacts(
    settings: &Settings,
    params: &PartialIdDgpParams,
    stream: StreamConfig,
    n_max: usize,
    grid: &[usize],
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let gamma = stream.gamma.expect("set above");
    let run = run_band(params, gamma, &stream, n_max, grid)?;
    let dir = out_dir(settings)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "lower_band", "upper_band", "lower_estimate", "upper_estimate", "contains_tau"])
        .map_err(csv_err)?;
    for p in &run.points {
        w.write_record([
            p.n.to_string(),
            p.lower_band.to_string(),
            p.upper_band.to_string(),
            p.lower_estimate.to_string(),
            p.upper_estimate.to_string(),
            (p.contains(run.tau) as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    write_file(&dir.join("band.csv"), &csv_string(w)?)?;
    write_file(&dir.join("settings.txt"), &settings.dump())?;
    writeln!(
        stdout,
        "tau {} gamma {}: band contains tau at every peek: {}; final width {}",
        run.tau,
        gamma.value(),
        run.contains_tau_throughout(),
        fmt_opt(run.final_width())
    )?;
    writeln!(stdout, "wrote {}", dir.join("band.csv").display())?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Failure {
    runtime(format!("csv: {e}"))
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| runtime(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| runtime(e.to_string()))
}

/// Rows of an input CSV, validated against the `y, a, [z], x1..xd` schema.
struct InputData {
    rows: Vec<Observation>,
    has_z: bool,
}

fn read_input(path: &Path, estimand: Estimand) -> CliResult<InputData> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| runtime(format!("line 1: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "y" || header[1] != "a" {
        return Err(usage("header must start with columns y, a"));
    }
    let has_z = header.get(2).is_some_and(|h| h == "z");
    let x_start = if has_z { 3 } else { 2 };
    for (j, name) in header[x_start..].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(usage(format!("expected column 'x{}', found '{name}'", j + 1)));
        }
    }
    if estimand.needs_instrument() && !has_z {
        return Err(usage(format!("estimand {} needs a z column", estimand.name())));
    }
    let parse_binary = |s: &str| match s {
        "0" | "0.0" => Some(false),
        "1" | "1.0" => Some(true),
        _ => None,
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            runtime(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |what: &str| runtime(format!("line {line}: {what}"));
        if record.len() != header.len() {
            return Err(bad("wrong number of fields"));
        }
        let y: f64 = record[0].parse().map_err(|_| bad("y is not a number"))?;
        let a = parse_binary(&record[1]).ok_or_else(|| bad("a must be 0 or 1"))?;
        let z = if has_z {
            Some(parse_binary(&record[2]).ok_or_else(|| bad("z must be 0 or 1"))?)
        } else {
            None
        };
        let x: Vec<f64> = record
            .iter()
            .skip(x_start)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("covariate is not a number"))?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        rows.push(Observation { y, a, z, x });
    }
    Ok(InputData { rows, has_z })
}

fn parse_stop_rule(s: &str) -> CliResult<Option<StopRule>> {
    match s {
        "none" => Ok(None),
        "excludes-zero" | "excludes_zero" => Ok(Some(StopRule::ExcludesZero)),
        "sign-determined" | "sign_determined" => Ok(Some(StopRule::SignDetermined)),
        other => match other
            .strip_prefix("width-below:")
            .or_else(|| other.strip_prefix("width_below:"))
        {
            Some(w) => w
                .parse::<f64>()
                .ok()
                .filter(|w| *w > 0.0)
                .map(|w| Some(StopRule::WidthBelow(w)))
                .ok_or_else(|| usage(format!("invalid width in stop rule '{other}'"))),
            None => Err(usage(format!("unknown stop rule '{other}'"))),
        },
    }
}

fn stream_settings(flags: &StreamFlags, extra_keys: &[&str], extra: &[(&'static str, Option<&String>)]) -> CliResult<Settings> {
    let mut allowed: Vec<&str> = STREAM_KEYS.to_vec();
    allowed.extend_from_slice(extra_keys);
    let defaults = defaults_with(&[("estimand", "ate"), ("peek_every", "100")]);
    let mut pairs = flags.pairs();
    pairs.extend_from_slice(extra);
    Settings::resolve(&allowed, &defaults, flags.config.as_deref(), &pairs)
}

fn cmd_monitor(args: &MonitorArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let settings = stream_settings(&args.stream, &["stop_rule"], &[("stop_rule", args.stop_rule.as_ref())])?;
    let estimand: Estimand = settings.require("estimand")?;
    let cfg = stream_config(&settings, estimand)?;
    let every: usize = settings.require("peek_every")?;
    if every == 0 {
        return Err(usage("peek_every must be positive"));
    }
    let rule = parse_stop_rule(settings.raw("stop_rule").unwrap_or("none"))?;
    let data = read_input(&args.input, estimand)?;
    let burn_in = cfg.burn_in;
    let mut state = StreamState::new(cfg)?;
    let mut first_stop: Option<usize> = None;
    let mut deferred = 0usize;
    let total = data.rows.len();
    let mut log_text = String::new();
    for (i, obs) in data.rows.into_iter().enumerate() {
        state
            .push(obs)
            .map_err(|e| runtime(format!("line {}: {e}", i + 2)))?;
        let n = i + 1;
        let due = n >= burn_in && ((n - burn_in) % every == 0 || n == total);
        if !due {
            continue;
        }
        match state.peek() {
            Ok(_) => {
                if let Some(rule) = rule {
                    if state.check_stop(rule)? == StopDecision::Stop && first_stop.is_none() {
                        first_stop = Some(n);
                    }
                }
                let line = state.last().expect("just peeked").to_ndjson();
                writeln!(stdout, "{line}")?;
                log_text.push_str(&line);
                log_text.push('\n');
            }
            Err(Error::NotReady(_)) => deferred += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(dir) = settings.raw("out_dir") {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("peek_log.ndjson"), &log_text)?;
    }
    let status = match (state.log().is_empty(), first_stop) {
        (true, _) => "not-ready".to_string(),
        (false, Some(n)) => format!("stop at n={n}"),
        (false, None) => "continue".to_string(),
    };
    writeln!(
        stderr,
        "summary: rows={total} peeks={} deferred={deferred} post_stop_rows={} decision={status}",
        state.log().len(),
        state.post_stop_count(),
    )?;
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let settings = stream_settings(
        &args.stream,
        &["c0", "c1"],
        &[("c0", args.c0.as_ref()), ("c1", args.c1.as_ref())],
    )?;
    let estimand: Estimand = settings.require("estimand")?;
    let mut cfg = stream_config(&settings, estimand)?;
    let c0: f64 = settings.get("c0")?.unwrap_or(0.1);
    let c1: f64 = settings.get("c1")?.unwrap_or(1e3);
    let data = read_input(&args.input, estimand)?;
    let n = data.rows.len();
    if n < cfg.k_folds {
        return Err(runtime(format!("{n} rows is fewer than {} folds", cfg.k_folds)));
    }
    // diagnose the full sample in one pass: the first peek is at n
    cfg.burn_in = cfg.burn_in.min(n);
    let rows = data.rows.clone();
    let mut state = StreamState::new(cfg)?;
    for obs in data.rows {
        state.push(obs)?;
    }
    writeln!(stdout, "rows: {n}")?;
    writeln!(stdout, "estimand: {}", estimand.name())?;
    writeln!(stdout, "instrument column: {}", data.has_z)?;
    let point = match state.peek() {
        Ok(p) => p,
        Err(e @ (Error::NotReady(_) | Error::Identification { .. } | Error::Fit(_) | Error::Nuisance(_))) => {
            writeln!(stdout, "identification: FAIL ({e})")?;
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let fit = state.last_fit().expect("peek succeeded");
    let report = identification_diagnostics(fit, c0, c1);
    writeln!(
        stdout,
        "identification: {} (jacobian singular values in [{}, {}], score second-moment min eigenvalue {}, c0 = {c0}, c1 = {c1})",
        if report.pass() { "PASS" } else { "FAIL" },
        report.jacobian_min_singular_value,
        report.jacobian_max_singular_value,
        report.score_min_eigenvalue,
    )?;
    writeln!(
        stdout,
        "estimate: {} sigma: {} interval: [{}, {}]",
        point.theta_hat, point.sigma_hat, point.lower, point.upper
    )?;
    let eps = state.config().clip_eps;
    let evals: Vec<NuisanceEval> = state.nuisance_evals().iter().flatten().copied().collect();
    let clipped = evals
        .iter()
        .filter(|e| {
            let p = propensity_of(e);
            p <= eps || p >= 1.0 - eps
        })
        .count();
    writeln!(stdout, "propensity clipped: {clipped} of {}", evals.len())?;
    // holdout trajectory: refit on growing prefixes, each scored out of fold on all rows
    writeln!(stdout, "holdout rmse trajectory:")?;
    let mut prefix = state.config().burn_in.min(n);
    let base_cfg = state.config().clone();
    let mut sizes = Vec::new();
    while prefix < n {
        sizes.push(prefix);
        prefix = ((prefix as f64) * base_cfg.refit_factor).floor() as usize;
    }
    sizes.push(n);
    sizes.dedup();
    for &size in &sizes {
        let mut s = StreamState::new(StreamConfig {
            burn_in: size.max(base_cfg.k_folds),
            ..base_cfg.clone()
        })?;
        for obs in rows.iter().take(size) {
            s.push(obs.clone())?;
        }
        match s.peek() {
            Ok(_) => {
                let rec = s.refit_log().last().expect("refit at first peek");
                let parts: Vec<String> = rec.holdout_rmse.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(stdout, "  n={size}: {}", parts.join(" "))?;
            }
            Err(e) => writeln!(stdout, "  n={size}: unavailable ({e})")?,
        }
    }
    let gamma = state.config().gamma;
    let theta = point.theta_hat;
    let score = |o: &Observation, e: &NuisanceEval| -> crate::Result<LinearScore> {
        match estimand {
            Estimand::Ate => aipw_score(o, e),
            Estimand::Late => late_score(o, e),
            Estimand::Plr => plr_score(o, e),
            Estimand::PateLower => pate_score(o, e, gamma.expect("validated"), Side::Lower),
            Estimand::PateUpper => pate_score(o, e, gamma.expect("validated"), Side::Upper),
        }
    };
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    if let Some(first) = evals.first() {
        for coord in 0..first.len() {
            let h = 1e-5;
            let mut plus = 0.0;
            let mut minus = 0.0;
            for (o, e) in rows.iter().zip(&evals) {
                let dir = e.unit(coord, 1.0);
                plus += score(o, &e.perturbed(&dir, h)?)?.eval_scalar(theta);
                minus += score(o, &e.perturbed(&dir, -h)?)?.eval_scalar(theta);
            }
            let d = (plus - minus) / (2.0 * h * n as f64);
            worst = worst.max(d.abs());
            parts.push(format!("{d}"));
        }
    }
    writeln!(
        stdout,
        "gateaux derivative per nuisance coordinate (empirical distribution, fitted nuisances): [{}] max |d| = {worst}",
        parts.join(", ")
    )?;
    Ok(())
}

fn propensity_of(e: &NuisanceEval) -> f64 {
    match *e {
        NuisanceEval::Ate { e, .. }
        | NuisanceEval::Late { e, .. }
        | NuisanceEval::PartialId { e, .. }
        | NuisanceEval::PateBand { e, .. }
        | NuisanceEval::Plr { e, .. } => e,
    }
}

fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let flags = [("out_dir", args.out_dir.as_ref())];
    let settings = Settings::resolve(&["out_dir"], &[], args.config.as_deref(), &flags)?;
    let text = fs::read_to_string(&args.input)
        .map_err(|e| runtime(format!("cannot read {}: {e}", args.input.display())))?;
    let mut points: Vec<CsPoint> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: CsPoint =
            serde_json::from_str(line).map_err(|e| runtime(format!("line {}: {e}", i + 1)))?;
        if !(p.lower <= p.upper) {
            return Err(runtime(format!("line {}: lower exceeds upper", i + 1)));
        }
        if let Some(prev) = points.last() {
            if p.lower_int < prev.lower_int || p.upper_int > prev.upper_int || p.n <= prev.n {
                return Err(runtime(format!("line {}: running intersection is not nested", i + 1)));
            }
        }
        points.push(p);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "estimate", "lower", "upper", "lower_int", "upper_int", "width_int", "stopped"])
        .map_err(csv_err)?;
    for p in &points {
        w.write_record([
            p.n.to_string(),
            p.theta_hat.to_string(),
            p.lower.to_string(),
            p.upper.to_string(),
            p.lower_int.to_string(),
            p.upper_int.to_string(),
            (p.upper_int - p.lower_int).to_string(),
            (p.stopped as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    let csv_text = csv_string(w)?;
    match settings.raw("out_dir") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            fs::create_dir_all(&dir)?;
            write_file(&dir.join("report.csv"), &csv_text)?;
        }
        None => write!(stdout, "{csv_text}")?,
    }
    let Some(last) = points.last() else {
        writeln!(stdout, "peeks: 0")?;
        return Ok(());
    };
    let first_excl = points
        .iter()
        .find(|p| p.lower_int > 0.0 || p.upper_int < 0.0)
        .map_or_else(|| "never".to_string(), |p| p.n.to_string());
    writeln!(stdout, "peeks: {}", points.len())?;
    writeln!(
        stdout,
        "final n {}: estimate {} running interval [{}, {}] width {}",
        last.n,
        last.theta_hat,
        last.lower_int,
        last.upper_int,
        last.upper_int - last.lower_int
    )?;
    writeln!(stdout, "first n excluding zero: {first_excl}")?;
    writeln!(stdout, "stopped: {}", last.stopped)?;
    Ok(())
}
