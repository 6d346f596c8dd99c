//! Batch front end for the `maoii` library: TOML config, flag overrides,
//! command dispatch and CSV emission.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use maoii::learning::{run_learner, Algo, LearnerRun};
use maoii::regret::{
    fixed_regret_curve, log_linearity_check, optimal_cost, regret_curve, RegretCurve, DEFAULT_CHECKPOINTS,
    DEFAULT_RUNS,
};
use maoii::sim::{simulate, FixedThreshold, RecordMode, SimOptions};
use maoii::solver::{brute_force_threshold, optimal_threshold, r_limit};
use maoii::steady::{
    avg_cost, lambda_2n, lambda_limit, lambda_limit_oscillating, lambda_n, steady_averages,
};
use maoii::{AgeTable, Regime, SourceParams, ThresholdPolicy};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "maoii", version, about = "Threshold scheduling for the mean age of incorrect information")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML experiment config; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo runs per checkpoint (regret).
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Worker threads; 0 lets the pool decide. Never changes the output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Optimal threshold with a brute-force cross-check.
    Solve,
    /// Closed-form averages for every threshold up to n_max and infinity.
    Steady,
    /// One trajectory under a fixed threshold.
    Simulate,
    /// One learner run with its per-slot trace.
    Learn,
    /// Monte Carlo regret curves and growth fits.
    Regret,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub n_states: usize,
    pub r: f64,
    pub rho: f64,
    pub lambda: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            n_states: 5,
            r: 0.1,
            rho: 0.5,
            lambda: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: u64,
    /// `"optimal"`, `"inf"` or a ladder index such as `"4"`.
    pub policy: String,
    /// Keep every k-th slot in the CSV.
    pub record_every: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            horizon: 10_000,
            policy: "optimal".into(),
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    /// `"proposed"` or `"greedy"`.
    pub algo: String,
    pub horizon: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            algo: "proposed".into(),
            horizon: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretConfig {
    pub algos: Vec<String>,
    /// Fixed thresholds benchmarked alongside, same syntax as `simulate.policy`.
    pub fixed: Vec<String>,
}

impl Default for RegretConfig {
    fn default() -> Self {
        Self {
            algos: vec!["proposed".into(), "greedy".into()],
            fixed: Vec::new(),
        }
    }
}

/// Seed that survives a TOML round trip; values past `i64::MAX` are kept
/// as strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Seed(pub u64);

impl Serialize for Seed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(self.0) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&self.0.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Seed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Seed(v)),
            Raw::Str(s) => s.parse().map(Seed).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Seed,
    pub n_max: u64,
    pub tail_tol: f64,
    pub n_runs: usize,
    pub checkpoints: Vec<u64>,
    pub source: SourceConfig,
    pub simulate: SimulateConfig,
    pub learn: LearnConfig,
    pub regret: RegretConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: Seed(0),
            n_max: 200,
            tail_tol: 1e-9,
            n_runs: DEFAULT_RUNS,
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            source: SourceConfig::default(),
            simulate: SimulateConfig::default(),
            learn: LearnConfig::default(),
            regret: RegretConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn params(&self) -> maoii::Result<SourceParams> {
        let s = &self.source;
        SourceParams::new(s.n_states, s.r, s.rho, s.lambda)
    }

    /// The config as a `[resolved_config]` TOML table.
    pub fn resolved_toml(&self) -> String {
        #[derive(Serialize)]
        struct Wrap<'a> {
            resolved_config: &'a ExperimentConfig,
        }
        toml::to_string(&Wrap { resolved_config: self }).expect("config serialises")
    }
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INVALID,
            message: msg.to_string(),
        }
    }

    fn io(path: Option<&Path>, e: io::Error) -> Self {
        let message = match path {
            Some(p) => format!("{}: {e}", p.display()),
            None => e.to_string(),
        };
        Self { code: EXIT_IO, message }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<maoii::Error> for CliError {
    fn from(e: maoii::Error) -> Self {
        Self::invalid(e)
    }
}

/// Reads the config file (if any) and applies flag overrides.
pub fn resolve_config(flags: &Flags) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(Some(path), e))?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = Seed(s);
    }
    if let Some(k) = flags.runs {
        cfg.n_runs = k;
    }
    Ok(cfg)
}

pub fn parse_policy(text: &str, params: &SourceParams) -> Result<ThresholdPolicy, CliError> {
    match text.trim() {
        "optimal" => Ok(optimal_threshold(params)?),
        "inf" | "infinite" => Ok(ThresholdPolicy::Infinite),
        other => other
            .parse::<u64>()
            .map(ThresholdPolicy::Finite)
            .map_err(|_| CliError::invalid(format!("bad policy {other:?}: expected optimal, inf or an integer"))),
    }
}

pub fn parse_algo(text: &str) -> Result<Algo, CliError> {
    match text.trim() {
        "proposed" => Ok(Algo::Proposed),
        "greedy" => Ok(Algo::Greedy),
        other => Err(CliError::invalid(format!("unknown algo {other:?}"))),
    }
}

/// Where a command writes its data and sidecars.
struct Sink {
    out: Option<PathBuf>,
}

impl Sink {
    fn data(&self) -> Result<Box<dyn Write>, CliError> {
        match &self.out {
            Some(p) => {
                let f = File::create(p).map_err(|e| CliError::io(Some(p), e))?;
                Ok(Box::new(BufWriter::new(f)))
            }
            None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        }
    }

    /// Writes `text` next to the data file as `<out>.<suffix>`, or to
    /// standard error when the data goes to standard output.
    fn sidecar(&self, suffix: &str, text: &str) -> Result<(), CliError> {
        match &self.out {
            Some(p) => {
                let mut name = p.as_os_str().to_owned();
                name.push(".");
                name.push(suffix);
                let path = PathBuf::from(name);
                std::fs::write(&path, text).map_err(|e| CliError::io(Some(&path), e))
            }
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }

    fn io_err(&self, e: io::Error) -> CliError {
        CliError::io(self.out.as_deref(), e)
    }
}

/// Runs one command to completion.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.flags)?;
    let sink = Sink {
        out: cli.flags.out.clone(),
    };
    let resolved = cfg.resolved_toml();
    match &sink.out {
        Some(_) => sink.sidecar("resolved_config.toml", &resolved)?,
        None => eprint!("{resolved}"),
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.flags.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::invalid(e))?;
    pool.install(|| match cli.command {
        Command::Solve => cmd_solve(&cfg, &sink),
        Command::Steady => cmd_steady(&cfg, &sink),
        Command::Simulate => cmd_simulate(&cfg, &sink),
        Command::Learn => cmd_learn(&cfg, &sink),
        Command::Regret => cmd_regret(&cfg, &sink),
    })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_solve(cfg: &ExperimentConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg.params()?;
    let policy = optimal_threshold(&params)?;
    let (lambda_a0, lambda_l) = match params.regime() {
        Regime::Smooth => (lambda_n(&params, 0)?, lambda_limit(&params)),
        Regime::Oscillating => (lambda_2n(&params, 0)?, lambda_limit_oscillating(&params)?),
    };
    let c_star = avg_cost(&params, policy)?;
    let brute = brute_force_threshold(&params, cfg.n_max)?;
    let checked = policy.finite().map_or(true, |n| n <= cfg.n_max);
    let matched = brute == policy;
    let flag = match (checked, matched) {
        (false, _) => "unchecked",
        (true, true) => "match",
        (true, false) => "mismatch",
    };
    let r_l = if params.n_states() > 2 { r_limit(params.n_states(), params.rho(), params.lambda()).ok() } else { None };
    let table = AgeTable::build(&params, cfg.tail_tol)?;

    let mut out = sink.data()?;
    let mut w = csv_writer(&mut out);
    w.write_record([
        "regime",
        "threshold",
        "lambda_a0",
        "lambda_limit",
        "optimal_cost",
        "r_limit",
        "age_limit",
        "tail_index",
        "brute_force_threshold",
        "oracle",
    ])
    .map_err(|e| sink.io_err(e.into()))?;
    w.write_record([
        regime_name(params.regime()).to_string(),
        policy.to_string(),
        lambda_a0.to_string(),
        lambda_l.to_string(),
        c_star.to_string(),
        opt_field(r_l),
        table.limit().to_string(),
        table.j_max().to_string(),
        brute.to_string(),
        flag.to_string(),
    ])
    .map_err(|e| sink.io_err(e.into()))?;
    w.flush().map_err(|e| sink.io_err(e))?;
    drop(w);
    out.flush().map_err(|e| sink.io_err(e))?;
    info!("threshold {policy}, brute force {brute} ({flag})");
    if checked && !matched {
        return Err(CliError {
            code: EXIT_ORACLE,
            message: format!("solver gave {policy}, brute force over n <= {} gave {brute}", cfg.n_max),
        });
    }
    Ok(())
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Smooth => "smooth",
        Regime::Oscillating => "oscillating",
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn cmd_steady(cfg: &ExperimentConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg.params()?;
    let step = match params.regime() {
        Regime::Smooth => 1,
        Regime::Oscillating => 2,
    };
    let mut policies: Vec<ThresholdPolicy> = (0..=cfg.n_max).step_by(step).map(ThresholdPolicy::Finite).collect();
    policies.push(ThresholdPolicy::Infinite);
    let mut out = sink.data()?;
    let mut w = csv_writer(&mut out);
    w.write_record(["n", "avg_age", "avg_active", "avg_cost"])
        .map_err(|e| sink.io_err(e.into()))?;
    for p in policies {
        let s = steady_averages(&params, p)?;
        w.write_record([
            p.to_string(),
            s.avg_age.to_string(),
            s.avg_active.to_string(),
            s.avg_cost.to_string(),
        ])
        .map_err(|e| sink.io_err(e.into()))?;
    }
    w.flush().map_err(|e| sink.io_err(e))?;
    drop(w);
    out.flush().map_err(|e| sink.io_err(e))
}

fn cmd_simulate(cfg: &ExperimentConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg.params()?;
    let policy = parse_policy(&cfg.simulate.policy, &params)?;
    let record = match cfg.simulate.record_every {
        0 => return Err(CliError::invalid("simulate.record_every must be positive")),
        1 => RecordMode::All,
        k => RecordMode::Every(k),
    };
    let opts = SimOptions {
        record,
        ..SimOptions::default()
    };
    info!("simulating {} slots under threshold {policy}", cfg.simulate.horizon);
    let mut s = FixedThreshold::new(&params, policy);
    let traj = simulate(&params, &mut s, cfg.simulate.horizon, cfg.seed.0, &opts)?;
    let mut out = sink.data()?;
    traj.write_csv(&mut out).map_err(|e| sink.io_err(e))?;
    out.flush().map_err(|e| sink.io_err(e))?;
    let sm = &traj.summary;
    if sm.horizon > 0 {
        info!(
            "mean cost {}, mean age {}, transmit rate {}",
            sm.total_cost / sm.horizon as f64,
            sm.total_age / sm.horizon as f64,
            sm.schedule_count as f64 / sm.horizon as f64
        );
    }
    Ok(())
}

fn cmd_learn(cfg: &ExperimentConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg.params()?;
    let algo = parse_algo(&cfg.learn.algo)?;
    let run = LearnerRun {
        full_trace: true,
        checkpoints: Vec::new(),
    };
    info!("{algo} learner over {} slots", cfg.learn.horizon);
    let trace = run_learner(algo, &params, cfg.learn.horizon, cfg.seed.0, &run)?;
    let mut out = sink.data()?;
    trace.write_csv(&mut out).map_err(|e| sink.io_err(e))?;
    out.flush().map_err(|e| sink.io_err(e))?;
    info!(
        "final phase {}, threshold {}, r_hat {}",
        trace.final_phase, trace.final_policy, trace.final_r_hat
    );
    Ok(())
}

/// Slope of the regret of the all-transmit policy, which is what a learner
/// stuck exploring pays per slot.
fn explore_slope(params: &SourceParams) -> maoii::Result<Option<f64>> {
    let g = avg_cost(params, ThresholdPolicy::Finite(0))? - optimal_cost(params)?;
    Ok((g > 0.0).then_some(g))
}

fn cmd_regret(cfg: &ExperimentConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg.params()?;
    let seed = cfg.seed.0;
    let mut curves: Vec<RegretCurve> = Vec::new();
    for name in &cfg.regret.algos {
        let algo = parse_algo(name)?;
        info!("{algo}: {} runs x {} checkpoints", cfg.n_runs, cfg.checkpoints.len());
        curves.push(regret_curve(&params, algo, &cfg.checkpoints, cfg.n_runs, seed)?);
    }
    for name in &cfg.regret.fixed {
        let policy = parse_policy(name, &params)?;
        info!("fixed {policy}: {} runs", cfg.n_runs);
        curves.push(fixed_regret_curve(&params, policy, &cfg.checkpoints, cfg.n_runs, seed)?);
    }

    let mut out = sink.data()?;
    let mut w = csv_writer(&mut out);
    w.write_record(["algo", "T", "mean_regret", "stderr", "n_runs"])
        .map_err(|e| sink.io_err(e.into()))?;
    for c in &curves {
        c.write_rows(&mut w).map_err(|e| sink.io_err(e))?;
    }
    w.flush().map_err(|e| sink.io_err(e))?;
    drop(w);
    out.flush().map_err(|e| sink.io_err(e))?;

    let reference = explore_slope(&params)?;
    let mut fit = String::new();
    for c in &curves {
        let tag = c.contender.to_string();
        match log_linearity_check(c, reference) {
            Ok(rep) => {
                for line in rep.to_key_value().lines() {
                    fit.push_str(&format!("{tag}.{line}\n"));
                }
            }
            Err(e) => fit.push_str(&format!("{tag}.fit=unavailable ({e})\n")),
        }
    }
    sink.sidecar("fit.txt", &fit)
}
