//! Batch entry point: `price`, `premium`, `sweep`, `verify`, `surfaces`.
//!
//! Exit codes: 0 success, 1 a requested check failed, 2 invalid scenario or
//! arguments, 3 solver failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::assembler::{residual_rms, solve_jump, solve_tau_n, write_jump_solution, JumpBsde, JumpSolution};
use crate::error::Error;
use crate::mc::{martingale_test, simulate, CheckpointStat, Measure, StrategyRule, Verdict};
use crate::model::{Compensation, DefaultPayment};
use crate::pde::{write_surface_binary, write_surface_csv, Grid, SolutionSurface};
use crate::premium::{
    claim_surface, eta_sweep, indifference_premium, EtaSweep, LowerBoundMethod, PremiumReport,
};
use crate::scenario::{Scenario, ScenarioError};

/// Default output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "CREDIT_BSDE_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Solve the utility BSDE of the scenario's claim.
    Price,
    /// Indifference premium, lower bound and eta sweep. The premium is for
    /// the bare claim, paying nothing on default; compensation only enters
    /// `price`.
    Premium,
    /// Premium along the eta list.
    Sweep,
    /// Martingale, lower-bound and residual checks.
    Verify,
    /// Export every solution surface.
    Surfaces,
}

#[derive(Debug, Parser)]
#[command(name = "credit-bsde", version, about = "Indifference credit-risk premia via jump BSDEs")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Grid override `NXxNT` (space and time intervals).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Comma-separated, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    pub etas: Option<Vec<f64>>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Tolerance override `name=value`; repeatable.
    #[arg(long = "tol")]
    pub tol: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub command: Command,
    pub grid: Option<(usize, usize)>,
    pub eta: Option<f64>,
    pub etas: Option<Vec<f64>>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub tolerances: Tolerances,
}

/// Check thresholds, overridable with `--tol name=value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Slack in `c >= LB - 3 SE - lower_bound`.
    pub lower_bound: f64,
    pub residual_ratio_min: f64,
    pub residual_ratio_max: f64,
    /// Below this RMS both residual levels count as exact.
    pub residual_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { lower_bound: 1e-4, residual_ratio_min: 1.6, residual_ratio_max: 2.6, residual_floor: 1e-12 }
    }
}

impl Tolerances {
    pub fn set(&mut self, spec: &str) -> Result<(), String> {
        let (name, value) = spec.split_once('=').ok_or_else(|| format!("--tol expects name=value, got {spec}"))?;
        let value: f64 = value.trim().parse().map_err(|_| format!("--tol {name}: not a number"))?;
        let slot = match name.trim() {
            "lower_bound" => &mut self.lower_bound,
            "residual_ratio_min" => &mut self.residual_ratio_min,
            "residual_ratio_max" => &mut self.residual_ratio_max,
            "residual_floor" => &mut self.residual_floor,
            other => return Err(format!("unknown tolerance {other}")),
        };
        *slot = value;
        Ok(())
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("--grid expects NXxNT, got {s}"))?;
    let nx = a.trim().parse().map_err(|_| format!("--grid: bad space count {a}"))?;
    let nt = b.trim().parse().map_err(|_| format!("--grid: bad time count {b}"))?;
    Ok((nx, nt))
}

impl Cli {
    pub fn into_config(self) -> Result<RunConfig, String> {
        let mut tolerances = Tolerances::default();
        for t in &self.tol {
            tolerances.set(t)?;
        }
        Ok(RunConfig {
            scenario: self.scenario,
            command: self.command,
            grid: self.grid.as_deref().map(parse_grid).transpose()?,
            eta: self.eta,
            etas: self.etas,
            paths: self.paths,
            seed: self.seed,
            out: self.out,
            tolerances,
        })
    }
}

/// Exit status, human-readable summary and the files written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub code: i32,
    pub message: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Solver(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Invalid(format!("invalid scenario: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Model(_) | Error::Constraint(_) | Error::Grid(_) | Error::InvalidArgument(_) | Error::Unsupported(_) => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Solver(e.to_string()),
        }
    }
}

struct Ctx {
    scenario: Scenario,
    tol: Tolerances,
    out: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let p = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Solver(e.to_string()))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Failure::Solver(format!("{}: {e}", p.display())))
    }

    fn surface(&mut self, stem: &str, s: &SolutionSurface) -> Result<(), Failure> {
        let csv = self.path(&format!("{stem}.csv"));
        write_surface_csv(s, &csv)?;
        let bin = self.path(&format!("{stem}.cbsf"));
        write_surface_binary(s, &bin)?;
        Ok(())
    }

    fn eta(&self) -> f64 {
        self.scenario.preferences.eta
    }

    fn lower_method(&self) -> LowerBoundMethod {
        let s = &self.scenario.solver;
        LowerBoundMethod::MonteCarlo { n_paths: s.paths, seed: s.seed, dt: s.dt }
    }
}

/// Solves the utility BSDE of the scenario's claim `F` (terminal `-F`).
pub fn solve_claim(scenario: &Scenario) -> crate::Result<JumpSolution> {
    let model = scenario.model()?;
    let default = scenario.default_spec();
    let grid = Grid::new(scenario.grid_spec(), model.s0(), model.horizon())?;
    let gen = crate::generator::UtilityGenerator {
        theta: model.scalar_theta()?,
        eta: scenario.preferences.eta,
        constraint: scenario.constraint_set().map_err(|e| Error::Constraint(e.message))?,
        intensity: default.intensity.clone(),
    };
    let bsde = JumpBsde::new(grid, &model, &default, Arc::new(gen))?;
    let payoff = scenario.payoff();
    let xi = move |x: f64| -payoff.value(x);
    match scenario.compensation() {
        Compensation::None => solve_jump(&bsde, xi, |_| 0.0),
        Compensation::AtMaturity(p) => solve_jump(&bsde, xi, move |x| -p.value(x)),
        Compensation::AtDefault(pay) => {
            let horizon = model.horizon();
            let neg = DefaultPayment::Custom(Arc::new(move |t, x| -pay.value(t, x, horizon)));
            Ok(solve_tau_n(&bsde, xi, &neg, scenario.solver.tau_n, scenario.solver.execution)?.0)
        }
    }
}

#[derive(Serialize)]
struct PriceReport {
    y0: f64,
    eta: f64,
    kappa: f64,
    max_abs_u: f64,
}

fn price(ctx: &mut Ctx) -> Result<bool, Failure> {
    let sol = solve_claim(&ctx.scenario)?;
    let report = PriceReport {
        y0: sol.y0(ctx.scenario.market.s0)?,
        eta: ctx.eta(),
        kappa: sol.kappa,
        max_abs_u: sol.max_abs_u(),
    };
    ctx.json("price.json", &report)?;
    ctx.surface("pre", &sol.pre)?;
    ctx.surface("post", &sol.post)?;
    let p = ctx.path("solution.cbsj");
    write_jump_solution(&sol, ctx.scenario.to_toml_string().as_bytes(), &p)?;
    Ok(true)
}

fn write_sweep_csv(ctx: &mut Ctx, sweep: &EtaSweep) -> Result<(), Failure> {
    let p = ctx.path("sweep.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Failure::Solver(e.to_string()))?;
    w.write_record(["eta", "premium", "gap"]).map_err(|e| Failure::Solver(e.to_string()))?;
    for ((e, c), g) in sweep.etas.iter().zip(&sweep.premiums).zip(&sweep.gaps) {
        w.write_record([e.to_string(), c.to_string(), g.to_string()])
            .map_err(|e| Failure::Solver(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Solver(e.to_string()))
}

fn premium(ctx: &mut Ctx) -> Result<bool, Failure> {
    let problem = ctx.scenario.premium_problem()?;
    let report = indifference_premium(&problem, ctx.eta(), ctx.lower_method())?;
    let sweep = eta_sweep(&problem, &ctx.scenario.solver.etas, LowerBoundMethod::None)?;
    let sweep = with_bound(sweep, &report);
    ctx.json("premium.json", &report)?;
    write_sweep_csv(ctx, &sweep)?;
    Ok(report.respects_lower_bound(ctx.tol.lower_bound).unwrap_or(true))
}

fn with_bound(mut sweep: EtaSweep, report: &PremiumReport) -> EtaSweep {
    if let Some(lb) = report.lower_bound {
        sweep.gaps = sweep.premiums.iter().map(|c| c - lb.value).collect();
        sweep.gap_decreasing = sweep.gaps.windows(2).all(|w| w[1] < w[0]);
        sweep.lower_bound = Some(lb);
    }
    sweep
}

fn sweep(ctx: &mut Ctx) -> Result<bool, Failure> {
    let problem = ctx.scenario.premium_problem()?;
    let sweep = eta_sweep(&problem, &ctx.scenario.solver.etas, ctx.lower_method())?;
    ctx.json("sweep.json", &sweep)?;
    write_sweep_csv(ctx, &sweep)?;
    Ok(sweep.gap_decreasing)
}

#[derive(Serialize)]
struct Suite {
    name: &'static str,
    passed: bool,
    skipped: bool,
    detail: serde_json::Value,
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    premium: f64,
    suites: Vec<Suite>,
}

fn verify(ctx: &mut Ctx) -> Result<bool, Failure> {
    let tol = ctx.tol;
    let s = ctx.scenario.clone();
    let exec = s.solver.execution;
    let model = s.model()?;
    let default = s.default_spec();
    let mut suites = Vec::new();

    let problem = s.premium_problem()?;
    let report = indifference_premium(&problem, ctx.eta(), ctx.lower_method())?;
    let lb_check = report.respects_lower_bound(tol.lower_bound);
    suites.push(Suite {
        name: "lower_bound",
        passed: lb_check.unwrap_or(true),
        skipped: lb_check.is_none(),
        detail: serde_json::to_value(&report).unwrap_or_default(),
    });

    let sol = Arc::new(solve_claim(&s)?);
    let bundle = simulate(&model, &default, Measure::P, s.solver.seed, s.solver.dt, s.solver.paths, exec)?;
    let constraint = s.constraint_set()?;
    let rule = StrategyRule::optimal(sol.clone(), model.scalar_theta()?, s.preferences.eta, constraint);
    let mart = martingale_test(&bundle, &rule, &sol, s.preferences(), &s.solver.checkpoints, exec)?;
    suites.push(Suite {
        name: "martingale",
        passed: mart.verdict == Verdict::Martingale,
        skipped: false,
        detail: serde_json::to_value(&mart).unwrap_or_default(),
    });
    let csv_path = ctx.path("checkpoints.csv");
    write_checkpoints(&csv_path, &mart.checkpoints)?;

    let study = residual_refinement(&s, s.solver.dt, s.solver.paths.min(1000))?;
    let exact = study.rms <= tol.residual_floor && study.rms_half_dt <= tol.residual_floor;
    suites.push(Suite {
        name: "residual",
        skipped: false,
        passed: exact || (tol.residual_ratio_min..=tol.residual_ratio_max).contains(&study.ratio),
        detail: serde_json::to_value(study).unwrap_or_default(),
    });

    let passed = suites.iter().all(|s| s.passed);
    ctx.json("verify.json", &VerifyReport { passed, premium: report.premium, suites })?;
    Ok(passed)
}

/// RMS discrete residual at path step `dt` and `dt / 2` along the same
/// Brownian paths. Each level is solved with one PDE time step per path
/// step, so path times are PDE nodes and no time interpolation enters the
/// residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualStudy {
    pub dt: f64,
    pub rms: f64,
    pub rms_half_dt: f64,
    /// `rms / rms_half_dt`; about 2 for a first-order residual.
    pub ratio: f64,
    /// `rms / dt`.
    pub c: f64,
}

pub fn residual_refinement(scenario: &Scenario, dt: f64, n_paths: usize) -> crate::Result<ResidualStudy> {
    let model = scenario.model()?;
    let default = scenario.default_spec();
    let exec = scenario.solver.execution;
    // one set of fine paths; the coarse level observes them every other step
    let fine = simulate(&model, &default, Measure::P, scenario.solver.seed, dt / 2.0, n_paths, exec)?;
    let level = |factor: usize| -> crate::Result<f64> {
        let step = dt / 2.0 * factor as f64;
        let mut s = scenario.clone();
        s.solver.n_time = (model.horizon() / step).round() as usize;
        let sol = solve_claim(&s)?;
        let gen = crate::generator::UtilityGenerator {
            theta: model.scalar_theta()?,
            eta: s.preferences.eta,
            constraint: s.constraint_set().map_err(|e| Error::Constraint(e.message))?,
            intensity: default.intensity.clone(),
        };
        let paths = crate::exec::try_map_indexed(exec, n_paths, |i| fine.path(i).coarsen(factor))?;
        residual_rms(&sol, &gen, &default.intensity, &paths, exec)
    };
    let (rms, rms_half_dt) = (level(2)?, level(1)?);
    Ok(ResidualStudy { dt, rms, rms_half_dt, ratio: rms / rms_half_dt, c: rms / dt })
}

fn write_checkpoints(path: &Path, stats: &[CheckpointStat]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Solver(e.to_string()))?;
    w.write_record(["t", "mean", "se"]).map_err(|e| Failure::Solver(e.to_string()))?;
    for c in stats {
        w.write_record([c.t.to_string(), c.mean.to_string(), c.se.to_string()])
            .map_err(|e| Failure::Solver(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Solver(e.to_string()))
}

fn surfaces(ctx: &mut Ctx) -> Result<bool, Failure> {
    let sol = solve_claim(&ctx.scenario)?;
    ctx.surface("pre", &sol.pre)?;
    ctx.surface("post", &sol.post)?;
    let problem = ctx.scenario.premium_problem()?;
    if problem.constraint.is_full() && problem.default.barrier.is_none() {
        let grid = problem.grid()?;
        let u = claim_surface(&problem, &grid)?;
        let vol = crate::pde::Volatility::Constant(problem.model.scalar_vol()?);
        let v = crate::pde::solve_premium_pde(&grid, &vol, &u, &problem.default.intensity, ctx.eta())?;
        ctx.surface("u", &u)?;
        ctx.surface("v", &v)?;
    }
    Ok(true)
}

/// Runs one command. Never panics on bad input; everything is reported
/// through the exit code and message.
pub fn run(config: &RunConfig) -> RunOutcome {
    let fail = |code, message: String| RunOutcome { code, message, artifacts: Vec::new() };
    let mut scenario = match Scenario::load(&config.scenario) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INVALID, format!("invalid scenario: {e}")),
    };
    if let Some((nx, nt)) = config.grid {
        scenario.solver.n_space = nx;
        scenario.solver.n_time = nt;
    }
    if let Some(eta) = config.eta {
        scenario.preferences.eta = eta;
    }
    if let Some(etas) = &config.etas {
        scenario.solver.etas = etas.clone();
    }
    if let Some(p) = config.paths {
        scenario.solver.paths = p;
    }
    if let Some(seed) = config.seed {
        scenario.solver.seed = seed;
    }
    if let Err(e) = scenario.validate() {
        return fail(EXIT_INVALID, format!("invalid scenario: {e}"));
    }
    if let Err(e) = fs::create_dir_all(&config.out) {
        return fail(EXIT_INVALID, format!("cannot create {}: {e}", config.out.display()));
    }
    let mut ctx = Ctx { scenario, tol: config.tolerances, out: config.out.clone(), artifacts: Vec::new() };
    let result = match config.command {
        Command::Price => price(&mut ctx),
        Command::Premium => premium(&mut ctx),
        Command::Sweep => sweep(&mut ctx),
        Command::Verify => verify(&mut ctx),
        Command::Surfaces => surfaces(&mut ctx),
    };
    let (code, message) = match result {
        Ok(true) => (EXIT_OK, "ok".to_string()),
        Ok(false) => (EXIT_CHECK_FAILED, "a requested check failed; see the report".to_string()),
        Err(Failure::Invalid(m)) => (EXIT_INVALID, m),
        Err(Failure::Solver(m)) => (EXIT_SOLVER, format!("solver failure: {m}")),
    };
    RunOutcome { code, message, artifacts: ctx.artifacts }
}

/// Parses `argv`-style arguments and runs. Clap errors map to exit 2.
pub fn run_args<I, T>(args: I) -> RunOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            return RunOutcome { code, message: e.to_string(), artifacts: Vec::new() };
        }
    };
    match cli.into_config() {
        Ok(cfg) => run(&cfg),
        Err(m) => RunOutcome { code: EXIT_INVALID, message: m, artifacts: Vec::new() },
    }
}

/// Keyed summary of a directory's artifacts, for idempotence checks.
pub fn read_artifacts(paths: &[PathBuf]) -> std::io::Result<BTreeMap<PathBuf, Vec<u8>>> {
    paths.iter().map(|p| Ok((p.clone(), fs::read(p)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_tolerance_parsing() {
        assert_eq!(parse_grid("512x256"), Ok((512, 256)));
        assert!(parse_grid("512").is_err());
        let mut t = Tolerances::default();
        t.set("lower_bound=1e-3").unwrap();
        assert_eq!(t.lower_bound, 1e-3);
        assert!(t.set("nope=1").is_err());
        assert!(t.set("lower_bound").is_err());
    }

    #[test]
    fn error_classes() {
        assert!(matches!(Failure::from(Error::Unsupported("x".into())), Failure::Invalid(_)));
        assert!(matches!(Failure::from(Error::NoConvergence { step: 1, residual: 1.0 }), Failure::Solver(_)));
    }
}
