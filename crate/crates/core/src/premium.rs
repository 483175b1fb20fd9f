//! Indifference credit-risk premium of a claim `xi` paid only if no default
//! happens before the horizon.
//!
//! Utility BSDEs carry the terminal value `-F`, so the premium is
//! `c = Y_0(defaultable) - Y_0(riskfree)`. Without trading constraints the
//! difference solves the premium PDE directly; with constraints both BSDEs
//! are solved and subtracted.

use std::sync::Arc;

use serde::Serialize;

use crate::assembler::{solve_jump, solve_post_default, JumpBsde};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::generator::UtilityGenerator;
use crate::mc::{lower_bound_mc, simulate, Measure};
use crate::model::{ConstraintSet, DefaultSpec, Intensity, MarketModel, Payoff};
use crate::pde::{
    bs_put_closed_form, bs_put_delta, solve_premium_pde, solve_terminal_value, BoundaryPolicy, FnReaction, Grid,
    GridSpec, Regime, SolutionSurface, TerminalValueProblem, Volatility, ZeroReaction,
};

/// Everything needed to price the premium of one claim.
#[derive(Debug, Clone)]
pub struct PremiumProblem {
    pub model: MarketModel,
    pub default: DefaultSpec,
    pub payoff: Payoff,
    pub constraint: ConstraintSet,
    pub grid: GridSpec,
    pub exec: Execution,
}

impl PremiumProblem {
    fn check(&self) -> Result<()> {
        self.default.require_no_barrier()?;
        if !self.model.is_scalar() {
            return Err(Error::Unsupported("premium solvers are one-dimensional".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid, self.model.s0(), self.model.horizon())
    }

    fn vol(&self) -> Result<Volatility> {
        Ok(Volatility::Constant(self.model.scalar_vol()?))
    }

    pub fn with_intensity(&self, intensity: Intensity, k_max: f64) -> Self {
        let mut p = self.clone();
        p.default = DefaultSpec { intensity, k_max, barrier: None };
        p
    }
}

/// How the lower bound `E^Q[xi 1{tau <= T}]` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerBoundMethod {
    MonteCarlo { n_paths: usize, seed: u64, dt: f64 },
    /// Linear PDE on the premium grid.
    Pde,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBound {
    pub value: f64,
    /// Standard error; 0 for the PDE evaluation.
    pub se: f64,
    pub method: LowerBoundMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridDiagnostics {
    pub n_space: usize,
    pub n_time: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl From<&GridSpec> for GridDiagnostics {
    fn from(g: &GridSpec) -> Self {
        GridDiagnostics { n_space: g.n_space, n_time: g.n_time, x_min: g.x_min, x_max: g.x_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PremiumReport {
    pub premium: f64,
    pub y0_defaultable: f64,
    pub y0_riskfree: f64,
    pub lower_bound: Option<LowerBound>,
    pub eta: f64,
    /// `premium_pde` or `bsde_difference`.
    pub method: String,
    pub grid: GridDiagnostics,
}

impl PremiumReport {
    /// `c >= LB - 3 SE - tol`.
    pub fn respects_lower_bound(&self, tol: f64) -> Option<bool> {
        self.lower_bound.map(|lb| self.premium >= lb.value - 3.0 * lb.se - tol)
    }
}

fn utility_generator(p: &PremiumProblem, eta: f64, intensity: Intensity) -> Result<UtilityGenerator> {
    Ok(UtilityGenerator { theta: p.model.scalar_theta()?, eta, constraint: p.constraint.clone(), intensity })
}

fn bsde(p: &PremiumProblem, grid: &Grid, gen: Arc<dyn crate::generator::Generator>) -> Result<JumpBsde> {
    JumpBsde::new(grid.clone(), &p.model, &p.default, gen)
}

/// `Y_0` of the default-free utility BSDE with terminal `-xi`.
pub fn riskfree_y0(p: &PremiumProblem, eta: f64, grid: &Grid) -> Result<f64> {
    let gen = utility_generator(p, eta, Intensity::Constant(0.0))?;
    let b = bsde(p, grid, Arc::new(gen))?;
    let payoff = p.payoff.clone();
    let s = solve_post_default(&b, move |x| -payoff.value(x))?;
    s.value_at(0.0, p.model.s0())
}

/// Pricing-measure value `u` of `xi`, solved on the grid.
pub fn claim_surface(p: &PremiumProblem, grid: &Grid) -> Result<SolutionSurface> {
    let payoff = p.payoff.clone();
    let problem = TerminalValueProblem::new(
        p.vol()?,
        Arc::new(ZeroReaction),
        BoundaryPolicy::zero_curvature(),
        move |x| payoff.value(x),
        Regime::PostDefault,
    );
    solve_terminal_value(grid, &problem)
}

fn premium_from_u(p: &PremiumProblem, eta: f64, grid: &Grid, u: &SolutionSurface) -> Result<(SolutionSurface, f64)> {
    let v = solve_premium_pde(grid, &p.vol()?, u, &p.default.intensity, eta)?;
    let c = v.value_at(0.0, p.model.s0())?;
    Ok((v, c))
}

/// Indifference premium at risk aversion `eta`.
pub fn indifference_premium(p: &PremiumProblem, eta: f64, lower: LowerBoundMethod) -> Result<PremiumReport> {
    p.check()?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("risk aversion must be positive, got {eta}")));
    }
    let grid = p.grid()?;
    let y0_riskfree = riskfree_y0(p, eta, &grid)?;
    let (premium, y0_defaultable, method) = if p.constraint.is_full() {
        let u = claim_surface(p, &grid)?;
        let (_, c) = premium_from_u(p, eta, &grid, &u)?;
        (c, y0_riskfree + c, "premium_pde")
    } else {
        let gen = utility_generator(p, eta, p.default.intensity.clone())?;
        let b = bsde(p, &grid, Arc::new(gen))?;
        let payoff = p.payoff.clone();
        let sol = solve_jump(&b, move |x| -payoff.value(x), |_| 0.0)?;
        let y0 = sol.y0(p.model.s0())?;
        (y0 - y0_riskfree, y0, "bsde_difference")
    };
    let lower_bound = lower_bound(p, lower)?;
    Ok(PremiumReport {
        premium,
        y0_defaultable,
        y0_riskfree,
        lower_bound,
        eta,
        method: method.into(),
        grid: GridDiagnostics::from(&p.grid),
    })
}

/// Plain risk-neutral expectation; only a bound on the premium without
/// trading constraints, so constrained problems get `None`.
fn lower_bound(p: &PremiumProblem, method: LowerBoundMethod) -> Result<Option<LowerBound>> {
    if !p.constraint.is_full() {
        return Ok(None);
    }
    Ok(match method {
        LowerBoundMethod::MonteCarlo { n_paths, seed, dt } => {
            let (value, se) = lower_bound_estimate(p, n_paths, seed, dt)?;
            Some(LowerBound { value, se, method })
        }
        LowerBoundMethod::Pde => Some(LowerBound { value: lower_bound_pde(p)?, se: 0.0, method }),
        LowerBoundMethod::None => None,
    })
}

fn require_unconstrained(p: &PremiumProblem) -> Result<()> {
    if p.constraint.is_full() {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "with trading constraints the bounding measure depends on the solution; no plain lower bound".into(),
        ))
    }
}

/// Monte-Carlo estimate of `E^Q[xi(S_T) 1{tau <= T}]`.
pub fn lower_bound_estimate(p: &PremiumProblem, n_paths: usize, seed: u64, dt: f64) -> Result<(f64, f64)> {
    require_unconstrained(p)?;
    if n_paths < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 paths, got {n_paths}")));
    }
    let bundle = simulate(&p.model, &p.default, Measure::Q, seed, dt, n_paths, p.exec)?;
    lower_bound_mc(&bundle, &p.payoff)
}

/// `E^Q[xi 1{tau <= T}] = w(0, s0)` with
/// `w_t + 1/2 sigma^2 x^2 w_xx + k(x) (u - w) = 0`, `w(T) = 0`.
pub fn lower_bound_pde(p: &PremiumProblem) -> Result<f64> {
    p.check()?;
    require_unconstrained(p)?;
    let grid = p.grid()?;
    let u = Arc::new(claim_surface(p, &grid)?);
    lower_bound_pde_with(p, &grid, u)
}

fn lower_bound_pde_with(p: &PremiumProblem, grid: &Grid, u: Arc<SolutionSurface>) -> Result<f64> {
    let k: Vec<f64> = grid.states.iter().map(|&x| p.default.rate(x)).collect();
    let k2 = k.clone();
    let reaction = FnReaction::new(move |n, w, _| Ok(k[n.ix] * (u.y[(n.it, n.ix)] - w)))
        .with_partials(move |n, _, _| Ok((-k2[n.ix], 0.0)));
    let problem =
        TerminalValueProblem::new(p.vol()?, Arc::new(reaction), BoundaryPolicy::zero_curvature(), |_| 0.0, Regime::Premium);
    solve_terminal_value(grid, &problem)?.value_at(0.0, p.model.s0())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaSweep {
    pub etas: Vec<f64>,
    pub premiums: Vec<f64>,
    pub lower_bound: Option<LowerBound>,
    /// `premium - lower bound` per eta.
    pub gaps: Vec<f64>,
    /// Whether the gap shrinks at every step.
    pub gap_decreasing: bool,
    /// Linear-in-eta extrapolation to `eta = 0` through the two smallest
    /// etas. Diagnostic only.
    pub extrapolated: f64,
}

/// Premiums along a strictly decreasing list of risk aversions.
pub fn eta_sweep(p: &PremiumProblem, etas: &[f64], lower: LowerBoundMethod) -> Result<EtaSweep> {
    p.check()?;
    if etas.is_empty() || etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument("etas must be positive".into()));
    }
    if etas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("etas must be strictly decreasing".into()));
    }
    let premiums: Vec<f64> = if p.constraint.is_full() {
        let grid = p.grid()?;
        let u = claim_surface(p, &grid)?;
        try_map_indexed(p.exec, etas.len(), |i| premium_from_u(p, etas[i], &grid, &u).map(|r| r.1))?
    } else {
        try_map_indexed(p.exec, etas.len(), |i| {
            indifference_premium(p, etas[i], LowerBoundMethod::None).map(|r| r.premium)
        })?
    };
    if premiums.iter().any(|c| !c.is_finite()) {
        return Err(Error::NoConvergence { step: 0, residual: f64::NAN });
    }
    let lower_bound = lower_bound(p, lower)?;
    let gaps: Vec<f64> = match lower_bound {
        Some(lb) => premiums.iter().map(|c| c - lb.value).collect(),
        None => vec![f64::NAN; premiums.len()],
    };
    let gap_decreasing = lower_bound.is_some() && gaps.windows(2).all(|w| w[1] < w[0]);
    let n = etas.len();
    let extrapolated = if n >= 2 {
        let (e1, e2) = (etas[n - 2], etas[n - 1]);
        let (c1, c2) = (premiums[n - 2], premiums[n - 1]);
        c2 - e2 * (c1 - c2) / (e1 - e2)
    } else {
        premiums[0]
    };
    Ok(EtaSweep { etas: etas.to_vec(), premiums, lower_bound, gaps, gap_decreasing, extrapolated })
}

/// Output of the defaultable-put pipeline.
#[derive(Debug, Clone)]
pub struct PutPipeline {
    pub u: SolutionSurface,
    pub v: SolutionSurface,
    pub report: PremiumReport,
    /// `|u_linear(0, s0) - u_closed(0, s0)|` for the linear solve of the
    /// same put on the same grid.
    pub u_crosscheck: f64,
}

/// Put with strike `strike` on a one-asset unconstrained market: `u` from
/// the closed form, `v` from the premium PDE, premium `v(0, s0)`.
pub fn defaultable_put_pipeline(strike: f64, p: &PremiumProblem, eta: f64, lower: LowerBoundMethod) -> Result<PutPipeline> {
    p.check()?;
    if !p.constraint.is_full() {
        return Err(Error::Unsupported("the put pipeline needs an unconstrained market".into()));
    }
    let mut p = p.clone();
    p.payoff = Payoff::Put { strike };
    let grid = p.grid()?;
    let sigma = p.model.scalar_vol()?;
    let horizon = p.model.horizon();
    let u = SolutionSurface::from_fn(
        &grid,
        Regime::PostDefault,
        |_| sigma,
        |t, x| bs_put_closed_form(t, x, strike, sigma, horizon),
        |t, x| bs_put_delta(t, x, strike, sigma, horizon),
    );
    let s0 = p.model.s0();
    let linear = solve_terminal_value(
        &grid,
        &TerminalValueProblem::new(
            Volatility::Constant(sigma),
            Arc::new(ZeroReaction),
            BoundaryPolicy::put(strike, grid.states[0]),
            move |x| (strike - x).max(0.0),
            Regime::PostDefault,
        ),
    )?;
    let u_crosscheck = (linear.value_at(0.0, s0)? - u.value_at(0.0, s0)?).abs();
    let (v, premium) = premium_from_u(&p, eta, &grid, &u)?;
    let y0_riskfree = riskfree_y0(&p, eta, &grid)?;
    let lower_bound = match lower {
        LowerBoundMethod::Pde => Some(LowerBound { value: lower_bound_pde_with(&p, &grid, Arc::new(u.clone()))?, se: 0.0, method: lower }),
        other => lower_bound(&p, other)?,
    };
    let report = PremiumReport {
        premium,
        y0_defaultable: y0_riskfree + premium,
        y0_riskfree,
        lower_bound,
        eta,
        method: "premium_pde".into(),
        grid: GridDiagnostics::from(&p.grid),
    };
    Ok(PutPipeline { u, v, report, u_crosscheck })
}
