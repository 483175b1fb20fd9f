use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use super::grid::{d1_weights, d2_weights, derivative, Grid};
use super::surface::{Regime, SolutionSurface};
use crate::error::{Error, Result};
use crate::generator::EXPONENT_LIMIT;
use crate::model::{Intensity, StateFn};

/// Residual tolerance of the per-step nonlinear solve, relative to
/// `max(1, |w|_inf)`.
pub const NEWTON_TOLERANCE: f64 = 1e-10;

// Exponential reactions far from equilibrium shed about one unit of
// exponent per iteration, hence the generous cap.
const NEWTON_MAX_ITER: usize = 1000;
const LINE_SEARCH_HALVINGS: usize = 30;
const FIXED_POINT_MAX_ITER: usize = 2000;
const FIXED_POINT_RELAXATION: f64 = 0.5;

/// Local volatility `sigma(x)`.
#[derive(Clone)]
pub enum Volatility {
    Constant(f64),
    Local(StateFn),
}

impl Volatility {
    pub fn at(&self, x: f64) -> f64 {
        match self {
            Volatility::Constant(s) => *s,
            Volatility::Local(f) => f(x),
        }
    }
}

impl fmt::Debug for Volatility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Volatility::Constant(s) => write!(f, "Constant({s})"),
            Volatility::Local(_) => write!(f, "Local(..)"),
        }
    }
}

/// Where a reaction term is being evaluated. `step_mid` is the midpoint of
/// the time step in progress, the same for both ends of the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub it: usize,
    pub ix: usize,
    pub t: f64,
    pub x: f64,
    pub step_mid: f64,
}

/// Reaction `R(t, x, w, z)` with `z = sigma(x) x w_x`.
pub trait Reaction: Send + Sync {
    fn value(&self, node: &Node, w: f64, z: f64) -> Result<f64>;

    /// `(dR/dw, dR/dz)`. Only used to build Newton steps.
    fn partials(&self, node: &Node, w: f64, z: f64) -> Result<(f64, f64)> {
        let hw = 1e-7 * (1.0 + w.abs());
        let hz = 1e-7 * (1.0 + z.abs());
        let dw = (self.value(node, w + hw, z)? - self.value(node, w - hw, z)?) / (2.0 * hw);
        let dz = (self.value(node, w, z + hz)? - self.value(node, w, z - hz)?) / (2.0 * hz);
        Ok((dw, dz))
    }

    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroReaction;

impl Reaction for ZeroReaction {
    fn value(&self, _node: &Node, _w: f64, _z: f64) -> Result<f64> {
        Ok(0.0)
    }
    fn partials(&self, _node: &Node, _w: f64, _z: f64) -> Result<(f64, f64)> {
        Ok((0.0, 0.0))
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// `R = coef * z`.
#[derive(Debug, Clone, Copy)]
pub struct LinearZReaction {
    pub coef: f64,
}

impl Reaction for LinearZReaction {
    fn value(&self, _node: &Node, _w: f64, z: f64) -> Result<f64> {
        Ok(self.coef * z)
    }
    fn partials(&self, _node: &Node, _w: f64, _z: f64) -> Result<(f64, f64)> {
        Ok((0.0, self.coef))
    }
    fn is_zero(&self) -> bool {
        self.coef == 0.0
    }
}

type ReactionFn = Arc<dyn Fn(&Node, f64, f64) -> Result<f64> + Send + Sync>;
type PartialsFn = Arc<dyn Fn(&Node, f64, f64) -> Result<(f64, f64)> + Send + Sync>;

/// Reaction given by closures, with optional analytic partials.
#[derive(Clone)]
pub struct FnReaction {
    value: ReactionFn,
    partials: Option<PartialsFn>,
}

impl FnReaction {
    pub fn new(f: impl Fn(&Node, f64, f64) -> Result<f64> + Send + Sync + 'static) -> Self {
        FnReaction { value: Arc::new(f), partials: None }
    }

    pub fn with_partials(
        mut self,
        d: impl Fn(&Node, f64, f64) -> Result<(f64, f64)> + Send + Sync + 'static,
    ) -> Self {
        self.partials = Some(Arc::new(d));
        self
    }
}

impl Reaction for FnReaction {
    fn value(&self, node: &Node, w: f64, z: f64) -> Result<f64> {
        (self.value)(node, w, z)
    }
    fn partials(&self, node: &Node, w: f64, z: f64) -> Result<(f64, f64)> {
        match &self.partials {
            Some(d) => d(node, w, z),
            None => {
                let hw = 1e-7 * (1.0 + w.abs());
                let hz = 1e-7 * (1.0 + z.abs());
                let dw = (self.value(node, w + hw, z)? - self.value(node, w - hw, z)?) / (2.0 * hw);
                let dz = (self.value(node, w, z + hz)? - self.value(node, w, z - hz)?) / (2.0 * hz);
                Ok((dw, dz))
            }
        }
    }
}

/// Condition at one end of the price grid.
#[derive(Clone)]
pub enum Boundary {
    /// Prescribed value as a function of time.
    Dirichlet(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// `w_xx = 0`: the boundary node follows the PDE without diffusion,
    /// with a one-sided first derivative.
    ZeroCurvature,
}

impl Boundary {
    pub fn dirichlet(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Boundary::Dirichlet(Arc::new(f))
    }
}

impl fmt::Debug for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Dirichlet(_) => write!(f, "Dirichlet(..)"),
            Boundary::ZeroCurvature => write!(f, "ZeroCurvature"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryPolicy {
    pub lower: Boundary,
    pub upper: Boundary,
}

impl BoundaryPolicy {
    pub fn zero_curvature() -> Self {
        BoundaryPolicy { lower: Boundary::ZeroCurvature, upper: Boundary::ZeroCurvature }
    }

    /// Put far-field values: `strike - x_min` (zero rates) below, 0 above.
    pub fn put(strike: f64, x_min: f64) -> Self {
        let low = (strike - x_min).max(0.0);
        BoundaryPolicy { lower: Boundary::dirichlet(move |_| low), upper: Boundary::dirichlet(|_| 0.0) }
    }
}

/// `w_t + drift x w_x + 1/2 sigma(x)^2 x^2 w_xx + R(t, x, w, sigma(x) x w_x) = 0`
/// with `w(T, x) = terminal(x)`.
#[derive(Clone)]
pub struct TerminalValueProblem {
    pub vol: Volatility,
    pub drift: f64,
    pub reaction: Arc<dyn Reaction>,
    pub boundary: BoundaryPolicy,
    pub terminal: StateFn,
    pub regime: Regime,
}

impl TerminalValueProblem {
    pub fn new(
        vol: Volatility,
        reaction: Arc<dyn Reaction>,
        boundary: BoundaryPolicy,
        terminal: impl Fn(f64) -> f64 + Send + Sync + 'static,
        regime: Regime,
    ) -> Self {
        TerminalValueProblem { vol, drift: 0.0, reaction, boundary, terminal: Arc::new(terminal), regime }
    }

    pub fn with_drift(mut self, drift: f64) -> Self {
        self.drift = drift;
        self
    }
}

/// Spatial operator coefficients at every node. Interior rows use the
/// three-point stencil; boundary rows are handled separately.
struct Operator {
    xs: Vec<f64>,
    sx: Vec<f64>,
    /// `drift x d1 + 1/2 sigma^2 x^2 d2`, weights on (i-1, i, i+1)
    diff: Vec<[f64; 3]>,
    /// `sigma x d1`
    zw: Vec<[f64; 3]>,
    drift: f64,
}

impl Operator {
    fn new(grid: &Grid, vol: &Volatility, drift: f64) -> Result<Self> {
        let xs = grid.states.clone();
        let n = xs.len();
        let mut sx = Vec::with_capacity(n);
        for &x in &xs {
            let s = vol.at(x);
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Model(format!("volatility {s} at x = {x} is not a finite non-negative number")));
            }
            sx.push(s * x);
        }
        let mut diff = vec![[0.0; 3]; n];
        let mut zw = vec![[0.0; 3]; n];
        for i in 1..n - 1 {
            let d1 = d1_weights(&xs, i);
            let d2 = d2_weights(&xs, i);
            let half_var = 0.5 * sx[i] * sx[i];
            for k in 0..3 {
                diff[i][k] = drift * xs[i] * d1[k] + half_var * d2[k];
                zw[i][k] = sx[i] * d1[k];
            }
        }
        Ok(Operator { xs, sx, diff, zw, drift })
    }

    fn n(&self) -> usize {
        self.xs.len()
    }

    /// Two-point one-sided slope at a boundary node.
    fn edge_slope(&self, w: &[f64], lower: bool) -> (f64, f64, f64) {
        let n = self.n() - 1;
        let (i, j) = if lower { (0, 1) } else { (n - 1, n) };
        let h = self.xs[j] - self.xs[i];
        ((w[j] - w[i]) / h, -1.0 / h, 1.0 / h)
    }
}

struct StepContext<'a> {
    op: &'a Operator,
    reaction: &'a dyn Reaction,
    boundary: &'a BoundaryPolicy,
    it: usize,
    t: f64,
    step_mid: f64,
}

impl StepContext<'_> {
    fn node(&self, ix: usize) -> Node {
        Node { it: self.it, ix, t: self.t, x: self.op.xs[ix], step_mid: self.step_mid }
    }

    /// `L w + R` at every node; boundary entries for Dirichlet ends are unused.
    fn spatial(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        let op = self.op;
        let n = op.n();
        let zero = self.reaction.is_zero();
        for i in 1..n - 1 {
            let d = &op.diff[i];
            let lw = d[0] * w[i - 1] + d[1] * w[i] + d[2] * w[i + 1];
            let r = if zero {
                0.0
            } else {
                let zw = &op.zw[i];
                let z = zw[0] * w[i - 1] + zw[1] * w[i] + zw[2] * w[i + 1];
                self.reaction.value(&self.node(i), w[i], z)?
            };
            out[i] = lw + r;
        }
        for (lower, idx) in [(true, 0), (false, n - 1)] {
            let b = if lower { &self.boundary.lower } else { &self.boundary.upper };
            out[idx] = match b {
                Boundary::Dirichlet(_) => 0.0,
                Boundary::ZeroCurvature => {
                    let (slope, _, _) = op.edge_slope(w, lower);
                    let r = if zero {
                        0.0
                    } else {
                        self.reaction.value(&self.node(idx), w[idx], op.sx[idx] * slope)?
                    };
                    op.drift * op.xs[idx] * slope + r
                }
            };
        }
        Ok(())
    }

    /// Tridiagonal Jacobian of `w -> L w + R(w)` as (sub, diag, sup).
    fn jacobian(&self, w: &[f64], sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]) -> Result<()> {
        let op = self.op;
        let n = op.n();
        let zero = self.reaction.is_zero();
        for i in 1..n - 1 {
            let d = &op.diff[i];
            let (mut a, mut b, mut c) = (d[0], d[1], d[2]);
            if !zero {
                let zw = &op.zw[i];
                let z = zw[0] * w[i - 1] + zw[1] * w[i] + zw[2] * w[i + 1];
                let (rw, rz) = self.reaction.partials(&self.node(i), w[i], z)?;
                a += rz * zw[0];
                b += rw + rz * zw[1];
                c += rz * zw[2];
            }
            sub[i] = a;
            diag[i] = b;
            sup[i] = c;
        }
        for (lower, idx) in [(true, 0), (false, n - 1)] {
            let b = if lower { &self.boundary.lower } else { &self.boundary.upper };
            let (lo, hi) = match b {
                Boundary::Dirichlet(_) => (0.0, 0.0),
                Boundary::ZeroCurvature => {
                    let (slope, ws, wn) = op.edge_slope(w, lower);
                    // ws multiplies the node nearer the low end of the pair
                    let (mut rw, mut rz) = (0.0, 0.0);
                    if !zero {
                        (rw, rz) = self.reaction.partials(&self.node(idx), w[idx], op.sx[idx] * slope)?;
                    }
                    let g = op.drift * op.xs[idx] + rz * op.sx[idx];
                    if lower {
                        (rw + g * ws, g * wn)
                    } else {
                        (g * ws, rw + g * wn)
                    }
                }
            };
            if lower {
                diag[0] = lo;
                sup[0] = hi;
            } else {
                sub[idx] = lo;
                diag[idx] = hi;
            }
        }
        Ok(())
    }

    fn dirichlet(&self, lower: bool) -> Option<f64> {
        let b = if lower { &self.boundary.lower } else { &self.boundary.upper };
        match b {
            Boundary::Dirichlet(f) => Some(f(self.t)),
            Boundary::ZeroCurvature => None,
        }
    }
}

/// Solves `sub_i x_{i-1} + diag_i x_i + sup_i x_{i+1} = rhs_i` in place.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::NoConvergence { step: 0, residual: f64::NAN });
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::NoConvergence { step: 0, residual: f64::NAN });
        }
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Residual `w - dt*theta*(L w + R(w)) - rhs`, with Dirichlet rows pinned.
fn residual(ctx: &StepContext, w: &[f64], rhs: &[f64], wdt: f64, scratch: &mut [f64], out: &mut [f64]) -> Result<()> {
    ctx.spatial(w, scratch)?;
    let n = w.len();
    for i in 0..n {
        out[i] = w[i] - wdt * scratch[i] - rhs[i];
    }
    if let Some(v) = ctx.dirichlet(true) {
        out[0] = w[0] - v;
    }
    if let Some(v) = ctx.dirichlet(false) {
        out[n - 1] = w[n - 1] - v;
    }
    Ok(())
}

fn is_guard(e: &Error) -> bool {
    matches!(e, Error::ExponentGuard { .. })
}

/// Damped Newton for one implicit step. Returns `Ok(None)` on stall.
fn newton(ctx: &StepContext, w: &mut Vec<f64>, rhs: &[f64], wdt: f64) -> Result<Option<f64>> {
    let n = w.len();
    let mut scratch = vec![0.0; n];
    let mut res = vec![0.0; n];
    let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut trial = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    residual(ctx, w, rhs, wdt, &mut scratch, &mut res)?;
    let mut norm = max_abs(&res);
    for _ in 0..NEWTON_MAX_ITER {
        let tol = NEWTON_TOLERANCE * max_abs(w).max(1.0);
        if norm < tol {
            return Ok(Some(norm));
        }
        ctx.jacobian(w, &mut sub, &mut diag, &mut sup)?;
        for i in 0..n {
            sub[i] *= -wdt;
            diag[i] = 1.0 - wdt * diag[i];
            sup[i] *= -wdt;
        }
        if ctx.dirichlet(true).is_some() {
            diag[0] = 1.0;
            sup[0] = 0.0;
        }
        if ctx.dirichlet(false).is_some() {
            diag[n - 1] = 1.0;
            sub[n - 1] = 0.0;
        }
        let mut delta: Vec<f64> = res.iter().map(|r| -r).collect();
        if thomas(&sub, &diag, &sup, &mut delta).is_err() {
            return Ok(None);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..LINE_SEARCH_HALVINGS {
            for i in 0..n {
                trial[i] = w[i] + step * delta[i];
            }
            match residual(ctx, &trial, rhs, wdt, &mut scratch, &mut trial_res) {
                Ok(()) => {
                    let tn = max_abs(&trial_res);
                    if tn.is_finite() && (tn < norm || tn < tol) {
                        accepted = true;
                        norm = tn;
                        break;
                    }
                }
                Err(e) if is_guard(&e) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(None);
        }
        std::mem::swap(w, &mut trial);
        std::mem::swap(&mut res, &mut trial_res);
    }
    let tol = NEWTON_TOLERANCE * max_abs(w).max(1.0);
    Ok(if norm < tol { Some(norm) } else { None })
}

/// Relaxed fixed-point iteration: the reaction is frozen at the previous
/// iterate and the linear part solved exactly.
fn fixed_point(ctx: &StepContext, w: &mut [f64], rhs: &[f64], wdt: f64, step: usize) -> Result<f64> {
    let op = ctx.op;
    let n = w.len();
    let frozen = StepContext { reaction: &ZeroReaction, ..*ctx };
    let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    frozen.jacobian(w, &mut sub, &mut diag, &mut sup)?;
    for i in 0..n {
        sub[i] *= -wdt;
        diag[i] = 1.0 - wdt * diag[i];
        sup[i] *= -wdt;
    }
    let lo_d = ctx.dirichlet(true);
    let hi_d = ctx.dirichlet(false);
    if lo_d.is_some() {
        diag[0] = 1.0;
        sup[0] = 0.0;
    }
    if hi_d.is_some() {
        diag[n - 1] = 1.0;
        sub[n - 1] = 0.0;
    }
    let mut scratch = vec![0.0; n];
    let mut res = vec![0.0; n];
    let mut norm = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let mut b = rhs.to_vec();
        for i in 0..n {
            let edge = i == 0 || i == n - 1;
            let (wi, z) = if edge {
                let (slope, _, _) = op.edge_slope(w, i == 0);
                (w[i], op.sx[i] * slope)
            } else {
                let zw = &op.zw[i];
                (w[i], zw[0] * w[i - 1] + zw[1] * w[i] + zw[2] * w[i + 1])
            };
            b[i] += wdt * ctx.reaction.value(&ctx.node(i), wi, z)?;
        }
        if let Some(v) = lo_d {
            b[0] = v;
        }
        if let Some(v) = hi_d {
            b[n - 1] = v;
        }
        thomas(&sub, &diag, &sup, &mut b)?;
        for i in 0..n {
            w[i] = (1.0 - FIXED_POINT_RELAXATION) * w[i] + FIXED_POINT_RELAXATION * b[i];
        }
        residual(ctx, w, rhs, wdt, &mut scratch, &mut res)?;
        norm = max_abs(&res);
        if norm < NEWTON_TOLERANCE * max_abs(w).max(1.0) {
            return Ok(norm);
        }
    }
    Err(Error::NoConvergence { step, residual: norm })
}

/// Theta-scheme solve of a terminal-value problem on `grid`, stepping
/// backwards from the horizon. The first `rannacher_steps` steps are fully
/// implicit.
pub fn solve_terminal_value(grid: &Grid, problem: &TerminalValueProblem) -> Result<SolutionSurface> {
    let op = Operator::new(grid, &problem.vol, problem.drift)?;
    let nt = grid.n_times();
    let nx = grid.n_states();
    let mut y = Array2::<f64>::zeros((nt, nx));
    let mut z = Array2::<f64>::zeros((nt, nx));

    let mut w: Vec<f64> = grid.states.iter().map(|&x| (problem.terminal)(x)).collect();
    if let Some(bad) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Model(format!("terminal value not finite at x = {}", grid.states[bad])));
    }
    let vol = |x: f64| problem.vol.at(x);
    y.row_mut(nt - 1).assign(&ndarray::ArrayView1::from(&w));
    z.row_mut(nt - 1).assign(&ndarray::Array1::from(SolutionSurface::z_row_from_y(&grid.states, &w, &vol)));

    let mut explicit = vec![0.0; nx];
    for (count, it) in (0..nt - 1).rev().enumerate() {
        let (t0, t1) = (grid.times[it], grid.times[it + 1]);
        let dt = t1 - t0;
        let step_mid = 0.5 * (t0 + t1);
        let theta = if count < grid.spec.rannacher_steps { 1.0 } else { grid.spec.theta_scheme };
        let reaction: &dyn Reaction = problem.reaction.as_ref();

        let mut rhs = w.clone();
        if theta < 1.0 {
            let ctx1 = StepContext { op: &op, reaction, boundary: &problem.boundary, it: it + 1, t: t1, step_mid };
            ctx1.spatial(&w, &mut explicit)?;
            for i in 0..nx {
                rhs[i] += dt * (1.0 - theta) * explicit[i];
            }
        }
        let ctx = StepContext { op: &op, reaction, boundary: &problem.boundary, it, t: t0, step_mid };
        let mut next = w.clone();
        if let Some(v) = ctx.dirichlet(true) {
            next[0] = v;
        }
        if let Some(v) = ctx.dirichlet(false) {
            next[nx - 1] = v;
        }
        let wdt = dt * theta;
        match newton(&ctx, &mut next, &rhs, wdt)? {
            Some(_) => {}
            None => {
                next = w.clone();
                fixed_point(&ctx, &mut next, &rhs, wdt, it)?;
            }
        }
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NoConvergence { step: it, residual: next[i] });
        }
        w = next;
        y.row_mut(it).assign(&ndarray::ArrayView1::from(&w));
        let zr = derivative(&grid.states, &w);
        for i in 0..nx {
            z[(it, i)] = vol(grid.states[i]) * grid.states[i] * zr[i];
        }
    }
    SolutionSurface::new(grid.times.clone(), grid.states.clone(), y, z, problem.regime)
}

/// `R = k(x)/eta (exp(eta (u - v)) - 1)` with `u` read from a surface on
/// the same grid.
struct PremiumReaction<'a> {
    u: &'a SolutionSurface,
    k: Vec<f64>,
    eta: f64,
}

impl PremiumReaction<'_> {
    fn exponent(&self, node: &Node, v: f64) -> Result<f64> {
        let e = self.eta * (self.u.y[(node.it, node.ix)] - v);
        if !(e.abs() <= EXPONENT_LIMIT) {
            return Err(Error::ExponentGuard { exponent: e, limit: EXPONENT_LIMIT });
        }
        Ok(e)
    }
}

impl Reaction for PremiumReaction<'_> {
    fn value(&self, node: &Node, v: f64, _z: f64) -> Result<f64> {
        let k = self.k[node.ix];
        if k == 0.0 {
            return Ok(0.0);
        }
        Ok(k / self.eta * self.exponent(node, v)?.exp_m1())
    }
    fn partials(&self, node: &Node, v: f64, _z: f64) -> Result<(f64, f64)> {
        let k = self.k[node.ix];
        if k == 0.0 {
            return Ok((0.0, 0.0));
        }
        Ok((-k * self.exponent(node, v)?.exp(), 0.0))
    }
    fn is_zero(&self) -> bool {
        self.k.iter().all(|&k| k == 0.0)
    }
}

/// Solves `v_t + 1/2 sigma^2 x^2 v_xx + k(x)/eta (exp(eta (u - v)) - 1) = 0`,
/// `v(T, .) = 0`, with zero-curvature ends. No drift enters.
pub fn solve_premium_pde(
    grid: &Grid,
    vol: &Volatility,
    u_surface: &SolutionSurface,
    intensity: &Intensity,
    eta: f64,
) -> Result<SolutionSurface> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("risk aversion must be positive, got {eta}")));
    }
    if u_surface.times != grid.times || u_surface.states != grid.states {
        return Err(Error::GridMismatch("u surface is not on the premium grid".into()));
    }
    let k: Vec<f64> = grid.states.iter().map(|&x| intensity.rate(x)).collect();
    let k_max = k.iter().fold(0.0f64, |m, v| m.max(*v));
    let reaction = PremiumReaction { u: u_surface, k, eta };
    let op = Operator::new(grid, vol, 0.0)?;
    let boundary = BoundaryPolicy::zero_curvature();
    let nt = grid.n_times();
    let nx = grid.n_states();
    let mut y = Array2::<f64>::zeros((nt, nx));
    let mut z = Array2::<f64>::zeros((nt, nx));
    let mut w = vec![0.0; nx];
    let mut explicit = vec![0.0; nx];

    let u_max = u_surface.max_abs();
    let bound = u_max + grid.horizon() * k_max * (eta * 2.0 * u_max).exp_m1() / eta;

    for (count, it) in (0..nt - 1).rev().enumerate() {
        let (t0, t1) = (grid.times[it], grid.times[it + 1]);
        let dt = t1 - t0;
        let step_mid = 0.5 * (t0 + t1);
        let theta = if count < grid.spec.rannacher_steps { 1.0 } else { grid.spec.theta_scheme };
        let mut rhs = w.clone();
        if theta < 1.0 {
            let ctx1 = StepContext { op: &op, reaction: &reaction, boundary: &boundary, it: it + 1, t: t1, step_mid };
            ctx1.spatial(&w, &mut explicit)?;
            for i in 0..nx {
                rhs[i] += dt * (1.0 - theta) * explicit[i];
            }
        }
        let ctx = StepContext { op: &op, reaction: &reaction, boundary: &boundary, it, t: t0, step_mid };
        let mut next = w.clone();
        let wdt = dt * theta;
        if newton(&ctx, &mut next, &rhs, wdt)?.is_none() {
            next = w.clone();
            fixed_point(&ctx, &mut next, &rhs, wdt, it)?;
        }
        let top = max_abs(&next);
        if !top.is_finite() {
            return Err(Error::NoConvergence { step: it, residual: top });
        }
        if top > bound * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::BoundViolation { step: it, value: top, bound });
        }
        w = next;
        y.row_mut(it).assign(&ndarray::ArrayView1::from(&w));
        let d = derivative(&grid.states, &w);
        for i in 0..nx {
            let x = grid.states[i];
            z[(it, i)] = vol.at(x) * x * d[i];
        }
    }
    SolutionSurface::new(grid.times.clone(), grid.states.clone(), y, z, Regime::Premium)
}
