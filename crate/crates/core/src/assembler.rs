//! Switching construction for BSDEs with one default jump.
//!
//! The post-default leg is a continuous BSDE solved first. Its value `Yt`
//! enters the pre-default generator through the gap `Yt - y`; the two legs
//! are glued at the default time with `U = Yt - Y^a`.
//!
//! Every leg is solved as a PDE under the pricing measure: the asset drift
//! `alpha x w_x` is rewritten as `theta z`, so the reaction of a leg with
//! generator `g` is `g(t, x, z) + theta z` and no drift enters the operator.

use std::io::Write;
use std::path::Path as FsPath;
use std::sync::Arc;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::generator::{DefaultState, Generator};
use crate::mc::Path;
use crate::model::{DefaultPayment, DefaultSpec, Intensity, MarketModel, StateFn};
use crate::pde::{
    solve_terminal_value, surface_to_binary, BoundaryPolicy, Grid, GridSpec, Node, Reaction, Regime,
    SolutionSurface, TerminalValueProblem, Volatility,
};

/// A BSDE with one default jump, in Markovian form on a price grid.
#[derive(Clone)]
pub struct JumpBsde {
    pub grid: Grid,
    pub vol: Volatility,
    /// Market price of risk used to move legs to the pricing measure.
    pub theta: f64,
    pub generator: Arc<dyn Generator>,
    pub intensity: Intensity,
    pub boundary: BoundaryPolicy,
    /// Sup-norm box the pre-default solution must stay in. `None` uses
    /// `kappa + T sup |g(., ., 0)|` over the grid.
    pub kappa_box: Option<f64>,
}

impl JumpBsde {
    pub fn new(grid: Grid, model: &MarketModel, default: &DefaultSpec, generator: Arc<dyn Generator>) -> Result<Self> {
        default.require_no_barrier()?;
        Ok(JumpBsde {
            grid,
            vol: Volatility::Constant(model.scalar_vol()?),
            theta: model.scalar_theta()?,
            generator,
            intensity: default.intensity.clone(),
            boundary: BoundaryPolicy::zero_curvature(),
            kappa_box: None,
        })
    }

    /// `sup |l(t, x, 0)|, |m(t, x, 0)|` over the grid nodes.
    fn lambda0(&self) -> f64 {
        let mut m = 0.0f64;
        for &t in &self.grid.times {
            for &x in &self.grid.states {
                m = m.max(self.generator.l(t, x, 0.0).abs()).max(self.generator.m(t, x, 0.0).abs());
            }
        }
        m
    }

    fn box_for(&self, kappa: f64) -> f64 {
        self.kappa_box.unwrap_or_else(|| kappa + self.grid.horizon() * self.lambda0())
    }
}

fn sup_on_grid(grid: &Grid, f: &dyn Fn(f64) -> f64) -> f64 {
    grid.states.iter().fold(0.0f64, |m, &x| m.max(f(x).abs()))
}

/// Reaction of a continuous leg: `m(t, x, z) + theta z`.
struct PostReaction {
    generator: Arc<dyn Generator>,
    theta: f64,
}

impl Reaction for PostReaction {
    fn value(&self, node: &Node, _w: f64, z: f64) -> Result<f64> {
        Ok(self.generator.m(node.t, node.x, z) + self.theta * z)
    }
    fn partials(&self, node: &Node, _w: f64, z: f64) -> Result<(f64, f64)> {
        Ok((0.0, self.generator.dm_dz(node.t, node.x, z) + self.theta))
    }
}

fn window_grid(grid: &Grid, from: usize, to: usize) -> Grid {
    let mut spec: GridSpec = grid.spec;
    spec.n_time = to - from;
    Grid { spec, times: grid.times[from..=to].to_vec(), states: grid.states.clone() }
}

fn solve_post_window(bsde: &JumpBsde, grid: &Grid, terminal: StateFn) -> Result<SolutionSurface> {
    let problem = TerminalValueProblem {
        vol: bsde.vol.clone(),
        drift: 0.0,
        reaction: Arc::new(PostReaction { generator: bsde.generator.clone(), theta: bsde.theta }),
        boundary: bsde.boundary.clone(),
        terminal,
        regime: Regime::PostDefault,
    };
    solve_terminal_value(grid, &problem)
}

/// Post-default leg `Yt_t = zeta - int Zt dW + int m(s, Zt) ds` with terminal
/// value `zeta(S_T)`.
pub fn solve_post_default(
    bsde: &JumpBsde,
    compensation: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> Result<SolutionSurface> {
    solve_post_window(bsde, &bsde.grid, Arc::new(compensation))
}

/// Post-default value read by the pre-default reaction. A single surface,
/// or one window surface per default-time segment.
#[derive(Clone)]
enum PostLookup {
    Single(Arc<SolutionSurface>),
    Segments { n: usize, offsets: Vec<usize>, legs: Vec<Arc<SolutionSurface>> },
}

impl PostLookup {
    fn value(&self, node: &Node) -> f64 {
        match self {
            PostLookup::Single(s) => s.y[(node.it, node.ix)],
            PostLookup::Segments { n, offsets, legs } => {
                let k = segment_of(node.step_mid, *n, legs.len());
                legs[k - 1].y[(node.it - offsets[k - 1], node.ix)]
            }
        }
    }
}

/// Segment `k` with `t in ((k-1)/n, k/n]`, clamped to `1..=count`.
fn segment_of(t: f64, n: usize, count: usize) -> usize {
    ((t * n as f64).ceil() as usize).clamp(1, count)
}

/// Pre-default reaction
/// `l(t, x, z) + theta z + j(t, x, Yt - y) + (Yt - y) k(x)`.
#[derive(Clone)]
pub struct PreDefaultReaction {
    post: PostLookup,
    generator: Arc<dyn Generator>,
    intensity: Intensity,
    theta: f64,
}

impl PreDefaultReaction {
    /// Gap `Yt - y` at a node.
    pub fn gap(&self, node: &Node, y: f64) -> f64 {
        self.post.value(node) - y
    }
}

impl Reaction for PreDefaultReaction {
    fn value(&self, node: &Node, y: f64, z: f64) -> Result<f64> {
        let u = self.gap(node, y);
        let k = self.intensity.rate(node.x);
        Ok(self.generator.l(node.t, node.x, z) + self.theta * z + self.generator.j(node.t, node.x, u)? + u * k)
    }
    fn partials(&self, node: &Node, y: f64, z: f64) -> Result<(f64, f64)> {
        let u = self.gap(node, y);
        let k = self.intensity.rate(node.x);
        let dy = -self.generator.dj_du(node.t, node.x, u)? - k;
        Ok((dy, self.generator.dl_dz(node.t, node.x, z) + self.theta))
    }
}

/// Pre-default reaction built on a post-default surface on the same grid.
pub fn build_pre_default_generator(
    post: Arc<SolutionSurface>,
    generator: Arc<dyn Generator>,
    intensity: Intensity,
    theta: f64,
) -> PreDefaultReaction {
    PreDefaultReaction { post: PostLookup::Single(post), generator, intensity, theta }
}

/// Pre-default leg with terminal `xi(S_T)`. Fails with `BoundViolation`
/// if the solution leaves the box `|Y^a| <= kappa_box`.
pub fn solve_pre_default(
    bsde: &JumpBsde,
    terminal: impl Fn(f64) -> f64 + Send + Sync + 'static,
    reaction: PreDefaultReaction,
    kappa_box: f64,
) -> Result<SolutionSurface> {
    if let PostLookup::Single(s) = &reaction.post {
        if s.times != bsde.grid.times || s.states != bsde.grid.states {
            return Err(Error::GridMismatch("post-default surface is not on the BSDE grid".into()));
        }
    }
    let problem = TerminalValueProblem {
        vol: bsde.vol.clone(),
        drift: 0.0,
        reaction: Arc::new(reaction),
        boundary: bsde.boundary.clone(),
        terminal: Arc::new(terminal),
        regime: Regime::PreDefault,
    };
    let s = solve_terminal_value(&bsde.grid, &problem)?;
    check_box(&s, kappa_box)?;
    Ok(s)
}

fn check_box(s: &SolutionSurface, bound: f64) -> Result<()> {
    let slack = 1e-8 * (1.0 + bound);
    for ((j, _), &v) in s.y.indexed_iter() {
        if v.abs() > bound + slack {
            return Err(Error::BoundViolation { step: j, value: v, bound });
        }
    }
    Ok(())
}

/// Solution `(Y, Z, U)` of a jump BSDE on a grid: `Y = Y^a`, `Z = Z^a`
/// before default, `Y = Yt`, `Z = Zt` after, `U = Yt - Y^a`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSolution {
    pub pre: SolutionSurface,
    /// Post-default value at each node, for a default at that node's time.
    pub post: SolutionSurface,
    pub u: Array2<f64>,
    pub kappa: f64,
}

impl JumpSolution {
    pub fn y0(&self, s0: f64) -> Result<f64> {
        self.pre.value_at(self.pre.times[0], s0)
    }

    pub fn max_abs_u(&self) -> f64 {
        self.u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Value of `Y` at `(t, x)` given whether default has happened.
    pub fn value(&self, t: f64, x: f64, alive: bool) -> Result<f64> {
        if alive {
            self.pre.value_at(t, x)
        } else {
            self.post.value_at(t, x)
        }
    }

    pub fn z(&self, t: f64, x: f64, alive: bool) -> Result<f64> {
        if alive {
            self.pre.z_at(t, x)
        } else {
            self.post.z_at(t, x)
        }
    }

    /// Jump `U` at `(t, x)`: difference of the interpolated surfaces.
    pub fn jump(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.post.value_at(t, x)? - self.pre.value_at(t, x)?)
    }
}

/// Glues the two legs. `U = post.Y - pre.Y` node by node; both
/// `|U| <= 2 max(sup|Y^a|, sup|Yt|)` and `|U| <= 2 kappa` are checked.
pub fn assemble(pre: SolutionSurface, post: SolutionSurface, kappa: f64) -> Result<JumpSolution> {
    if !pre.same_grid(&post) {
        return Err(Error::GridMismatch("pre- and post-default surfaces live on different grids".into()));
    }
    let u = &post.y - &pre.y;
    let cap = 2.0 * pre.max_abs().max(post.max_abs());
    for ((j, _), &v) in u.indexed_iter() {
        if v.abs() > cap {
            return Err(Error::BoundViolation { step: j, value: v, bound: cap });
        }
        if v.abs() > 2.0 * kappa * (1.0 + 1e-12) {
            return Err(Error::BoundViolation { step: j, value: v, bound: 2.0 * kappa });
        }
    }
    Ok(JumpSolution { pre, post, u, kappa })
}

/// Solves a jump BSDE whose post-default terminal value depends on the
/// terminal price only: pre terminal `xi(S_T)`, post terminal `zeta(S_T)`.
pub fn solve_jump(
    bsde: &JumpBsde,
    xi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    zeta: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> Result<JumpSolution> {
    let kappa = sup_on_grid(&bsde.grid, &xi).max(sup_on_grid(&bsde.grid, &zeta));
    let bound = bsde.box_for(kappa);
    let post = Arc::new(solve_post_default(bsde, zeta)?);
    check_box(&post, bound)?;
    let reaction = build_pre_default_generator(post.clone(), bsde.generator.clone(), bsde.intensity.clone(), bsde.theta);
    let pre = solve_pre_default(bsde, xi, reaction, bound)?;
    let post = Arc::try_unwrap(post).unwrap_or_else(|a| (*a).clone());
    assemble(pre, post, bound)
}

/// Post-default legs of the rounded default-time scheme at level `n`.
/// Leg `k` covers `[t_{k-1}, t_k]` with `t_k = min(k/n, T)` and terminal
/// value `zbar(t_k, x) + int_{t_k}^T m(s, x, 0) ds` at `t_k`; `full` is the
/// leg over `[0, T]` with terminal `zbar(T, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGridFamily {
    pub n: usize,
    pub grid_times: Vec<f64>,
    pub legs: Vec<SolutionSurface>,
    pub full: SolutionSurface,
    offsets: Vec<usize>,
}

impl TauGridFamily {
    /// Number of post-default surfaces, `ceil(n T) + 1`.
    pub fn count(&self) -> usize {
        self.legs.len() + 1
    }
}

/// Cauchy diagnostic `|Y_0^{2n} - Y_0^n|` at the spot.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CauchyDiag {
    pub n: usize,
    pub y0_n: f64,
    pub y0_2n: f64,
    pub diff: f64,
}

fn integral_m0(bsde: &JumpBsde, from: usize, x: f64) -> f64 {
    let ts = &bsde.grid.times;
    let g = &bsde.generator;
    (from..ts.len() - 1)
        .map(|j| 0.5 * (ts[j + 1] - ts[j]) * (g.m(ts[j], x, 0.0) + g.m(ts[j + 1], x, 0.0)))
        .sum()
}

/// Builds the family of post-default legs for level `n`.
pub fn build_tau_family(bsde: &JumpBsde, payment: &DefaultPayment, n: usize, exec: Execution) -> Result<TauGridFamily> {
    if n == 0 {
        return Err(Error::InvalidArgument("refinement level must be positive".into()));
    }
    let horizon = bsde.grid.horizon();
    let count = ((n as f64 * horizon) - 1e-9).ceil().max(1.0) as usize;
    let mut grid_times = Vec::with_capacity(count + 1);
    let mut idx = Vec::with_capacity(count + 1);
    grid_times.push(0.0);
    idx.push(0usize);
    for k in 1..=count {
        let t = (k as f64 / n as f64).min(horizon);
        let j = bsde
            .grid
            .time_index(t)
            .ok_or_else(|| Error::GridMismatch(format!("default-time grid point {t} is not a PDE time node")))?;
        grid_times.push(t);
        idx.push(j);
    }
    let legs = try_map_indexed(exec, count, |i| {
        let k = i + 1;
        let (from, to) = (idx[k - 1], idx[k]);
        let tk = grid_times[k];
        let payment = payment.clone();
        let tail: Vec<f64> = bsde.grid.states.iter().map(|&x| integral_m0(bsde, to, x)).collect();
        let states = bsde.grid.states.clone();
        let terminal: StateFn = Arc::new(move |x| {
            let i = states.partition_point(|&s| s < x).min(states.len() - 1);
            let tail = if states[i] == x { tail[i] } else { 0.0 };
            payment.value(tk, x, horizon) + tail
        });
        solve_post_window(bsde, &window_grid(&bsde.grid, from, to), terminal)
    })?;
    let payment_t = payment.clone();
    let full = solve_post_window(bsde, &bsde.grid, Arc::new(move |x| payment_t.value(horizon, x, horizon)))?;
    let offsets = idx[..count].to_vec();
    Ok(TauGridFamily { n, grid_times: grid_times[1..].to_vec(), legs, full, offsets })
}

/// Pre-default solve with the piecewise generator of level `n`, glued to
/// the family. The returned solution's `post` surface holds, at each time,
/// the leg of the segment containing that time.
pub fn solve_tau_n(
    bsde: &JumpBsde,
    xi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    payment: &DefaultPayment,
    n: usize,
    exec: Execution,
) -> Result<(JumpSolution, TauGridFamily)> {
    let family = build_tau_family(bsde, payment, n, exec)?;
    let horizon = bsde.grid.horizon();
    let kappa = sup_on_grid(&bsde.grid, &xi).max(
        bsde.grid
            .times
            .iter()
            .flat_map(|&t| bsde.grid.states.iter().map(move |&x| payment.value(t, x, horizon).abs()))
            .fold(0.0, f64::max),
    );
    let bound = bsde.box_for(kappa);
    for leg in family.legs.iter().chain([&family.full]) {
        check_box(leg, bound)?;
    }
    let legs: Vec<Arc<SolutionSurface>> = family.legs.iter().cloned().map(Arc::new).collect();
    let reaction = PreDefaultReaction {
        post: PostLookup::Segments { n, offsets: family.offsets.clone(), legs },
        generator: bsde.generator.clone(),
        intensity: bsde.intensity.clone(),
        theta: bsde.theta,
    };
    let pre = solve_pre_default(bsde, xi, reaction, bound)?;

    let (nt, nx) = pre.y.dim();
    let mut y = Array2::zeros((nt, nx));
    let mut z = Array2::zeros((nt, nx));
    for (j, &t) in bsde.grid.times.iter().enumerate() {
        let k = segment_of(t - 1e-12, n, family.legs.len());
        let leg = &family.legs[k - 1];
        let jj = j - family.offsets[k - 1];
        y.row_mut(j).assign(&leg.y.row(jj));
        z.row_mut(j).assign(&leg.z.row(jj));
    }
    let post = SolutionSurface::new(bsde.grid.times.clone(), bsde.grid.states.clone(), y, z, Regime::PostDefault)?;
    Ok((assemble(pre, post, bound)?, family))
}

/// Level-`n` solution together with the Cauchy gap to level `2n` at `s0`.
pub fn solve_time_dependent_compensation(
    bsde: &JumpBsde,
    xi: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static,
    payment: &DefaultPayment,
    n: usize,
    s0: f64,
    exec: Execution,
) -> Result<(JumpSolution, CauchyDiag)> {
    let (sol, _) = solve_tau_n(bsde, xi.clone(), payment, n, exec)?;
    let (fine, _) = solve_tau_n(bsde, xi, payment, 2 * n, exec)?;
    let y0_n = sol.y0(s0)?;
    let y0_2n = fine.y0(s0)?;
    Ok((sol, CauchyDiag { n, y0_n, y0_2n, diff: (y0_2n - y0_n).abs() }))
}

/// Cauchy gaps along a ladder of levels, with a flag telling whether they
/// are nonincreasing within `tol`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CauchyLadder {
    pub levels: Vec<usize>,
    pub y0: Vec<f64>,
    pub diffs: Vec<f64>,
    pub monotone: bool,
}

pub fn cauchy_ladder(
    bsde: &JumpBsde,
    xi: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static,
    payment: &DefaultPayment,
    levels: &[usize],
    s0: f64,
    tol: f64,
    exec: Execution,
) -> Result<CauchyLadder> {
    let mut all: Vec<usize> = levels.to_vec();
    if let Some(&last) = levels.last() {
        all.push(2 * last);
    }
    all.sort_unstable();
    all.dedup();
    let y0 = try_map_indexed(exec, all.len(), |i| {
        solve_tau_n(bsde, xi.clone(), payment, all[i], Execution::Sequential)?.0.y0(s0)
    })?;
    let at = |n: usize| y0[all.iter().position(|&m| m == n).unwrap()];
    let diffs: Vec<f64> = levels
        .iter()
        .map(|&n| if all.contains(&(2 * n)) { (at(2 * n) - at(n)).abs() } else { f64::NAN })
        .collect();
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0] + tol);
    let y0 = levels.iter().map(|&n| at(n)).collect();
    Ok(CauchyLadder { levels: levels.to_vec(), y0, diffs, monotone })
}

/// Discrete residuals
/// `r_i = Y_{t+dt} - Y_t - Z_t dW - U_t dM + f(t, Z_t, U_t) dt`
/// along one `P`-path, switching surfaces at the default time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub residuals: Vec<f64>,
    pub rms: f64,
}

pub fn bsde_residual(
    solution: &JumpSolution,
    generator: &dyn Generator,
    intensity: &Intensity,
    path: &Path,
) -> Result<ResidualSeries> {
    if path.measure != crate::mc::Measure::P {
        return Err(Error::InvalidArgument("residuals need paths simulated under P".into()));
    }
    let dt = path.dt;
    let n = path.n_steps();
    let k_tau = path.tau_index();
    let mut residuals = Vec::with_capacity(n);
    for i in 0..n {
        let (t, t1) = (path.time(i), path.time(i + 1));
        let (x, x1) = (path.s[i], path.s[i + 1]);
        let alive = path.alive_at(i);
        let alive1 = path.alive_at(i + 1);
        let y = solution.value(t, x, alive)?;
        let y1 = solution.value(t1, x1, alive1)?;
        let z = solution.z(t, x, alive)?;
        let r = if alive {
            let u = solution.jump(t, x)?;
            let k = intensity.rate(x);
            let jumped = if k_tau == Some(i + 1) { 1.0 } else { 0.0 };
            let dm = jumped - k * dt;
            let f = generator.f(t, x, z, u, DefaultState::Alive)?;
            y1 - y - z * path.dw[i] - u * dm + f * dt
        } else {
            let f = generator.f(t, x, z, 0.0, DefaultState::Defaulted)?;
            y1 - y - z * path.dw[i] + f * dt
        };
        residuals.push(r);
    }
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n.max(1) as f64).sqrt();
    Ok(ResidualSeries { residuals, rms })
}

/// Root mean square residual over every step of `paths`.
pub fn residual_rms(
    solution: &JumpSolution,
    generator: &dyn Generator,
    intensity: &Intensity,
    paths: &[Path],
    exec: Execution,
) -> Result<f64> {
    let sums = try_map_indexed(exec, paths.len(), |i| {
        let s = bsde_residual(solution, generator, intensity, &paths[i])?;
        Ok::<_, Error>((s.residuals.iter().map(|r| r * r).sum::<f64>(), s.residuals.len()))
    })?;
    let (ss, n) = sums.into_iter().fold((0.0, 0usize), |(a, b), (c, d)| (a + c, b + d));
    Ok((ss / n.max(1) as f64).sqrt())
}

const BUNDLE_MAGIC: [u8; 4] = *b"CBSJ";

/// Serialises a solution: magic `CBSJ`, version `u16` = 1, two reserved
/// bytes, the SHA-256 of the scenario text (32 bytes), the pre- and
/// post-default surfaces in the surface format, then `n_times`, `n_states`
/// (`u32`), `U` row-major as `f64`, `kappa` (`f64`) and a CRC-32 of all
/// preceding bytes. Little-endian throughout.
pub fn jump_solution_to_binary(solution: &JumpSolution, scenario: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&BUNDLE_MAGIC);
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&Sha256::digest(scenario));
    buf.extend_from_slice(&surface_to_binary(&solution.pre));
    buf.extend_from_slice(&surface_to_binary(&solution.post));
    let (nt, nx) = solution.u.dim();
    buf.extend_from_slice(&(nt as u32).to_le_bytes());
    buf.extend_from_slice(&(nx as u32).to_le_bytes());
    for v in solution.u.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&solution.kappa.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Inverse of [`jump_solution_to_binary`]; returns the solution and the
/// stored scenario hash.
pub fn jump_solution_from_binary(bytes: &[u8]) -> Result<(JumpSolution, [u8; 32])> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 40 + 4 || bytes[..4] != BUNDLE_MAGIC {
        return Err(bad("not a jump-solution bundle"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(bad("bundle checksum mismatch"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != 1 {
        return Err(bad("unsupported bundle version"));
    }
    let hash: [u8; 32] = bytes[8..40].try_into().unwrap();
    let mut at = 40;
    let (pre, used) = crate::pde::surface_from_prefix(&bytes[at..body])?;
    at += used;
    let (post, used) = crate::pde::surface_from_prefix(&bytes[at..body])?;
    at += used;
    if body < at + 8 {
        return Err(bad("truncated bundle"));
    }
    let nt = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let nx = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
    at += 8;
    if body != at + 8 * nt * nx + 8 {
        return Err(bad("bundle U block has the wrong size"));
    }
    let vals: Vec<f64> = bytes[at..at + 8 * nt * nx]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    at += 8 * nt * nx;
    let kappa = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let u = Array2::from_shape_vec((nt, nx), vals).map_err(|e| Error::Format(e.to_string()))?;
    Ok((JumpSolution { pre, post, u, kappa }, hash))
}

pub fn write_jump_solution(solution: &JumpSolution, scenario: &[u8], path: &FsPath) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&jump_solution_to_binary(solution, scenario))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{FnGenerator, PremiumGenerator};
    use crate::model::MarketParams;
    use crate::pde::{bs_put_closed_form, GridSpec};

    fn model() -> MarketModel {
        MarketModel::new(&MarketParams::scalar(0.05, 0.2, 100.0, 1.0)).unwrap()
    }

    fn bsde(gen: Arc<dyn Generator>, k: f64, ns: usize, nt: usize) -> JumpBsde {
        let grid = Grid::new(GridSpec::centred(100.0, 0.2, 1.0, ns, nt), 100.0, 1.0).unwrap();
        JumpBsde::new(grid, &model(), &DefaultSpec::intensity_only(Intensity::Constant(k), k), gen).unwrap()
    }

    fn premium_gen(k: f64) -> Arc<dyn Generator> {
        Arc::new(PremiumGenerator { theta: 0.25, eta: 1.0, intensity: Intensity::Constant(k) })
    }

    fn rk4_back(f: impl Fn(f64, f64) -> f64, y_end: f64, t_end: f64, t_start: f64, h: f64) -> f64 {
        let n = ((t_end - t_start) / h).round().max(1.0) as usize;
        let h = (t_end - t_start) / n as f64;
        let mut y = y_end;
        for i in (0..n).rev() {
            let t = t_start + (i + 1) as f64 * h;
            let k1 = f(t, y);
            let k2 = f(t - 0.5 * h, y - 0.5 * h * k1);
            let k3 = f(t - 0.5 * h, y - 0.5 * h * k2);
            let k4 = f(t - h, y - h * k3);
            y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        y
    }

    #[test]
    fn zero_compensation_zero_post() {
        let b = bsde(premium_gen(0.1), 0.1, 32, 16);
        let s = solve_post_default(&b, |_| 0.0).unwrap();
        assert!(s.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_compensation_is_flat() {
        let b = bsde(premium_gen(0.1), 0.1, 32, 16);
        let s = solve_post_default(&b, |_| 3.0).unwrap();
        assert!(s.y.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn put_post_leg_is_black_scholes() {
        let b = bsde(premium_gen(0.1), 0.1, 256, 128);
        let s = solve_post_default(&b, |x| (100.0 - x).max(0.0)).unwrap();
        let exact = bs_put_closed_form(0.0, 100.0, 100.0, 0.2, 1.0);
        assert!((s.value_at(0.0, 100.0).unwrap() / exact - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pre_default_reaction_examples() {
        let post = Arc::new(SolutionSurface::from_fn(
            &bsde(premium_gen(0.1), 0.1, 8, 4).grid,
            Regime::PostDefault,
            |_| 0.2,
            |_, _| 2.0,
            |_, _| 0.0,
        ));
        let l = FnGenerator::new(|_, _, z| 0.3 * z * z, |_, _, _| 0.0, |_, _, _| 0.0);
        let r = build_pre_default_generator(post.clone(), Arc::new(l), Intensity::Constant(0.1), 0.0);
        let node = Node { it: 1, ix: 3, t: 0.25, x: 100.0, step_mid: 0.125 };
        // gap zero: only l remains
        assert_eq!(r.value(&node, 2.0, 2.0).unwrap(), 1.2);
        // entropic j, eta = 1, k = 0.1, gap K = 0.5: 0.1 (e^K - 1)
        let r = build_pre_default_generator(post, premium_gen(0.1), Intensity::Constant(0.1), 0.25);
        let v = r.value(&node, 1.5, 0.0).unwrap();
        assert!((v - 0.1 * (0.5f64.exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn no_default_degeneracy() {
        let b = bsde(premium_gen(0.0), 0.0, 64, 32);
        let put = |x: f64| (100.0 - x).max(0.0);
        let sol = solve_jump(&b, put, put).unwrap();
        assert!(sol.max_abs_u() < 1e-12, "{}", sol.max_abs_u());
    }

    #[test]
    fn flat_pre_default_matches_ode() {
        // xi = 0, zeta = K, premium generator: y' = -(k/eta)(e^{eta (K - y)} - 1)
        let (kk, k) = (0.8, 0.1);
        let b = bsde(premium_gen(k), k, 8, 1000);
        let sol = solve_jump(&b, |_| 0.0, move |_| kk).unwrap();
        let oracle = rk4_back(|_, y| -k * ((kk - y).exp() - 1.0), 0.0, 1.0, 0.0, 1e-5);
        assert!((sol.y0(100.0).unwrap() - oracle).abs() < 1e-6);
        // flat U = K - y(t)
        let j = 500;
        assert!((sol.u[(j, 4)] - (kk - sol.pre.y[(j, 4)])).abs() < 1e-15);
    }

    #[test]
    fn assemble_rejects_mismatched_grids() {
        let a = bsde(premium_gen(0.1), 0.1, 8, 4);
        let b = bsde(premium_gen(0.1), 0.1, 8, 6);
        let s1 = SolutionSurface::from_fn(&a.grid, Regime::PreDefault, |_| 0.2, |_, _| 1.0, |_, _| 0.0);
        let s2 = SolutionSurface::from_fn(&b.grid, Regime::PostDefault, |_| 0.2, |_, _| 1.0, |_, _| 0.0);
        assert!(matches!(assemble(s1.clone(), s2, 1.0), Err(Error::GridMismatch(_))));
        let same = assemble(s1.clone(), s1, 1.0).unwrap();
        assert!(same.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tau_family_count_and_constant_payment() {
        let b = bsde(premium_gen(0.1), 0.1, 8, 64);
        let fam = build_tau_family(&b, &DefaultPayment::Constant(0.7), 8, Execution::Parallel).unwrap();
        assert_eq!(fam.count(), 9);
        let a = solve_tau_n(&b, |_| 0.0, &DefaultPayment::Constant(0.7), 4, Execution::Parallel).unwrap().0;
        let c = solve_tau_n(&b, |_| 0.0, &DefaultPayment::Constant(0.7), 16, Execution::Sequential).unwrap().0;
        assert_eq!(a.y0(100.0).unwrap(), c.y0(100.0).unwrap());
    }

    #[test]
    fn tau_family_rejects_off_grid_levels() {
        let b = bsde(premium_gen(0.1), 0.1, 8, 10);
        assert!(matches!(
            build_tau_family(&b, &DefaultPayment::Constant(1.0), 4, Execution::Sequential),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let b = bsde(premium_gen(0.1), 0.1, 16, 8);
        let sol = solve_jump(&b, |_| 0.0, |x| (100.0 - x).max(0.0)).unwrap();
        let bytes = jump_solution_to_binary(&sol, b"scenario");
        let (back, hash) = jump_solution_from_binary(&bytes).unwrap();
        assert_eq!(back, sol);
        assert_eq!(hash.as_slice(), Sha256::digest(b"scenario").as_slice());
        let mut broken = bytes.clone();
        broken[100] ^= 4;
        assert!(jump_solution_from_binary(&broken).is_err());
    }
}
