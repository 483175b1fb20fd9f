//! BSDE generators for exponential-utility hedging with a default jump.
//!
//! The pointwise objective is
//!
//! ```text
//! h(p, q, z, u) = -p.theta - q a + eta/2 |p + q c - z|^2
//!                 + (1 - D) k / eta * (exp(eta (u + q)) - 1 - eta (u + q))
//! ```
//!
//! and the generator is its minimum over the constraint set. Positions `q`
//! in a defaultable bond are evaluated but never optimised over (`C^2 = {0}`).

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{tie_prefers, ConstraintSet, Intensity, MarketModel};

/// Largest admissible `|eta (u + q)|` before `exp` is considered unsafe.
pub const EXPONENT_LIMIT: f64 = 700.0;

/// Whether default has already happened (`D_{s-} = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DefaultState {
    Alive,
    Defaulted,
}

impl DefaultState {
    pub fn alive(self) -> bool {
        self == DefaultState::Alive
    }
}

/// `exp(x) - 1 - x`, guarded against overflow.
pub fn jump_bracket(x: f64) -> Result<f64> {
    if !(x.abs() <= EXPONENT_LIMIT) {
        return Err(Error::ExponentGuard { exponent: x, limit: EXPONENT_LIMIT });
    }
    if x.abs() < 1e-5 {
        let x2 = x * x;
        Ok(x2 * (0.5 + x * (1.0 / 6.0 + x / 24.0)))
    } else {
        Ok(x.exp_m1() - x)
    }
}

/// `(1 - D) k / eta * (exp(eta u) - 1 - eta u)`.
pub fn entropic_jump(u: f64, k: f64, eta: f64, state: DefaultState) -> Result<f64> {
    if !state.alive() {
        return Ok(0.0);
    }
    Ok(k / eta * jump_bracket(eta * u)?)
}

/// Drift and volatility loadings `(a_t, c_t)` of the defaultable bond.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultableBond {
    pub a: f64,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HEvaluation {
    pub p: Vec<f64>,
    pub q: f64,
    pub value: f64,
}

/// Evaluates `h(s, p, q, z, u)` at one instant.
#[allow(clippy::too_many_arguments)]
pub fn h_value(
    model: &MarketModel,
    p: &[f64],
    q: f64,
    z: &[f64],
    u: f64,
    bond: Option<&DefaultableBond>,
    state: DefaultState,
    k_t: f64,
    eta: f64,
) -> Result<HEvaluation> {
    check_eta(eta)?;
    let d = model.dim_noise();
    if p.len() != d || z.len() != d {
        return Err(Error::InvalidArgument(format!("p and z must have length {d}")));
    }
    let theta = model.theta();
    let (a, c) = match bond {
        Some(b) if q != 0.0 => {
            if b.c.len() != d {
                return Err(Error::InvalidArgument("bond loading has wrong length".into()));
            }
            (b.a, Some(&b.c))
        }
        None if q != 0.0 => {
            return Err(Error::InvalidArgument("q != 0 requires defaultable bond coefficients".into()))
        }
        _ => (0.0, None),
    };
    let mut linear = 0.0;
    let mut quad = 0.0;
    for i in 0..d {
        linear += p[i] * theta[i];
        let ci = c.map_or(0.0, |c| c[i]);
        let r = p[i] + q * ci - z[i];
        quad += r * r;
    }
    let jump = entropic_jump(u + q, k_t, eta, state)?;
    let value = -linear - q * a + 0.5 * eta * quad + jump;
    Ok(HEvaluation { p: p.to_vec(), q, value })
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("risk aversion must be positive, got {eta}")))
    }
}

/// Minimises `h(., 0, z, u)` over `p in C^1`. Returns the minimum and the
/// minimiser `Pi_{C^1}(z + theta / eta)`.
pub fn f_min(
    model: &MarketModel,
    z: &[f64],
    u: f64,
    constraint: &ConstraintSet,
    state: DefaultState,
    k_t: f64,
    eta: f64,
) -> Result<HEvaluation> {
    check_eta(eta)?;
    constraint.check()?;
    let d = model.dim_noise();
    if z.len() != d {
        return Err(Error::InvalidArgument(format!("z must have length {d}")));
    }
    let theta = model.theta();
    let target: Vec<f64> = (0..d).map(|i| z[i] + theta[i] / eta).collect();
    let p_hat = if constraint.is_full() {
        if d == model.dim_assets() {
            target
        } else {
            project_row_space(model, &target)
        }
    } else {
        if d != model.dim_assets() {
            return Err(Error::Unsupported(
                "interval constraints need as many assets as noise factors".into(),
            ));
        }
        (0..d)
            .map(|i| {
                // h is separable across coordinates of p
                let mut best = f64::NAN;
                let mut best_v = f64::INFINITY;
                for cand in constraint.candidates(target[i]) {
                    let v = -cand * theta[i] + 0.5 * eta * (cand - z[i]) * (cand - z[i]);
                    let better = v < best_v - 1e-12 * (1.0 + v.abs())
                        || ((v - best_v).abs() <= 1e-12 * (1.0 + v.abs()) && tie_prefers(cand, best));
                    if better {
                        best = cand;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    };
    h_value(model, &p_hat, 0.0, z, u, None, state, k_t, eta)
}

fn project_row_space(model: &MarketModel, v: &[f64]) -> Vec<f64> {
    let sigma = model.sigma();
    let gram = sigma * sigma.transpose();
    let v = nalgebra::DVector::from_column_slice(v);
    // the gram matrix is positive definite for a validated model
    let coeffs = gram.cholesky().expect("validated model").solve(&(sigma * &v));
    (sigma.transpose() * coeffs).iter().cloned().collect()
}

/// Closed form of the minimum for `C^2 = {0}`, with `C^1` applied to each
/// coordinate of `z + theta / eta`.
pub fn f_closed_form(
    z: &[f64],
    u: f64,
    constraint: &ConstraintSet,
    theta: &[f64],
    k_t: f64,
    state: DefaultState,
    eta: f64,
) -> Result<f64> {
    check_eta(eta)?;
    if z.len() != theta.len() {
        return Err(Error::InvalidArgument("z and theta differ in length".into()));
    }
    let mut dist2 = 0.0;
    let mut tz = 0.0;
    let mut tt = 0.0;
    for i in 0..z.len() {
        dist2 += constraint.dist2(z[i] + theta[i] / eta);
        tz += theta[i] * z[i];
        tt += theta[i] * theta[i];
    }
    Ok(0.5 * eta * dist2 - tz - tt / (2.0 * eta) + entropic_jump(u, k_t, eta, state)?)
}

/// Scalar generator in the decomposed form
/// `f(t, x, z, u) = [l + j] (1 - D) + m D`.
pub trait Generator: Send + Sync {
    fn l(&self, t: f64, x: f64, z: f64) -> f64;
    fn m(&self, t: f64, x: f64, z: f64) -> f64;
    fn j(&self, t: f64, x: f64, u: f64) -> Result<f64>;

    fn dl_dz(&self, t: f64, x: f64, z: f64) -> f64 {
        let h = 1e-6 * (1.0 + z.abs());
        (self.l(t, x, z + h) - self.l(t, x, z - h)) / (2.0 * h)
    }

    fn dm_dz(&self, t: f64, x: f64, z: f64) -> f64 {
        let h = 1e-6 * (1.0 + z.abs());
        (self.m(t, x, z + h) - self.m(t, x, z - h)) / (2.0 * h)
    }

    fn dj_du(&self, t: f64, x: f64, u: f64) -> Result<f64> {
        let h = 1e-6 * (1.0 + u.abs());
        Ok((self.j(t, x, u + h)? - self.j(t, x, u - h)?) / (2.0 * h))
    }

    fn f(&self, t: f64, x: f64, z: f64, u: f64, state: DefaultState) -> Result<f64> {
        match state {
            DefaultState::Alive => Ok(self.l(t, x, z) + self.j(t, x, u)?),
            DefaultState::Defaulted => Ok(self.m(t, x, z)),
        }
    }
}

/// Generator of the exponential-utility problem with `C^2 = {0}`.
#[derive(Debug, Clone)]
pub struct UtilityGenerator {
    pub theta: f64,
    pub eta: f64,
    pub constraint: ConstraintSet,
    pub intensity: Intensity,
}

impl UtilityGenerator {
    fn g(&self, z: f64) -> f64 {
        let (th, eta) = (self.theta, self.eta);
        0.5 * eta * self.constraint.dist2(z + th / eta) - th * z - th * th / (2.0 * eta)
    }

    fn dg(&self, z: f64) -> f64 {
        let w = z + self.theta / self.eta;
        self.eta * (w - self.constraint.project(w)) - self.theta
    }
}

impl Generator for UtilityGenerator {
    fn l(&self, _t: f64, _x: f64, z: f64) -> f64 {
        self.g(z)
    }
    fn m(&self, _t: f64, _x: f64, z: f64) -> f64 {
        self.g(z)
    }
    fn j(&self, _t: f64, x: f64, u: f64) -> Result<f64> {
        entropic_jump(u, self.intensity.rate(x), self.eta, DefaultState::Alive)
    }
    fn dl_dz(&self, _t: f64, _x: f64, z: f64) -> f64 {
        self.dg(z)
    }
    fn dm_dz(&self, _t: f64, _x: f64, z: f64) -> f64 {
        self.dg(z)
    }
    fn dj_du(&self, _t: f64, x: f64, u: f64) -> Result<f64> {
        let e = self.eta * u;
        jump_bracket(e)?;
        Ok(self.intensity.rate(x) * e.exp_m1())
    }
}

/// Generator of the premium (difference) BSDE in the unconstrained case:
/// `-theta z + (1 - D) k / eta (exp(eta u) - 1 - eta u)`.
#[derive(Debug, Clone)]
pub struct PremiumGenerator {
    pub theta: f64,
    pub eta: f64,
    pub intensity: Intensity,
}

impl Generator for PremiumGenerator {
    fn l(&self, _t: f64, _x: f64, z: f64) -> f64 {
        -self.theta * z
    }
    fn m(&self, _t: f64, _x: f64, z: f64) -> f64 {
        -self.theta * z
    }
    fn j(&self, _t: f64, x: f64, u: f64) -> Result<f64> {
        entropic_jump(u, self.intensity.rate(x), self.eta, DefaultState::Alive)
    }
    fn dl_dz(&self, _t: f64, _x: f64, _z: f64) -> f64 {
        -self.theta
    }
    fn dm_dz(&self, _t: f64, _x: f64, _z: f64) -> f64 {
        -self.theta
    }
    fn dj_du(&self, _t: f64, x: f64, u: f64) -> Result<f64> {
        let e = self.eta * u;
        jump_bracket(e)?;
        Ok(self.intensity.rate(x) * e.exp_m1())
    }
}

pub type ZFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Generator assembled from user closures `l(t, x, z)`, `m(t, x, z)`, `j(t, x, u)`.
#[derive(Clone)]
pub struct FnGenerator {
    pub l: ZFn,
    pub m: ZFn,
    pub j: ZFn,
}

impl FnGenerator {
    pub fn new(
        l: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        m: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        j: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnGenerator { l: Arc::new(l), m: Arc::new(m), j: Arc::new(j) }
    }
}

impl Generator for FnGenerator {
    fn l(&self, t: f64, x: f64, z: f64) -> f64 {
        (self.l)(t, x, z)
    }
    fn m(&self, t: f64, x: f64, z: f64) -> f64 {
        (self.m)(t, x, z)
    }
    fn j(&self, t: f64, x: f64, u: f64) -> Result<f64> {
        Ok((self.j)(t, x, u))
    }
}

/// Constants of the (P1)/(P2) conditions.
#[derive(Clone)]
pub struct GeneratorBounds {
    /// Bound on `|l(., 0)|`, `|m(., 0)|`, `|j(., 0)|`.
    pub lambda: f64,
    /// Quadratic-growth Lipschitz constant of `l` and `m`.
    pub lipschitz: f64,
    /// Lipschitz constant of `j` on `[-K, K]`.
    pub lj: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Modulus `gamma(n)` of (P2).
    pub gamma: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// Sample points for the empirical (P1)/(P2) check.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    /// Radii `n` (and `K`) for the local Lipschitz checks on `[-n, n]`.
    pub radii: Vec<f64>,
    /// Points per radius.
    pub u_points: usize,
}

impl SampleGrid {
    pub fn uniform(ts: Vec<f64>, xs: Vec<f64>, z_max: f64, nz: usize, radii: Vec<f64>) -> Self {
        let zs = (0..nz).map(|i| -z_max + 2.0 * z_max * i as f64 / (nz - 1).max(1) as f64).collect();
        SampleGrid { ts, xs, zs, radii, u_points: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct P1P2Report {
    pub passed: bool,
    /// Largest observed `lhs / rhs` over every inequality checked.
    pub max_violation_ratio: f64,
    pub min_j: f64,
    pub violations: Vec<String>,
}

/// Samples the growth, boundedness, positivity and local Lipschitz
/// conditions on `grid`.
pub fn validate_p1_p2(
    gen: &dyn Generator,
    bounds: &GeneratorBounds,
    intensity: &Intensity,
    grid: &SampleGrid,
) -> P1P2Report {
    const SLACK: f64 = 1.0 + 1e-9;
    let worst = std::cell::Cell::new(0.0f64);
    let mut min_j = f64::INFINITY;
    let mut violations = Vec::new();
    let ratio = |lhs: f64, rhs: f64| -> f64 {
        let r = if rhs > 0.0 {
            lhs / rhs
        } else if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        worst.set(worst.get().max(r));
        r
    };

    for &t in &grid.ts {
        for &x in &grid.xs {
            let at0 = [gen.l(t, x, 0.0).abs(), gen.m(t, x, 0.0).abs()];
            let j0 = gen.j(t, x, 0.0).map(f64::abs).unwrap_or(f64::INFINITY);
            for v in at0.into_iter().chain([j0]) {
                if ratio(v, bounds.lambda) > SLACK {
                    violations.push(format!("bound at zero: {v} > Lambda = {} (t={t}, x={x})", bounds.lambda));
                }
            }
            for (a, &z) in grid.zs.iter().enumerate() {
                for &zp in &grid.zs[a + 1..] {
                    let lhs = (gen.l(t, x, z) - gen.l(t, x, zp)).abs() + (gen.m(t, x, z) - gen.m(t, x, zp)).abs();
                    let rhs = bounds.lipschitz * (1.0 + z.abs() + zp.abs()) * (z - zp).abs();
                    if ratio(lhs, rhs) > SLACK {
                        violations.push(format!("growth condition fails at z={z}, z'={zp} (t={t}, x={x})"));
                    }
                }
            }
            let k = intensity.rate(x);
            for &n in &grid.radii {
                let m = grid.u_points.max(2);
                let us: Vec<f64> = (0..m).map(|i| -n + 2.0 * n * i as f64 / (m - 1) as f64).collect();
                let js: Vec<Result<f64>> = us.iter().map(|&u| gen.j(t, x, u)).collect();
                for (i, ji) in js.iter().enumerate() {
                    let ji = match ji {
                        Ok(v) => *v,
                        Err(e) => {
                            violations.push(format!("j undefined at u={}: {e}", us[i]));
                            worst.set(f64::INFINITY);
                            continue;
                        }
                    };
                    min_j = min_j.min(ji);
                    for (jdx, jj) in js.iter().enumerate().skip(i + 1) {
                        let Ok(jj) = jj else { continue };
                        let du = (us[i] - us[jdx]).abs();
                        let lhs = (ji - jj).abs();
                        if ratio(lhs, (bounds.lj)(n) * du) > SLACK {
                            violations.push(format!("j not L_j({n})-Lipschitz between u={} and u={}", us[i], us[jdx]));
                        }
                        if ratio(lhs, (bounds.gamma)(n) * k.sqrt() * du) > SLACK {
                            violations.push(format!("(P2) modulus fails between u={} and u={}", us[i], us[jdx]));
                        }
                    }
                }
            }
        }
    }
    if min_j < 0.0 {
        violations.push(format!("j takes the negative value {min_j}"));
        worst.set(f64::INFINITY);
    }
    violations.sort();
    violations.dedup();
    P1P2Report { passed: violations.is_empty(), max_violation_ratio: worst.get(), min_j, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarketParams;
    use proptest::prelude::*;

    fn scalar_model(alpha: f64, sigma: f64) -> MarketModel {
        MarketModel::new(&MarketParams::scalar(alpha, sigma, 100.0, 1.0)).unwrap()
    }

    #[test]
    fn h_at_p_equal_z_is_linear() {
        let m = scalar_model(0.05, 0.2);
        let h = h_value(&m, &[0.7], 0.0, &[0.7], 0.0, None, DefaultState::Alive, 0.3, 2.0).unwrap();
        assert!((h.value - (-0.7 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn h_post_default_drops_jump() {
        let m = scalar_model(0.05, 0.2);
        let h = h_value(&m, &[0.3], 0.0, &[-0.2], 5.0, None, DefaultState::Defaulted, 0.3, 2.0).unwrap();
        let expect = -0.3 * 0.25 + 0.5 * 2.0 * 0.25;
        assert!((h.value - expect).abs() < 1e-15);
    }

    #[test]
    fn h_pure_jump_value() {
        let m = scalar_model(0.0, 0.2);
        let h = h_value(&m, &[0.0], 0.0, &[0.0], 1.0, None, DefaultState::Alive, 0.1, 1.0).unwrap();
        // 0.1 (e - 2)
        assert!((h.value - 0.071_828_182_845_904_5).abs() < 1e-15);
    }

    #[test]
    fn h_exponent_guard() {
        let m = scalar_model(0.0, 0.2);
        let e = h_value(&m, &[0.0], 0.0, &[0.0], 800.0, None, DefaultState::Alive, 0.1, 1.0).unwrap_err();
        assert!(matches!(e, Error::ExponentGuard { exponent, .. } if exponent == 800.0));
    }

    #[test]
    fn f_min_full_space() {
        let m = scalar_model(0.05, 0.2);
        let (z, u, k, eta) = (0.4, 0.3, 0.2, 1.5);
        let r = f_min(&m, &[z], u, &ConstraintSet::FullSpace, DefaultState::Alive, k, eta).unwrap();
        let th = 0.25;
        let expect = -th * z - th * th / (2.0 * eta) + k / eta * ((eta * u).exp() - 1.0 - eta * u);
        assert!((r.value - expect).abs() < 1e-14);
        assert!((r.p[0] - (z + th / eta)).abs() < 1e-15);
    }

    #[test]
    fn f_min_singleton() {
        let m = scalar_model(0.05, 0.2);
        let c = ConstraintSet::singleton(0.0).unwrap();
        let r = f_min(&m, &[0.4], 0.3, &c, DefaultState::Alive, 0.2, 1.5).unwrap();
        let h = h_value(&m, &[0.0], 0.0, &[0.4], 0.3, None, DefaultState::Alive, 0.2, 1.5).unwrap();
        assert_eq!(r.p, vec![0.0]);
        assert_eq!(r.value, h.value);
    }

    #[test]
    fn f_min_half_line_matches_grid_search() {
        // z + theta / eta = -0.3 with theta = 0.25, eta = 1
        let m = scalar_model(0.05, 0.2);
        let c = ConstraintSet::interval(0.0, f64::INFINITY).unwrap();
        let z = -0.55;
        let r = f_min(&m, &[z], 0.0, &c, DefaultState::Alive, 0.0, 1.0).unwrap();
        assert_eq!(r.p, vec![0.0]);
        let (mut best_p, mut best_v) = (f64::NAN, f64::INFINITY);
        for i in 0..=100_000 {
            let p = i as f64 * 1e-4;
            let v = h_value(&m, &[p], 0.0, &[z], 0.0, None, DefaultState::Alive, 0.0, 1.0).unwrap().value;
            if v < best_v {
                best_v = v;
                best_p = p;
            }
        }
        assert_eq!(best_p, 0.0);
        assert!((best_v - r.value).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let full = ConstraintSet::FullSpace;
        for &(z, u) in &[(0.0, 0.0), (1.3, -0.4), (-2.0, 3.0)] {
            let v = f_closed_form(&[z], u, &full, &[0.0], 0.0, DefaultState::Alive, 0.7).unwrap();
            assert!(v.abs() < 1e-15);
        }
        let v = f_closed_form(&[0.0], 0.0, &full, &[0.25], 0.0, DefaultState::Alive, 1.0).unwrap();
        assert!((v + 0.03125).abs() < 1e-15);
        let v = f_closed_form(&[0.0], 0.5, &full, &[0.0], 0.2, DefaultState::Alive, 1.0).unwrap();
        assert!((v - 0.2 * (0.5f64.exp() - 1.5)).abs() < 1e-15);
        assert!((v - 0.029_744_254_140_025_6).abs() < 1e-12);
    }

    #[test]
    fn no_default_generator_matches_g() {
        let gen = UtilityGenerator {
            theta: 0.25,
            eta: 2.0,
            constraint: ConstraintSet::interval(-1.0, 0.5).unwrap(),
            intensity: Intensity::Constant(0.0),
        };
        for &z in &[-3.0, -0.2, 0.0, 0.4, 2.0] {
            let f = gen.f(0.0, 100.0, z, 0.0, DefaultState::Alive).unwrap();
            let w = z + 0.25 / 2.0;
            let g = 0.5 * 2.0 * gen.constraint.dist2(w) - 0.25 * z - 0.0625 / 4.0;
            assert!((f - g).abs() < 1e-15);
        }
    }

    #[test]
    fn entropic_generator_passes_p1_p2() {
        let eta = 1.0;
        let k = 0.3;
        let gen = FnGenerator::new(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            move |_, _, u| k / eta * ((eta * u).exp() - 1.0 - eta * u),
        );
        let bounds = GeneratorBounds {
            lambda: 0.0,
            lipschitz: 0.0,
            lj: Arc::new(move |n| k * ((eta * n).exp() - 1.0)),
            gamma: Arc::new(move |n| k.sqrt() * ((eta * n).exp() - 1.0)),
        };
        let grid = SampleGrid::uniform(vec![0.0], vec![100.0], 1.0, 3, vec![2.0]);
        let r = validate_p1_p2(&gen, &bounds, &Intensity::Constant(k), &grid);
        assert!(r.passed, "{:?}", r.violations);
        // the Lipschitz constant k(e^2 - 1) is nearly attained near u = 2
        assert!(r.max_violation_ratio > 0.9 && r.max_violation_ratio <= 1.0 + 1e-9);
    }

    #[test]
    fn linear_l_passes_growth() {
        let th = 0.4;
        let gen = FnGenerator::new(move |_, _, z| th * z, move |_, _, z| -th * z, |_, _, _| 0.0);
        let bounds = GeneratorBounds {
            lambda: 0.0,
            lipschitz: 2.0 * th,
            lj: Arc::new(|_| 0.0),
            gamma: Arc::new(|_| 0.0),
        };
        let grid = SampleGrid::uniform(vec![0.0, 0.5], vec![90.0], 5.0, 21, vec![1.0]);
        assert!(validate_p1_p2(&gen, &bounds, &Intensity::Constant(0.1), &grid).passed);
    }

    #[test]
    fn negative_j_fails() {
        let gen = FnGenerator::new(|_, _, _| 0.0, |_, _, _| 0.0, |_, _, _| -1.0);
        let bounds = GeneratorBounds {
            lambda: 1.0,
            lipschitz: 1.0,
            lj: Arc::new(|_| 1.0),
            gamma: Arc::new(|_| 1.0),
        };
        let grid = SampleGrid::uniform(vec![0.0], vec![100.0], 1.0, 3, vec![1.0]);
        let r = validate_p1_p2(&gen, &bounds, &Intensity::Constant(0.1), &grid);
        assert!(!r.passed);
        assert_eq!(r.min_j, -1.0);
    }

    fn constraint_strategy() -> impl Strategy<Value = ConstraintSet> {
        prop_oneof![
            Just(ConstraintSet::FullSpace),
            Just(ConstraintSet::Singleton(0.0)),
            (-3.0f64..0.0, 0.0f64..3.0).prop_map(|(a, b)| ConstraintSet::Interval(a, b)),
            Just(ConstraintSet::Interval(0.0, f64::INFINITY)),
            Just(ConstraintSet::UnionOfIntervals(vec![(-4.0, -2.0), (-0.5, 0.25), (1.0, 1.5)])),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn minimiser_property(
            c in constraint_strategy(),
            z in -5.0f64..5.0,
            u in -3.0f64..3.0,
            eta in 0.1f64..3.0,
            k in 0.0f64..1.0,
            alpha in -0.2f64..0.2,
            p in -6.0f64..6.0,
        ) {
            let m = scalar_model(alpha, 0.2);
            let r = f_min(&m, &[z], u, &c, DefaultState::Alive, k, eta).unwrap();
            prop_assert!(c.contains(r.p[0]));
            let pp = c.project(p);
            let h = h_value(&m, &[pp], 0.0, &[z], u, None, DefaultState::Alive, k, eta).unwrap();
            prop_assert!(r.value <= h.value + 1e-12 * (1.0 + h.value.abs()));
        }

        #[test]
        fn closed_form_agrees_for_convex(
            c in constraint_strategy(),
            z in -5.0f64..5.0,
            u in -3.0f64..3.0,
            eta in 0.1f64..3.0,
            k in 0.0f64..1.0,
            alpha in -0.2f64..0.2,
            defaulted in any::<bool>(),
        ) {
            prop_assume!(c.is_convex());
            let state = if defaulted { DefaultState::Defaulted } else { DefaultState::Alive };
            let m = scalar_model(alpha, 0.2);
            let a = f_min(&m, &[z], u, &c, state, k, eta).unwrap().value;
            let b = f_closed_form(&[z], u, &c, &[m.theta()[0]], k, state, eta).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn jump_bracket_nonnegative(x in -700.0f64..700.0) {
            prop_assert!(jump_bracket(x).unwrap() >= 0.0);
        }

        #[test]
        fn generator_nondecreasing_in_intensity(
            z in -3.0f64..3.0, u in -3.0f64..3.0, k1 in 0.0f64..1.0, dk in 0.0f64..1.0,
        ) {
            let m = scalar_model(0.05, 0.2);
            let a = f_min(&m, &[z], u, &ConstraintSet::FullSpace, DefaultState::Alive, k1, 1.0).unwrap().value;
            let b = f_min(&m, &[z], u, &ConstraintSet::FullSpace, DefaultState::Alive, k1 + dk, 1.0).unwrap().value;
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn closed_form_agreement_ten_thousand_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let sets = [
            ConstraintSet::FullSpace,
            ConstraintSet::Singleton(0.0),
            ConstraintSet::Interval(-0.5, 2.0),
            ConstraintSet::Interval(0.0, f64::INFINITY),
        ];
        let m = scalar_model(0.07, 0.3);
        for i in 0..10_000 {
            let c = &sets[i % sets.len()];
            let z: f64 = rng.random_range(-5.0..5.0);
            let u: f64 = rng.random_range(-3.0..3.0);
            let eta: f64 = rng.random_range(0.05..4.0);
            let k: f64 = rng.random_range(0.0..1.0);
            let a = f_min(&m, &[z], u, c, DefaultState::Alive, k, eta).unwrap().value;
            let b = f_closed_form(&[z], u, c, &[m.theta()[0]], k, DefaultState::Alive, eta).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn multi_factor_full_space_projects_on_row_space() {
        let p = MarketParams {
            alpha: vec![0.1],
            sigma: vec![vec![0.3, 0.4]],
            s0: 100.0,
            horizon: 1.0,
            eig_bounds: (1e-6, 10.0),
        };
        let m = MarketModel::new(&p).unwrap();
        let r = f_min(&m, &[1.0, -1.0], 0.0, &ConstraintSet::FullSpace, DefaultState::Alive, 0.0, 1.0).unwrap();
        // p is a multiple of the single volatility row
        assert!((r.p[0] * 0.4 - r.p[1] * 0.3).abs() < 1e-14);
    }
}
