//! Market, default, constraint, claim and preference data.
//!
//! All coefficients are deterministic functions of time and the price of the
//! (first) risky asset, expressed in units of the riskless numeraire.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Raw market inputs, as read from a scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    /// Drift per asset (length k).
    pub alpha: Vec<f64>,
    /// Volatility rows, k rows of length d.
    pub sigma: Vec<Vec<f64>>,
    pub s0: f64,
    pub horizon: f64,
    /// Eigenvalue bounds `(eps, K)` required of `sigma * sigma^T`.
    pub eig_bounds: (f64, f64),
}

impl MarketParams {
    pub fn scalar(alpha: f64, sigma: f64, s0: f64, horizon: f64) -> Self {
        MarketParams {
            alpha: vec![alpha],
            sigma: vec![vec![sigma]],
            s0,
            horizon,
            eig_bounds: (1e-8, 1e8),
        }
    }

    fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        let k = self.sigma.len();
        if k == 0 {
            return Err(Error::Model("sigma has no rows".into()));
        }
        let d = self.sigma[0].len();
        if self.sigma.iter().any(|r| r.len() != d) {
            return Err(Error::Model("sigma rows have unequal length".into()));
        }
        Ok(DMatrix::from_fn(k, d, |i, j| self.sigma[i][j]))
    }
}

/// Validated market model. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    alpha: DVector<f64>,
    sigma: DMatrix<f64>,
    theta: DVector<f64>,
    s0: f64,
    horizon: f64,
}

impl MarketModel {
    pub fn new(params: &MarketParams) -> Result<Self> {
        let sigma = params.sigma_matrix()?;
        let (k, d) = sigma.shape();
        if params.alpha.len() != k {
            return Err(Error::Model(format!(
                "alpha has {} entries but sigma has {k} rows",
                params.alpha.len()
            )));
        }
        if d < k {
            return Err(Error::Model(format!("noise dimension {d} < asset count {k}")));
        }
        if let Some(name) = m1_m2_violation(params, &sigma) {
            return Err(Error::Model(name));
        }
        if !(params.s0 > 0.0 && params.s0.is_finite()) {
            return Err(Error::Model(format!("spot must be positive, got {}", params.s0)));
        }
        if !(params.horizon > 0.0 && params.horizon.is_finite()) {
            return Err(Error::Model(format!("horizon must be positive, got {}", params.horizon)));
        }
        let alpha = DVector::from_column_slice(&params.alpha);
        let theta = market_price_of_risk(&alpha, &sigma)?;
        Ok(MarketModel { alpha, sigma, theta, s0: params.s0, horizon: params.horizon })
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
    pub fn s0(&self) -> f64 {
        self.s0
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dim_assets(&self) -> usize {
        self.sigma.nrows()
    }
    pub fn dim_noise(&self) -> usize {
        self.sigma.ncols()
    }
    pub fn is_scalar(&self) -> bool {
        self.sigma.shape() == (1, 1)
    }

    /// Scalar volatility of a one-asset, one-factor model.
    pub fn scalar_vol(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.sigma[(0, 0)])
        } else {
            Err(Error::Unsupported(format!(
                "one-dimensional solver requires k = d = 1, got k = {}, d = {}",
                self.dim_assets(),
                self.dim_noise()
            )))
        }
    }

    pub fn scalar_theta(&self) -> Result<f64> {
        self.scalar_vol()?;
        Ok(self.theta[0])
    }

    pub fn scalar_drift(&self) -> Result<f64> {
        self.scalar_vol()?;
        Ok(self.alpha[0])
    }
}

/// `theta = sigma^T (sigma sigma^T)^{-1} alpha`.
pub fn market_price_of_risk(alpha: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    if alpha.len() != sigma.nrows() {
        return Err(Error::Model("alpha / sigma dimension mismatch".into()));
    }
    let gram = sigma * sigma.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Model("(M2) sigma sigma^T is singular".into()))?;
    let theta = sigma.transpose() * chol.solve(alpha);
    if theta.iter().all(|v| v.is_finite()) {
        Ok(theta)
    } else {
        Err(Error::Model("market price of risk is not finite".into()))
    }
}

fn m1_m2_violation(params: &MarketParams, sigma: &DMatrix<f64>) -> Option<String> {
    if params.alpha.iter().any(|a| !a.is_finite()) {
        return Some("(M1) alpha is not finite".into());
    }
    let (eps, big_k) = params.eig_bounds;
    if !(eps > 0.0 && eps < big_k) {
        return Some(format!("(M2) eigenvalue bounds must satisfy 0 < eps < K, got ({eps}, {big_k})"));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Some("(M2) sigma is not finite".into());
    }
    let gram = sigma * sigma.transpose();
    let eig = gram.symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo < eps || hi > big_k {
        return Some(format!(
            "(M2) eigenvalues of sigma sigma^T lie in [{lo:e}, {hi:e}], outside [{eps:e}, {big_k:e}]"
        ));
    }
    None
}

pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Default intensity `k(x)` as a function of the asset price.
#[derive(Clone)]
pub enum Intensity {
    Constant(f64),
    /// `below` when `x < threshold`, `above` otherwise.
    Step { threshold: f64, below: f64, above: f64 },
    Custom(StateFn),
}

impl Intensity {
    pub fn rate(&self, x: f64) -> f64 {
        match self {
            Intensity::Constant(k) => *k,
            Intensity::Step { threshold, below, above } => {
                if x < *threshold {
                    *below
                } else {
                    *above
                }
            }
            Intensity::Custom(f) => f(x),
        }
    }

    /// Multiplies the intensity level by `factor`.
    pub fn scaled(&self, factor: f64) -> Intensity {
        match self {
            Intensity::Constant(k) => Intensity::Constant(k * factor),
            Intensity::Step { threshold, below, above } => Intensity::Step {
                threshold: *threshold,
                below: below * factor,
                above: above * factor,
            },
            Intensity::Custom(f) => {
                let f = f.clone();
                Intensity::Custom(Arc::new(move |x| factor * f(x)))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Intensity::Constant(k) => *k == 0.0,
            Intensity::Step { below, above, .. } => *below == 0.0 && *above == 0.0,
            Intensity::Custom(_) => false,
        }
    }
}

impl fmt::Debug for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Intensity::Constant(k) => write!(f, "Constant({k})"),
            Intensity::Step { threshold, below, above } => {
                write!(f, "Step {{ threshold: {threshold}, below: {below}, above: {above} }}")
            }
            Intensity::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Default mechanism: an intensity part and an optional price barrier.
#[derive(Debug, Clone)]
pub struct DefaultSpec {
    pub intensity: Intensity,
    pub k_max: f64,
    /// Default is triggered when the price falls to or below this level.
    /// Only the path simulator supports it.
    pub barrier: Option<f64>,
}

impl DefaultSpec {
    pub fn intensity_only(intensity: Intensity, k_max: f64) -> Self {
        DefaultSpec { intensity, k_max, barrier: None }
    }

    /// Whether the compensator carries a predictable jump part.
    pub fn a_process_enabled(&self) -> bool {
        self.barrier.is_some()
    }

    pub fn rate(&self, x: f64) -> f64 {
        self.intensity.rate(x)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        DefaultSpec {
            intensity: self.intensity.scaled(factor),
            k_max: self.k_max * factor.max(1.0),
            barrier: self.barrier,
        }
    }

    pub(crate) fn require_no_barrier(&self) -> Result<()> {
        if self.a_process_enabled() {
            Err(Error::Unsupported(
                "barrier defaults are only supported by the path simulator; PDE assembly needs A = 0"
                    .into(),
            ))
        } else {
            Ok(())
        }
    }
}

/// Trading constraint `C^1` for the strategy component `p`, applied to each
/// coordinate of `p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ConstraintSet {
    FullSpace,
    Singleton(f64),
    Interval(f64, f64),
    UnionOfIntervals(Vec<(f64, f64)>),
}

impl ConstraintSet {
    pub fn singleton(point: f64) -> Result<Self> {
        let c = ConstraintSet::Singleton(point);
        c.check()?;
        Ok(c)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        let c = ConstraintSet::Interval(lo, hi);
        c.check()?;
        Ok(c)
    }

    pub fn union(intervals: Vec<(f64, f64)>) -> Result<Self> {
        let c = ConstraintSet::UnionOfIntervals(intervals);
        c.check()?;
        Ok(c)
    }

    /// Checks closedness, ordering, and that the set contains 0.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Constraint(m));
        match self {
            ConstraintSet::FullSpace => Ok(()),
            ConstraintSet::Singleton(p) => {
                if *p != 0.0 {
                    bad(format!("singleton {{{p}}} does not contain 0"))
                } else {
                    Ok(())
                }
            }
            ConstraintSet::Interval(lo, hi) => {
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    bad(format!("interval [{lo}, {hi}] is empty"))
                } else if *lo > 0.0 || *hi < 0.0 {
                    bad(format!("interval [{lo}, {hi}] does not contain 0"))
                } else {
                    Ok(())
                }
            }
            ConstraintSet::UnionOfIntervals(list) => {
                if list.is_empty() {
                    return bad("empty union of intervals".into());
                }
                for &(lo, hi) in list {
                    if lo.is_nan() || hi.is_nan() || lo > hi {
                        return bad(format!("interval [{lo}, {hi}] is empty"));
                    }
                }
                for w in list.windows(2) {
                    if w[0].1 >= w[1].0 {
                        return bad("union of intervals must be sorted and non-overlapping".into());
                    }
                }
                if !list.iter().any(|&(lo, hi)| lo <= 0.0 && 0.0 <= hi) {
                    return bad("union of intervals does not contain 0".into());
                }
                Ok(())
            }
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, ConstraintSet::FullSpace)
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, ConstraintSet::UnionOfIntervals(v) if v.len() > 1)
    }

    pub fn contains(&self, p: f64) -> bool {
        match self {
            ConstraintSet::FullSpace => p.is_finite(),
            ConstraintSet::Singleton(c) => p == *c,
            ConstraintSet::Interval(lo, hi) => *lo <= p && p <= *hi,
            ConstraintSet::UnionOfIntervals(list) => list.iter().any(|&(lo, hi)| lo <= p && p <= hi),
        }
    }

    /// Closest-point candidates: one per connected component.
    pub fn candidates(&self, x: f64) -> Vec<f64> {
        match self {
            ConstraintSet::FullSpace => vec![x],
            ConstraintSet::Singleton(c) => vec![*c],
            ConstraintSet::Interval(lo, hi) => vec![x.clamp(*lo, *hi)],
            ConstraintSet::UnionOfIntervals(list) => list.iter().map(|&(lo, hi)| x.clamp(lo, hi)).collect(),
        }
    }

    /// Euclidean projection. Ties go to the smaller `|p|`, then the smaller `p`.
    pub fn project(&self, x: f64) -> f64 {
        let mut best = f64::NAN;
        let mut best_d = f64::INFINITY;
        for c in self.candidates(x) {
            let d = (c - x).abs();
            if d < best_d || (d == best_d && tie_prefers(c, best)) {
                best = c;
                best_d = d;
            }
        }
        best
    }

    pub fn dist2(&self, x: f64) -> f64 {
        let p = self.project(x);
        (x - p) * (x - p)
    }
}

/// Deterministic tie-break between two argmin candidates.
pub(crate) fn tie_prefers(candidate: f64, incumbent: f64) -> bool {
    if incumbent.is_nan() {
        return true;
    }
    let (a, b) = (candidate.abs(), incumbent.abs());
    a < b || (a == b && candidate < incumbent)
}

/// Terminal payoff `X1(S_T)`.
#[derive(Clone)]
pub enum Payoff {
    Put { strike: f64 },
    /// Call spread capped at `cap` so the payoff stays bounded.
    CappedCall { strike: f64, cap: f64 },
    Constant(f64),
    Custom(StateFn),
}

impl Payoff {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Payoff::Put { strike } => (strike - x).max(0.0),
            Payoff::CappedCall { strike, cap } => (x - strike).clamp(0.0, *cap),
            Payoff::Constant(c) => *c,
            Payoff::Custom(f) => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Payoff::Constant(c) if *c == 0.0)
    }
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Put { strike } => write!(f, "Put {{ strike: {strike} }}"),
            Payoff::CappedCall { strike, cap } => write!(f, "CappedCall {{ strike: {strike}, cap: {cap} }}"),
            Payoff::Constant(c) => write!(f, "Constant({c})"),
            Payoff::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Payment `zbar(t, x)` received when default happens at `t` with price `x`.
#[derive(Clone)]
pub enum DefaultPayment {
    Constant(f64),
    /// `scale * exp(-rate * (T - t))`, flat in the price.
    ExpDecay { scale: f64, rate: f64 },
    Custom(TimeStateFn),
}

impl DefaultPayment {
    pub fn value(&self, t: f64, x: f64, horizon: f64) -> f64 {
        match self {
            DefaultPayment::Constant(c) => *c,
            DefaultPayment::ExpDecay { scale, rate } => scale * (-rate * (horizon - t)).exp(),
            DefaultPayment::Custom(f) => f(t, x),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        matches!(self, DefaultPayment::Constant(_))
    }
}

impl fmt::Debug for DefaultPayment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefaultPayment::Constant(c) => write!(f, "Constant({c})"),
            DefaultPayment::ExpDecay { scale, rate } => write!(f, "ExpDecay {{ scale: {scale}, rate: {rate} }}"),
            DefaultPayment::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// What the holder receives if default happens before the horizon.
#[derive(Debug, Clone)]
pub enum Compensation {
    None,
    /// A payoff of the terminal price, settled at the horizon.
    AtMaturity(Payoff),
    /// `zbar(tau, S_tau)`, fixed at the default time.
    AtDefault(DefaultPayment),
}

/// Defaultable claim `F = X1 1{tau > T} + X2 1{tau <= T}`.
#[derive(Debug, Clone)]
pub struct ClaimSpec {
    pub payoff: Payoff,
    pub compensation: Compensation,
    /// Sup-norm bound on both payoff and compensation.
    pub kappa: f64,
}

impl ClaimSpec {
    pub fn new(payoff: Payoff, compensation: Compensation, kappa: f64) -> Self {
        ClaimSpec { payoff, compensation, kappa }
    }

    pub fn terminal(&self, x: f64) -> f64 {
        self.payoff.value(x)
    }

    /// Compensation paid for a default at `tau` (with price `x_tau`) when the
    /// terminal price is `x_t`.
    pub fn compensation_value(&self, tau: f64, x_tau: f64, x_t: f64, horizon: f64) -> f64 {
        match &self.compensation {
            Compensation::None => 0.0,
            Compensation::AtMaturity(p) => p.value(x_t),
            Compensation::AtDefault(z) => z.value(tau, x_tau, horizon),
        }
    }

    /// Realised payoff along a path.
    pub fn realised(&self, tau: f64, x_tau: f64, x_t: f64, horizon: f64) -> f64 {
        if tau > horizon {
            self.terminal(x_t)
        } else {
            self.compensation_value(tau, x_tau, x_t, horizon)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preferences {
    pub eta: f64,
    pub wealth: f64,
}

impl Preferences {
    pub fn new(eta: f64, wealth: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Model(format!("risk aversion must be positive, got {eta}")));
        }
        Ok(Preferences { eta, wealth })
    }

    /// Exponential utility `U(x) = -exp(-eta x)`.
    pub fn utility(&self, x: f64) -> f64 {
        -(-self.eta * x).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub condition: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn violated(&self, condition: &str) -> bool {
        self.violations.iter().any(|v| v.condition == condition)
    }
}

/// Sampled state grid used for boundedness checks: log-spaced prices
/// around the spot, six standard deviations each way.
pub fn validation_samples(s0: f64, vol: f64, horizon: f64) -> (Vec<f64>, Vec<f64>) {
    let width = 6.0 * vol.abs().max(0.05) * horizon.max(1e-6).sqrt();
    let nx = 201;
    let xs = (0..nx)
        .map(|i| s0 * (-width + 2.0 * width * i as f64 / (nx - 1) as f64).exp())
        .collect();
    let nt = 11;
    let ts = (0..nt).map(|i| horizon * i as f64 / (nt - 1) as f64).collect();
    (xs, ts)
}

/// Checks (M1)/(M2), intensity bounds and claim boundedness. Never fails;
/// every violated condition is listed in the report.
pub fn validate_model(market: &MarketParams, default: &DefaultSpec, claim: &ClaimSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |condition: &str, detail: String| {
        violations.push(Violation { condition: condition.to_string(), detail })
    };

    let vol_scale = match market.sigma_matrix() {
        Ok(sigma) => {
            if sigma.nrows() != market.alpha.len() {
                push("dimensions", "alpha / sigma row count mismatch".into());
            } else if sigma.ncols() < sigma.nrows() {
                push("dimensions", "noise dimension smaller than asset count".into());
            } else if let Some(msg) = m1_m2_violation(market, &sigma) {
                let cond = if msg.starts_with("(M1)") { "M1" } else { "M2" };
                push(cond, msg);
            } else if let Err(e) =
                market_price_of_risk(&DVector::from_column_slice(&market.alpha), &sigma)
            {
                push("theta", e.to_string());
            }
            sigma.row(0).norm()
        }
        Err(e) => {
            push("dimensions", e.to_string());
            0.2
        }
    };
    if !(market.s0 > 0.0 && market.s0.is_finite()) {
        push("spot", format!("spot must be positive, got {}", market.s0));
    }
    if !(market.horizon > 0.0 && market.horizon.is_finite()) {
        push("horizon", format!("horizon must be positive, got {}", market.horizon));
    }

    let (xs, ts) = validation_samples(market.s0.max(1e-12), vol_scale, market.horizon.max(1e-12));
    let mut worst_neg: Option<f64> = None;
    let mut worst_big: Option<f64> = None;
    for &x in &xs {
        let k = default.rate(x);
        if !(k >= 0.0) {
            worst_neg = Some(worst_neg.map_or(k, |w: f64| w.min(k)));
        }
        if k > default.k_max {
            worst_big = Some(worst_big.map_or(k, |w: f64| w.max(k)));
        }
    }
    if let Some(k) = worst_neg {
        push("intensity_nonnegative", format!("intensity reaches {k} < 0"));
    }
    if let Some(k) = worst_big {
        push("intensity_bounded", format!("intensity reaches {k} > k_max = {}", default.k_max));
    }
    if let Some(a) = default.barrier {
        if !(a < market.s0) {
            push("barrier", format!("barrier {a} is not below the spot {}", market.s0));
        }
    }

    let kappa = claim.kappa;
    let mut worst_claim = 0.0f64;
    for &x in &xs {
        worst_claim = worst_claim.max(claim.terminal(x).abs());
        for &t in &ts {
            let c = match &claim.compensation {
                Compensation::None => 0.0,
                Compensation::AtMaturity(p) => p.value(x),
                Compensation::AtDefault(z) => z.value(t, x, market.horizon),
            };
            worst_claim = worst_claim.max(c.abs());
        }
    }
    if !(worst_claim <= kappa) {
        push("claim_bounded", format!("sampled claim reaches {worst_claim} > kappa = {kappa}"));
    }

    ValidationReport { passed: violations.is_empty(), violations }
}
