//! Path simulation of the asset and the default time, wealth of trading
//! strategies and Monte-Carlo verification statistics.
//!
//! Every path draws from its own ChaCha8 stream (`seed`, stream = path
//! index), so results do not depend on how paths are scheduled. A bundle
//! keeps per-path summaries and regenerates full paths on demand.

mod strategy;
mod verify;

pub use strategy::{wealth, StrategyKind, StrategyRule};
pub use verify::{
    lower_bound_mc, martingale_test, utility_estimate, CheckpointStat, MartingaleReport, Verdict,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::{DefaultSpec, MarketModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Physical measure: the asset drifts at `alpha`.
    P,
    /// Martingale measure: the drift is removed.
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultCause {
    Intensity,
    Barrier,
    None,
}

/// One regenerated path on the grid `0, dt, ..., T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub index: usize,
    pub dt: f64,
    pub measure: Measure,
    pub theta: f64,
    /// Prices at the `n_steps + 1` grid times.
    pub s: Vec<f64>,
    /// Brownian increments under `measure`.
    pub dw: Vec<f64>,
    /// Default time (a grid time) or `f64::INFINITY`.
    pub tau: f64,
    pub cause: DefaultCause,
}

impl Path {
    pub fn n_steps(&self) -> usize {
        self.dw.len()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Grid index of the default time, if default happened.
    pub fn tau_index(&self) -> Option<usize> {
        self.tau.is_finite().then(|| (self.tau / self.dt).round() as usize)
    }

    /// Whether the name is still alive at grid index `i`.
    pub fn alive_at(&self, i: usize) -> bool {
        self.tau_index().is_none_or(|k| i < k)
    }

    /// Increments of the `P`-Brownian motion shifted by `theta dt`, i.e.
    /// `dW^Q`, whichever measure the path was simulated under.
    pub fn pricing_increment(&self, i: usize) -> f64 {
        match self.measure {
            Measure::P => self.theta * self.dt + self.dw[i],
            Measure::Q => self.dw[i],
        }
    }

    /// The same path observed every `factor` steps: prices subsampled,
    /// increments summed, default time rounded up to the coarse grid. For
    /// constant coefficients the coarse path has exactly the law of a path
    /// simulated at the coarse step.
    pub fn coarsen(&self, factor: usize) -> Result<Path> {
        if factor == 0 || !self.n_steps().is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} steps by a factor {factor}",
                self.n_steps()
            )));
        }
        let dt = self.dt * factor as f64;
        let s = self.s.iter().step_by(factor).copied().collect();
        let dw = self.dw.chunks(factor).map(|c| c.iter().sum()).collect();
        let tau = self.tau_index().map_or(f64::INFINITY, |k| k.div_ceil(factor) as f64 * dt);
        Ok(Path { index: self.index, dt, measure: self.measure, theta: self.theta, s, dw, tau, cause: self.cause })
    }
}

#[derive(Debug, Clone)]
struct PathModel {
    s0: f64,
    mu: f64,
    sigma: f64,
    theta: f64,
    default: DefaultSpec,
}

/// Summaries of `n_paths` simulated paths.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub seed: u64,
    pub dt: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub measure: Measure,
    pub tau: Vec<f64>,
    pub cause: Vec<DefaultCause>,
    pub s_terminal: Vec<f64>,
    model: PathModel,
}

impl PartialEq for PathBundle {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.dt == other.dt
            && self.n_paths == other.n_paths
            && self.measure == other.measure
            && self.tau == other.tau
            && self.cause == other.cause
            && self.s_terminal == other.s_terminal
    }
}

impl PathBundle {
    pub fn s0(&self) -> f64 {
        self.model.s0
    }

    pub fn theta(&self) -> f64 {
        self.model.theta
    }

    /// Regenerates path `i` bit for bit.
    pub fn path(&self, i: usize) -> Path {
        generate(&self.model, self.seed, self.dt, self.n_steps, self.measure, i)
    }

    /// Grid index of a checkpoint time, or an error if it is off the grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.n_steps || (k * self.dt - t).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::InvalidArgument(format!("checkpoint {t} is not on the simulation grid (dt = {})", self.dt)));
        }
        Ok(k as usize)
    }

    pub fn default_fraction(&self) -> f64 {
        self.tau.iter().filter(|t| t.is_finite()).count() as f64 / self.n_paths as f64
    }
}

fn generate(m: &PathModel, seed: u64, dt: f64, n_steps: usize, measure: Measure, index: usize) -> Path {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let threshold: f64 = rng.sample(Exp1);
    let drift = match measure {
        Measure::P => m.mu,
        Measure::Q => 0.0,
    };
    let log_drift = (drift - 0.5 * m.sigma * m.sigma) * dt;
    let sq = dt.sqrt();
    let mut s = Vec::with_capacity(n_steps + 1);
    let mut dw = Vec::with_capacity(n_steps);
    s.push(m.s0);
    let mut hazard = 0.0;
    let mut tau = f64::INFINITY;
    let mut cause = DefaultCause::None;
    for i in 0..n_steps {
        let x = s[i];
        let w = sq * rng.sample::<f64, _>(StandardNormal);
        let next = x * (log_drift + m.sigma * w).exp();
        dw.push(w);
        s.push(next);
        if cause == DefaultCause::None {
            hazard += m.default.rate(x) * dt;
            let t_next = (i + 1) as f64 * dt;
            if hazard > threshold {
                tau = t_next;
                cause = DefaultCause::Intensity;
            } else if m.default.barrier.is_some_and(|a| next <= a) {
                tau = t_next;
                cause = DefaultCause::Barrier;
            }
        }
    }
    Path { index, dt, measure, theta: m.theta, s, dw, tau, cause }
}

/// Simulates `n_paths` log-Euler paths with exponential-threshold default
/// thinning and optional barrier default.
pub fn simulate(
    model: &MarketModel,
    default: &DefaultSpec,
    measure: Measure,
    seed: u64,
    dt: f64,
    n_paths: usize,
    exec: Execution,
) -> Result<PathBundle> {
    let horizon = model.horizon();
    if !(dt > 0.0 && dt <= horizon) {
        return Err(Error::InvalidArgument(format!("time step {dt} must lie in (0, T]")));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::InvalidArgument(format!("time step {dt} does not divide the horizon {horizon}")));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let n_steps = steps as usize;
    let dt = horizon / n_steps as f64;
    let pm = PathModel {
        s0: model.s0(),
        mu: model.scalar_drift()?,
        sigma: model.scalar_vol()?,
        theta: model.scalar_theta()?,
        default: default.clone(),
    };
    let summaries = map_indexed(exec, n_paths, |i| {
        let p = generate(&pm, seed, dt, n_steps, measure, i);
        (p.tau, p.cause, *p.s.last().unwrap())
    });
    let mut tau = Vec::with_capacity(n_paths);
    let mut cause = Vec::with_capacity(n_paths);
    let mut s_terminal = Vec::with_capacity(n_paths);
    for (t, c, s) in summaries {
        tau.push(t);
        cause.push(c);
        s_terminal.push(s);
    }
    Ok(PathBundle { seed, dt, n_paths, n_steps, horizon, measure, tau, cause, s_terminal, model: pm })
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Intensity, MarketParams};

    fn model(alpha: f64, sigma: f64) -> MarketModel {
        MarketModel::new(&MarketParams::scalar(alpha, sigma, 100.0, 1.0)).unwrap()
    }

    #[test]
    fn zero_volatility_keeps_price() {
        let pm = PathModel {
            s0: 100.0,
            mu: 0.0,
            sigma: 0.0,
            theta: 0.0,
            default: DefaultSpec::intensity_only(Intensity::Constant(0.0), 0.0),
        };
        for i in 0..20 {
            let p = generate(&pm, 1, 0.01, 100, Measure::P, i);
            assert!(p.s.iter().all(|&s| s == 100.0));
        }
    }

    #[test]
    fn reproducible_and_schedule_independent() {
        let m = model(0.05, 0.2);
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.3), 0.3);
        let a = simulate(&m, &d, Measure::P, 42, 0.01, 500, Execution::Sequential).unwrap();
        let b = simulate(&m, &d, Measure::P, 42, 0.01, 500, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = simulate(&m, &d, Measure::P, 43, 0.01, 500, Execution::Parallel).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.path(17).s.last().copied(), Some(a.s_terminal[17]));
    }

    #[test]
    fn q_paths_ignore_drift() {
        let d = DefaultSpec::intensity_only(Intensity::Step { threshold: 100.0, below: 0.4, above: 0.1 }, 0.4);
        let a = simulate(&model(0.05, 0.2), &d, Measure::Q, 9, 0.01, 200, Execution::Parallel).unwrap();
        let b = simulate(&model(0.30, 0.2), &d, Measure::Q, 9, 0.01, 200, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_times_on_grid_and_prices_positive() {
        let m = model(0.05, 0.4);
        let mut d = DefaultSpec::intensity_only(Intensity::Constant(0.5), 0.5);
        d.barrier = Some(80.0);
        let b = simulate(&m, &d, Measure::P, 3, 0.02, 300, Execution::Parallel).unwrap();
        let mut barrier = 0;
        for i in 0..b.n_paths {
            let p = b.path(i);
            assert!(p.s.iter().all(|&s| s > 0.0));
            if let Some(k) = p.tau_index() {
                assert!((k as f64 * b.dt - p.tau).abs() < 1e-12);
                if p.cause == DefaultCause::Barrier {
                    barrier += 1;
                    assert!(p.s[k] <= 80.0);
                    assert!(p.s[..k].iter().all(|&s| s > 80.0));
                }
            } else {
                assert_eq!(p.cause, DefaultCause::None);
            }
        }
        assert!(barrier > 0);
    }

    #[test]
    fn invalid_step_is_rejected() {
        let m = model(0.05, 0.2);
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.1), 0.1);
        assert!(simulate(&m, &d, Measure::P, 1, 0.3, 10, Execution::Sequential).is_err());
        assert!(simulate(&m, &d, Measure::P, 1, -0.1, 10, Execution::Sequential).is_err());
    }

    #[test]
    fn survival_matches_exponential_law() {
        let m = model(0.05, 0.2);
        let k = 0.2;
        let d = DefaultSpec::intensity_only(Intensity::Constant(k), k);
        let b = simulate(&m, &d, Measure::P, 11, 0.01, 200_000, Execution::Parallel).unwrap();
        let hits: Vec<f64> = b.tau.iter().map(|t| if t.is_finite() { 1.0 } else { 0.0 }).collect();
        let (p, se) = mean_se(&hits);
        let exact = 1.0 - (-k * 1.0f64).exp();
        assert!((p - exact).abs() < 3.0 * se, "{p} vs {exact} (se {se})");
    }

    #[test]
    fn hazard_estimate_matches_intensity() {
        // defaults per unit of time at risk
        let m = model(0.05, 0.2);
        let k = 0.7;
        let d = DefaultSpec::intensity_only(Intensity::Constant(k), k);
        let b = simulate(&m, &d, Measure::P, 5, 0.01, 100_000, Execution::Parallel).unwrap();
        let events = b.tau.iter().filter(|t| t.is_finite()).count() as f64;
        // the crossing step counts as a full step at risk
        let exposure: f64 = b.tau.iter().map(|&t| if t.is_finite() { t } else { 1.0 }).sum();
        let hazard = events / exposure;
        let se = events.sqrt() / exposure;
        // the discrete hazard of a step is 1 - exp(-k dt), per unit time
        let discrete = -(-(k * b.dt)).exp_m1() / b.dt;
        assert!((hazard - discrete).abs() < 3.0 * se, "{hazard} vs {discrete} (se {se})");
        assert!((hazard - k).abs() < 3.0 * se + k * k * b.dt);
    }

    #[test]
    fn coarsened_path_is_consistent() {
        let m = model(0.05, 0.2);
        let d = DefaultSpec::intensity_only(Intensity::Constant(2.0), 2.0);
        let fine = simulate(&m, &d, Measure::P, 4, 0.005, 50, Execution::Sequential).unwrap();
        for i in 0..fine.n_paths {
            let p = fine.path(i);
            let c = p.coarsen(2).unwrap();
            assert_eq!(c.n_steps(), 100);
            assert_eq!(c.s[100], p.s[200]);
            assert!((c.dw.iter().sum::<f64>() - p.dw.iter().sum::<f64>()).abs() < 1e-12);
            if let (Some(kf), Some(kc)) = (p.tau_index(), c.tau_index()) {
                assert!(kc * 2 >= kf && kc * 2 < kf + 2);
                assert!(c.alive_at(kc - 1));
            } else {
                assert_eq!(p.tau_index(), None);
                assert_eq!(c.tau_index(), None);
            }
        }
        assert!(fine.path(0).coarsen(3).is_err());
    }

    #[test]
    fn q_mean_is_spot() {
        let m = model(0.3, 0.2);
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.0), 0.0);
        let b = simulate(&m, &d, Measure::Q, 2, 0.05, 100_000, Execution::Parallel).unwrap();
        let (mean, se) = mean_se(&b.s_terminal);
        assert!((mean - 100.0).abs() < 3.0 * se);
    }
}
