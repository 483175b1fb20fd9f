use serde::Serialize;

use super::{mean_se, wealth, Measure, PathBundle, StrategyRule};
use crate::assembler::JumpSolution;
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::generator::EXPONENT_LIMIT;
use crate::model::{ClaimSpec, Payoff, Preferences};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Martingale,
    SupermartingaleStrict,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckpointStat {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub y0: f64,
    /// `U(v - Y_0)`.
    pub target: f64,
    pub checkpoints: Vec<CheckpointStat>,
    pub verdict: Verdict,
}

fn utility(eta: f64, x: f64) -> Result<f64> {
    let e = -eta * x;
    if !(e <= EXPONENT_LIMIT) {
        return Err(Error::ExponentGuard { exponent: e, limit: EXPONENT_LIMIT });
    }
    Ok(-e.exp())
}

/// Sample means of `U(v + G_t - Y_t)` at the checkpoints.
pub fn martingale_test(
    bundle: &PathBundle,
    strategy: &StrategyRule,
    solution: &JumpSolution,
    prefs: Preferences,
    checkpoints: &[f64],
    exec: Execution,
) -> Result<MartingaleReport> {
    let idx: Vec<usize> = checkpoints.iter().map(|&t| bundle.time_index(t)).collect::<Result<_>>()?;
    let (eta, v) = (prefs.eta, prefs.wealth);
    let y0 = solution.y0(bundle.s0())?;
    let target = utility(eta, v - y0)?;
    let rows = try_map_indexed(exec, bundle.n_paths, |i| {
        let path = bundle.path(i);
        let g = wealth(&path, strategy)?;
        idx.iter()
            .map(|&c| {
                let y = solution.value(path.time(c), path.s[c], path.alive_at(c))?;
                utility(eta, v + g[c] - y)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let checkpoints: Vec<CheckpointStat> = checkpoints
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (mean, se) = mean_se(&col);
            CheckpointStat { t, mean, se }
        })
        .collect();
    let verdict = classify(&checkpoints, target);
    Ok(MartingaleReport { y0, target, checkpoints, verdict })
}

fn classify(stats: &[CheckpointStat], target: f64) -> Verdict {
    // floor for rounding in the sample mean of identical values
    let floor = 1e-12 * target.abs();
    if stats.iter().all(|c| (c.mean - target).abs() <= 3.0 * c.se + floor) {
        return Verdict::Martingale;
    }
    let decreasing = stats.windows(2).all(|w| w[1].mean <= w[0].mean + 3.0 * w[1].se);
    match stats.last() {
        Some(last) if decreasing && last.mean < target - 3.0 * last.se => Verdict::SupermartingaleStrict,
        _ => Verdict::Inconclusive,
    }
}

/// Mean and standard error of `U(v + G_T + F)` with
/// `F = X1 1{tau > T} + X2 1{tau <= T}`.
pub fn utility_estimate(
    bundle: &PathBundle,
    strategy: &StrategyRule,
    claim: &ClaimSpec,
    prefs: Preferences,
    exec: Execution,
) -> Result<(f64, f64)> {
    let horizon = bundle.horizon;
    let vals = try_map_indexed(exec, bundle.n_paths, |i| {
        let path = bundle.path(i);
        let g = wealth(&path, strategy)?;
        let s_t = *path.s.last().unwrap();
        let s_tau = path.tau_index().map_or(s_t, |k| path.s[k]);
        let f = claim.realised(path.tau, s_tau, s_t, horizon);
        utility(prefs.eta, prefs.wealth + g.last().unwrap() + f)
    })?;
    Ok(mean_se(&vals))
}

/// Monte-Carlo estimate of `E^Q[xi(S_T) 1{tau <= T}]` and its standard error.
pub fn lower_bound_mc(bundle: &PathBundle, payoff: &Payoff) -> Result<(f64, f64)> {
    if bundle.measure != Measure::Q {
        return Err(Error::InvalidArgument("the lower bound is an expectation under Q".into()));
    }
    if bundle.n_paths < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 paths, got {}", bundle.n_paths)));
    }
    let vals: Vec<f64> = bundle
        .tau
        .iter()
        .zip(&bundle.s_terminal)
        .map(|(&tau, &s)| if tau <= bundle.horizon { payoff.value(s) } else { 0.0 })
        .collect();
    Ok(mean_se(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::{solve_jump, JumpBsde};
    use crate::generator::UtilityGenerator;
    use crate::mc::simulate;
    use crate::model::{ConstraintSet, DefaultSpec, Intensity, MarketModel, MarketParams};
    use crate::pde::{Grid, GridSpec};
    use std::sync::Arc;

    #[test]
    fn classify_cases() {
        let c = |m: f64| CheckpointStat { t: 0.0, mean: m, se: 0.01 };
        assert_eq!(classify(&[c(-1.0), c(-1.01)], -1.0), Verdict::Martingale);
        assert_eq!(classify(&[c(-1.0), c(-1.1), c(-1.2)], -1.0), Verdict::SupermartingaleStrict);
        assert_eq!(classify(&[c(-1.0), c(-0.8)], -1.0), Verdict::Inconclusive);
    }

    #[test]
    fn flat_scenario_zero_strategy_is_exact() {
        // theta = 0, k = 0, xi = 0: Y = 0 and U(v + G - Y) = U(v) on every path
        let m = MarketModel::new(&MarketParams::scalar(0.0, 0.2, 100.0, 1.0)).unwrap();
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.0), 0.0);
        let grid = Grid::new(GridSpec::centred(100.0, 0.2, 1.0, 64, 20), 100.0, 1.0).unwrap();
        let gen = UtilityGenerator {
            theta: 0.0,
            eta: 1.0,
            constraint: ConstraintSet::FullSpace,
            intensity: Intensity::Constant(0.0),
        };
        let bsde = JumpBsde::new(grid, &m, &d, Arc::new(gen)).unwrap();
        let sol = solve_jump(&bsde, |_| 0.0, |_| 0.0).unwrap();
        let b = simulate(&m, &d, Measure::P, 4, 0.05, 200, Execution::Parallel).unwrap();
        let prefs = Preferences::new(1.0, 0.5).unwrap();
        let r = martingale_test(&b, &StrategyRule::zero(), &sol, prefs, &[0.0, 0.5, 1.0], Execution::Parallel).unwrap();
        for c in &r.checkpoints {
            assert!((c.mean + (-0.5f64).exp()).abs() < 1e-14);
            assert!(c.se < 1e-15);
        }
        assert_eq!(r.verdict, Verdict::Martingale);
        assert!(martingale_test(&b, &StrategyRule::zero(), &sol, prefs, &[0.33], Execution::Parallel).is_err());
    }

    #[test]
    fn constant_claim_utility() {
        let m = MarketModel::new(&MarketParams::scalar(0.0, 0.2, 100.0, 1.0)).unwrap();
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.0), 0.0);
        let b = simulate(&m, &d, Measure::P, 4, 0.1, 100, Execution::Parallel).unwrap();
        let claim = ClaimSpec::new(Payoff::Constant(0.3), crate::model::Compensation::None, 0.3);
        let prefs = Preferences::new(2.0, 1.0).unwrap();
        let (mean, se) = utility_estimate(&b, &StrategyRule::zero(), &claim, prefs, Execution::Sequential).unwrap();
        assert!((mean + (-2.0f64 * 1.3).exp()).abs() < 1e-15);
        assert!(se < 1e-15);
    }

    #[test]
    fn lower_bound_constant_claim() {
        let m = MarketModel::new(&MarketParams::scalar(0.05, 0.2, 100.0, 1.0)).unwrap();
        let k = 0.1;
        let d = DefaultSpec::intensity_only(Intensity::Constant(k), k);
        let b = simulate(&m, &d, Measure::Q, 21, 0.01, 100_000, Execution::Parallel).unwrap();
        let (v, se) = lower_bound_mc(&b, &Payoff::Constant(2.0)).unwrap();
        let exact = 2.0 * (1.0 - (-k).exp());
        assert!((v - exact).abs() < 3.0 * se, "{v} vs {exact} ({se})");
        let small = simulate(&m, &d, Measure::Q, 21, 0.01, 99, Execution::Parallel).unwrap();
        assert!(lower_bound_mc(&small, &Payoff::Constant(2.0)).is_err());
    }
}
