use std::sync::Arc;

use crate::assembler::JumpSolution;
use crate::error::Result;
use crate::model::ConstraintSet;

use super::Path;

#[derive(Debug, Clone)]
pub enum StrategyKind {
    /// `p = Proj_C(scale * (Z + theta / eta))` with `Z` read from the
    /// solution's pre- or post-default surface.
    Optimal { solution: Arc<JumpSolution>, theta: f64, eta: f64, scale: f64 },
    Constant(f64),
    Zero,
}

/// Feedback rule for the amount `p` invested (in volatility units).
#[derive(Debug, Clone)]
pub struct StrategyRule {
    pub kind: StrategyKind,
    pub constraint: ConstraintSet,
}

impl StrategyRule {
    pub fn optimal(solution: Arc<JumpSolution>, theta: f64, eta: f64, constraint: ConstraintSet) -> Self {
        StrategyRule { kind: StrategyKind::Optimal { solution, theta, eta, scale: 1.0 }, constraint }
    }

    pub fn zero() -> Self {
        StrategyRule { kind: StrategyKind::Zero, constraint: ConstraintSet::FullSpace }
    }

    pub fn constant(p0: f64, constraint: ConstraintSet) -> Self {
        StrategyRule { kind: StrategyKind::Constant(p0), constraint }
    }

    /// Same rule with the unconstrained target multiplied by `factor`.
    pub fn perturbed(&self, factor: f64) -> Self {
        let kind = match &self.kind {
            StrategyKind::Optimal { solution, theta, eta, scale } => StrategyKind::Optimal {
                solution: solution.clone(),
                theta: *theta,
                eta: *eta,
                scale: scale * factor,
            },
            StrategyKind::Constant(p) => StrategyKind::Constant(p * factor),
            StrategyKind::Zero => StrategyKind::Zero,
        };
        StrategyRule { kind, constraint: self.constraint.clone() }
    }

    /// Position at `(t, x)`; always a point of the constraint set.
    pub fn evaluate(&self, t: f64, x: f64, alive: bool) -> Result<f64> {
        let target = match &self.kind {
            StrategyKind::Optimal { solution, theta, eta, scale } => scale * (solution.z(t, x, alive)? + theta / eta),
            StrategyKind::Constant(p) => *p,
            StrategyKind::Zero => 0.0,
        };
        Ok(self.constraint.project(target))
    }
}

/// Trading gain `G_i = sum_{j<i} p_j (theta dt + dW_j)` at every grid time
/// of the path.
pub fn wealth(path: &Path, strategy: &StrategyRule) -> Result<Vec<f64>> {
    let n = path.n_steps();
    let mut g = Vec::with_capacity(n + 1);
    g.push(0.0);
    let mut acc = 0.0;
    for i in 0..n {
        let p = strategy.evaluate(path.time(i), path.s[i], path.alive_at(i))?;
        debug_assert!(strategy.constraint.contains(p));
        acc += p * path.pricing_increment(i);
        g.push(acc);
    }
    Ok(g)
}
