use std::sync::Arc;

use credit_bsde::mc::{simulate, Measure};
use credit_bsde::model::{ConstraintSet, DefaultSpec, Intensity, MarketModel, MarketParams, Payoff};
use credit_bsde::pde::{
    bs_put_closed_form, solve_terminal_value, BoundaryPolicy, FnReaction, Grid, GridSpec, Regime,
    TerminalValueProblem, Volatility,
};
use credit_bsde::premium::{defaultable_put_pipeline, indifference_premium, LowerBoundMethod, PremiumProblem};
use credit_bsde::Execution;
use proptest::prelude::*;

fn problem(k: f64, payoff: Payoff, constraint: ConstraintSet) -> PremiumProblem {
    PremiumProblem {
        model: MarketModel::new(&MarketParams::scalar(0.05, 0.2, 100.0, 1.0)).unwrap(),
        default: DefaultSpec::intensity_only(Intensity::Constant(k), k),
        payoff,
        constraint,
        grid: GridSpec::centred(100.0, 0.2, 1.0, 48, 48),
        exec: Execution::Sequential,
    }
}

fn premium(k: f64, eta: f64, payoff: Payoff, constraint: ConstraintSet) -> f64 {
    indifference_premium(&problem(k, payoff, constraint), eta, LowerBoundMethod::None).unwrap().premium
}

/// Quadratic in `z`, Lipschitz in `w`.
fn quadratic_problem(terminal: impl Fn(f64) -> f64 + Send + Sync + 'static) -> TerminalValueProblem {
    let reaction = FnReaction::new(|_, w, z| Ok(-0.5 * z * z - 0.1 * w)).with_partials(|_, _, z| Ok((-0.1, -z)));
    TerminalValueProblem::new(
        Volatility::Constant(0.2),
        Arc::new(reaction),
        BoundaryPolicy::zero_curvature(),
        terminal,
        Regime::PostDefault,
    )
}

#[test]
fn linear_put_converges_at_second_order() {
    let exact = bs_put_closed_form(0.0, 100.0, 100.0, 0.2, 1.0);
    let err: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&n| {
            let spec = GridSpec::centred(100.0, 0.2, 1.0, n, n);
            let g = Grid::new(spec, 100.0, 1.0).unwrap();
            let problem = TerminalValueProblem::new(
                Volatility::Constant(0.2),
                Arc::new(credit_bsde::pde::ZeroReaction),
                BoundaryPolicy::put(100.0, spec.x_min),
                |x| (100.0 - x).max(0.0),
                Regime::PostDefault,
            );
            (solve_terminal_value(&g, &problem).unwrap().value_at(0.0, 100.0).unwrap() - exact).abs()
        })
        .collect();
    assert!(err[0] / err[1] >= 2.5 && err[1] / err[2] >= 2.5, "{err:?}");
}

#[test]
fn premium_surface_vanishes_at_the_horizon() {
    let r = defaultable_put_pipeline(90.0, &problem(0.2, Payoff::Put { strike: 90.0 }, ConstraintSet::FullSpace), 0.5, LowerBoundMethod::None)
        .unwrap();
    assert!(r.v.terminal_row().iter().all(|&v| v == 0.0));
}

#[test]
fn repeated_solves_are_bit_identical() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/rebate.toml");
    let mut s = credit_bsde::scenario::Scenario::load(&path).unwrap();
    s.solver.n_space = 64;
    s.solver.n_time = 64;
    let a = credit_bsde::cli::solve_claim(&s).unwrap();
    let b = credit_bsde::cli::solve_claim(&s).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn comparison_principle(a in -2.0f64..2.0, b in 0.5f64..4.0, c in -1.0f64..1.0, d in 0.0f64..1.0, e in 0.0f64..0.5) {
        let g = Grid::new(GridSpec::centred(100.0, 0.2, 1.0, 48, 48), 100.0, 1.0).unwrap();
        let low = move |x: f64| a * (b * (x / 100.0).ln()).sin() + c;
        let high = move |x: f64| low(x) + d * (1.0 + (2.0 * (x / 100.0).ln()).cos()) + e;
        let y1 = solve_terminal_value(&g, &quadratic_problem(low)).unwrap();
        let y2 = solve_terminal_value(&g, &quadratic_problem(high)).unwrap();
        let worst = (&y1.y - &y2.y).iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        prop_assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn nonnegative_claim_has_nonnegative_premium(strike in 50.0f64..150.0, k in 0.0f64..0.5, eta in 0.01f64..3.0) {
        let p = premium(k, eta, Payoff::Put { strike }, ConstraintSet::FullSpace);
        prop_assert!(p >= -1e-9, "{p}");
    }

    #[test]
    fn premium_grows_with_intensity(k in 0.0f64..0.4, dk in 0.01f64..0.3, eta in 0.05f64..2.0, strike in 80.0f64..120.0) {
        let put = Payoff::Put { strike };
        let lo = premium(k, eta, put.clone(), ConstraintSet::FullSpace);
        let hi = premium(k + dk, eta, put, ConstraintSet::FullSpace);
        prop_assert!(lo >= 0.0 && hi > lo, "{lo} {hi}");
    }

    #[test]
    fn constant_claim_premium_is_bounded(c in 0.1f64..5.0, k in 0.01f64..0.5, eta in 0.05f64..2.0) {
        // between the risk-neutral loss and the full amount
        let p = premium(k, eta, Payoff::Constant(c), ConstraintSet::FullSpace);
        let expected_loss = c * (1.0 - (-k).exp());
        prop_assert!(p >= expected_loss - 1e-9 && p <= c, "{p} vs [{expected_loss}, {c}]");
    }

    #[test]
    fn constraints_are_irrelevant_for_a_constant(c in 0.1f64..3.0, k in 0.01f64..0.4, half in 0.1f64..2.0) {
        // Z vanishes for a deterministic claim, so the constraint costs the
        // same with and without default and cancels in the premium
        let free = premium(k, 1.0, Payoff::Constant(c), ConstraintSet::FullSpace);
        let boxed = premium(k, 1.0, Payoff::Constant(c), ConstraintSet::interval(-half, half).unwrap());
        prop_assert!((free - boxed).abs() < 1e-6, "{free} {boxed}");
    }

    #[test]
    fn simulation_is_execution_invariant(seed in 0u64..1000, n in 1usize..300) {
        let m = MarketModel::new(&MarketParams::scalar(0.05, 0.2, 100.0, 1.0)).unwrap();
        let d = DefaultSpec::intensity_only(Intensity::Constant(0.3), 0.3);
        let a = simulate(&m, &d, Measure::Q, seed, 0.05, n, Execution::Sequential).unwrap();
        let b = simulate(&m, &d, Measure::Q, seed, 0.05, n, Execution::Parallel).unwrap();
        prop_assert_eq!(a.s_terminal, b.s_terminal);
        prop_assert_eq!(a.tau, b.tau);
    }
}
