//! TOML scenario files.
//!
//! ```toml
//! [market]
//! alpha = 0.05
//! sigma = 0.2
//! s0 = 100.0
//! horizon = 1.0
//!
//! [default]
//! intensity = { kind = "constant", rate = 0.1 }
//!
//! [claim]
//! payoff = { kind = "put", strike = 100.0 }
//!
//! [preferences]
//! eta = 1.0
//! ```
//!
//! Optional sections: `[constraint]` (`kind = "full" | "interval" |
//! "union"`), `[solver]` (grid, Monte-Carlo and sweep settings). Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Execution;
use crate::model::{
    validate_model, ClaimSpec, Compensation, ConstraintSet, DefaultPayment, DefaultSpec, Intensity, MarketModel,
    MarketParams, Payoff, Preferences,
};
use crate::pde::{GridSpec, Stretching};
use crate::premium::PremiumProblem;

/// Validation failure, naming the offending field (`section.key`).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ScenarioError {
    pub field: String,
    pub message: String,
}

impl ScenarioError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        ScenarioError { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub alpha: f64,
    pub sigma: f64,
    pub s0: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntensitySection {
    Constant { rate: f64 },
    Step { threshold: f64, below: f64, above: f64 },
}

impl Default for IntensitySection {
    fn default() -> Self {
        IntensitySection::Constant { rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultSection {
    #[serde(default)]
    pub intensity: IntensitySection,
    /// Defaults to the largest rate of the intensity.
    pub k_max: Option<f64>,
    /// Predictable barrier; simulator only.
    pub barrier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSection {
    #[default]
    Full,
    Interval { lower: f64, upper: f64 },
    Union { intervals: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSection {
    Put { strike: f64 },
    CappedCall { strike: f64, cap: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PaymentSection {
    Constant { value: f64 },
    ExpDecay { scale: f64, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompensationSection {
    #[default]
    None,
    AtMaturity { payoff: PayoffSection },
    AtDefault { payment: PaymentSection },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimSection {
    pub payoff: PayoffSection,
    #[serde(default)]
    pub compensation: CompensationSection,
    /// Bound on the claim; defaults to the sampled supremum.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferencesSection {
    pub eta: f64,
    pub wealth: f64,
}

impl Default for PreferencesSection {
    fn default() -> Self {
        PreferencesSection { eta: 1.0, wealth: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub n_space: usize,
    pub n_time: usize,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub stretching: Stretching,
    pub theta_scheme: f64,
    pub rannacher_steps: usize,
    /// Default-time grid resolution for compensation paid at default.
    pub tau_n: usize,
    pub paths: usize,
    pub seed: u64,
    pub dt: f64,
    pub etas: Vec<f64>,
    pub checkpoints: Vec<f64>,
    pub execution: Execution,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            n_space: 256,
            n_time: 256,
            x_min: None,
            x_max: None,
            stretching: Stretching::Log,
            theta_scheme: 0.5,
            rannacher_steps: 2,
            tau_n: 32,
            paths: 100_000,
            seed: 1,
            dt: 1.0 / 256.0,
            etas: vec![1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001],
            checkpoints: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub market: MarketSection,
    #[serde(default)]
    pub default: DefaultSection,
    #[serde(default)]
    pub constraint: ConstraintSection,
    pub claim: ClaimSection,
    #[serde(default)]
    pub preferences: PreferencesSection,
    #[serde(default)]
    pub solver: SolverSection,
}

fn positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::new(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::new(field, format!("must be nonnegative and finite, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::new(field, format!("must be finite, got {v}")))
    }
}

/// Pulls `section.key` out of a toml/serde message when it names a key.
fn field_of(message: &str) -> String {
    for marker in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "scenario".into()
}

fn payoff(p: &PayoffSection) -> Payoff {
    match *p {
        PayoffSection::Put { strike } => Payoff::Put { strike },
        PayoffSection::CappedCall { strike, cap } => Payoff::CappedCall { strike, cap },
        PayoffSection::Constant { value } => Payoff::Constant(value),
    }
}

fn check_payoff(field: &str, p: &PayoffSection) -> Result<(), ScenarioError> {
    match *p {
        PayoffSection::Put { strike } => nonnegative(&format!("{field}.strike"), strike),
        PayoffSection::CappedCall { strike, cap } => {
            nonnegative(&format!("{field}.strike"), strike)?;
            nonnegative(&format!("{field}.cap"), cap)
        }
        PayoffSection::Constant { value } => finite(&format!("{field}.value"), value),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = match e.span() {
                Some(span) if field_of(&msg) == "scenario" => text[span]
                    .split(['=', '\n'])
                    .next()
                    .map(|k| k.trim().trim_matches(['[', ']']).to_string())
                    .filter(|k| !k.is_empty())
                    .unwrap_or_else(|| "scenario".into()),
                _ => field_of(&msg),
            };
            ScenarioError { field, message: msg }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::new("scenario", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml_string().as_bytes()).into()
    }

    /// Field-by-field checks in file order; the first failure is returned.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let m = &self.market;
        finite("market.alpha", m.alpha)?;
        positive("market.sigma", m.sigma)?;
        positive("market.s0", m.s0)?;
        positive("market.horizon", m.horizon)?;

        match self.default.intensity {
            IntensitySection::Constant { rate } => nonnegative("default.intensity.rate", rate)?,
            IntensitySection::Step { threshold, below, above } => {
                positive("default.intensity.threshold", threshold)?;
                nonnegative("default.intensity.below", below)?;
                nonnegative("default.intensity.above", above)?;
            }
        }
        if let Some(k) = self.default.k_max {
            nonnegative("default.k_max", k)?;
        }
        if let Some(a) = self.default.barrier {
            positive("default.barrier", a)?;
            if a >= m.s0 {
                return Err(ScenarioError::new("default.barrier", "must lie below market.s0"));
            }
        }

        self.constraint_set()?;

        check_payoff("claim.payoff", &self.claim.payoff)?;
        match &self.claim.compensation {
            CompensationSection::None => {}
            CompensationSection::AtMaturity { payoff } => check_payoff("claim.compensation.payoff", payoff)?,
            CompensationSection::AtDefault { payment } => match *payment {
                PaymentSection::Constant { value } => finite("claim.compensation.payment.value", value)?,
                PaymentSection::ExpDecay { scale, rate } => {
                    finite("claim.compensation.payment.scale", scale)?;
                    nonnegative("claim.compensation.payment.rate", rate)?;
                }
            },
        }
        if let Some(k) = self.claim.kappa {
            nonnegative("claim.kappa", k)?;
        }

        positive("preferences.eta", self.preferences.eta)?;
        finite("preferences.wealth", self.preferences.wealth)?;

        let s = &self.solver;
        if s.n_space < 4 {
            return Err(ScenarioError::new("solver.n_space", "needs at least 4 intervals"));
        }
        if s.n_time < 1 {
            return Err(ScenarioError::new("solver.n_time", "needs at least 1 interval"));
        }
        if let Some(x) = s.x_min {
            positive("solver.x_min", x)?;
        }
        if let Some(x) = s.x_max {
            positive("solver.x_max", x)?;
        }
        if !(0.0..=1.0).contains(&s.theta_scheme) {
            return Err(ScenarioError::new("solver.theta_scheme", "must lie in [0, 1]"));
        }
        if s.tau_n < 1 {
            return Err(ScenarioError::new("solver.tau_n", "must be at least 1"));
        }
        positive("solver.dt", s.dt)?;
        if s.etas.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(ScenarioError::new("solver.etas", "every eta must be positive"));
        }
        if s.checkpoints.iter().any(|&t| !(0.0..=m.horizon).contains(&t)) {
            return Err(ScenarioError::new("solver.checkpoints", "checkpoints must lie in [0, horizon]"));
        }
        self.grid_spec()
            .validate(m.s0)
            .map_err(|e| ScenarioError::new("solver", e.to_string()))?;

        let report = validate_model(&self.market_params(), &self.default_spec(), &self.claim_spec());
        if let Some(v) = report.violations.first() {
            let field = match v.condition.as_str() {
                "M1" | "M2" | "theta" => "market.sigma",
                "intensity_nonnegative" => "default.intensity",
                "intensity_bounded" => "default.k_max",
                "barrier" => "default.barrier",
                "claim_bounded" => "claim.kappa",
                _ => "market",
            };
            return Err(ScenarioError::new(field, v.detail.clone()));
        }
        Ok(())
    }

    pub fn market_params(&self) -> MarketParams {
        let m = &self.market;
        MarketParams::scalar(m.alpha, m.sigma, m.s0, m.horizon)
    }

    pub fn model(&self) -> crate::Result<MarketModel> {
        MarketModel::new(&self.market_params())
    }

    pub fn intensity(&self) -> Intensity {
        match self.default.intensity {
            IntensitySection::Constant { rate } => Intensity::Constant(rate),
            IntensitySection::Step { threshold, below, above } => Intensity::Step { threshold, below, above },
        }
    }

    pub fn default_spec(&self) -> DefaultSpec {
        let k_max = self.default.k_max.unwrap_or(match self.default.intensity {
            IntensitySection::Constant { rate } => rate,
            IntensitySection::Step { below, above, .. } => below.max(above),
        });
        DefaultSpec { intensity: self.intensity(), k_max, barrier: self.default.barrier }
    }

    pub fn constraint_set(&self) -> Result<ConstraintSet, ScenarioError> {
        let c = match &self.constraint {
            ConstraintSection::Full => Ok(ConstraintSet::FullSpace),
            ConstraintSection::Interval { lower, upper } => ConstraintSet::interval(*lower, *upper),
            ConstraintSection::Union { intervals } => {
                ConstraintSet::union(intervals.iter().map(|&[a, b]| (a, b)).collect())
            }
        };
        c.map_err(|e| ScenarioError::new("constraint", e.to_string()))
    }

    pub fn payoff(&self) -> Payoff {
        payoff(&self.claim.payoff)
    }

    pub fn compensation(&self) -> Compensation {
        match &self.claim.compensation {
            CompensationSection::None => Compensation::None,
            CompensationSection::AtMaturity { payoff: p } => Compensation::AtMaturity(payoff(p)),
            CompensationSection::AtDefault { payment } => Compensation::AtDefault(match *payment {
                PaymentSection::Constant { value } => DefaultPayment::Constant(value),
                PaymentSection::ExpDecay { scale, rate } => DefaultPayment::ExpDecay { scale, rate },
            }),
        }
    }

    /// Claim with `kappa` defaulting to the exact supremum of the payoff and
    /// compensation over positive prices.
    pub fn claim_spec(&self) -> ClaimSpec {
        let sup = |p: &PayoffSection| match *p {
            PayoffSection::Put { strike } => strike,
            PayoffSection::CappedCall { cap, .. } => cap,
            PayoffSection::Constant { value } => value.abs(),
        };
        let kappa = self.claim.kappa.unwrap_or_else(|| {
            let comp = match &self.claim.compensation {
                CompensationSection::None => 0.0,
                CompensationSection::AtMaturity { payoff } => sup(payoff),
                CompensationSection::AtDefault { payment } => match *payment {
                    PaymentSection::Constant { value } => value.abs(),
                    PaymentSection::ExpDecay { scale, .. } => scale.abs(),
                },
            };
            sup(&self.claim.payoff).max(comp)
        });
        ClaimSpec::new(self.payoff(), self.compensation(), kappa)
    }

    pub fn preferences(&self) -> Preferences {
        Preferences { eta: self.preferences.eta, wealth: self.preferences.wealth }
    }

    pub fn grid_spec(&self) -> GridSpec {
        let m = &self.market;
        let s = &self.solver;
        let mut g = GridSpec::centred(m.s0, m.sigma, m.horizon, s.n_space, s.n_time);
        if let Some(x) = s.x_min {
            g.x_min = x;
        }
        if let Some(x) = s.x_max {
            g.x_max = x;
        }
        g.stretching = s.stretching;
        g.theta_scheme = s.theta_scheme;
        g.rannacher_steps = s.rannacher_steps;
        g
    }

    pub fn premium_problem(&self) -> crate::Result<PremiumProblem> {
        Ok(PremiumProblem {
            model: self.model()?,
            default: self.default_spec(),
            payoff: self.payoff(),
            constraint: self.constraint_set().map_err(|e| crate::Error::Constraint(e.message))?,
            grid: self.grid_spec(),
            exec: self.solver.execution,
        })
    }
}
