use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stretching {
    Uniform,
    /// Nodes equally spaced in `ln x`.
    Log,
}

/// Discretisation settings. `n_space` and `n_time` count intervals, so the
/// grid has `n_space + 1` price nodes and `n_time + 1` time levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_space: usize,
    pub n_time: usize,
    pub stretching: Stretching,
    /// Implicitness weight in `[0, 1]`; 0.5 is Crank-Nicolson.
    pub theta_scheme: f64,
    /// Number of fully implicit steps taken first from the horizon.
    pub rannacher_steps: usize,
}

impl GridSpec {
    /// Log grid centred on `s0` in log-price, with
    /// `x_max = 5 s0 exp(3 sigma sqrt(T))` and `x_min = s0^2 / x_max`.
    pub fn centred(s0: f64, sigma: f64, horizon: f64, n_space: usize, n_time: usize) -> Self {
        let width = 5.0 * (3.0 * sigma.abs() * horizon.sqrt()).exp();
        GridSpec {
            x_min: s0 / width,
            x_max: s0 * width,
            n_space,
            n_time,
            stretching: Stretching::Log,
            theta_scheme: 0.5,
            rannacher_steps: 2,
        }
    }

    pub fn with_resolution(mut self, n_space: usize, n_time: usize) -> Self {
        self.n_space = n_space;
        self.n_time = n_time;
        self
    }

    pub fn validate(&self, s0: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Grid(m));
        if !(self.x_min < s0 && s0 < self.x_max) {
            return bad(format!("spot {s0} not strictly inside [{}, {}]", self.x_min, self.x_max));
        }
        if self.n_space < 4 || self.n_time < 4 {
            return bad(format!("need at least 4 intervals, got {}x{}", self.n_space, self.n_time));
        }
        if !(0.0..=1.0).contains(&self.theta_scheme) {
            return bad(format!("theta scheme weight {} outside [0, 1]", self.theta_scheme));
        }
        if self.stretching == Stretching::Log && !(self.x_min > 0.0) {
            return bad("log stretching needs x_min > 0".into());
        }
        if self.x_min < 0.0 {
            return bad("prices must be non-negative".into());
        }
        Ok(())
    }
}

/// Concrete time and price nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub spec: GridSpec,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

impl Grid {
    pub fn new(spec: GridSpec, s0: f64, horizon: f64) -> Result<Self> {
        spec.validate(s0)?;
        if !(horizon > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        let nt = spec.n_time;
        let times = (0..=nt)
            .map(|j| if j == nt { horizon } else { horizon * j as f64 / nt as f64 })
            .collect();
        let ns = spec.n_space;
        let states = match spec.stretching {
            Stretching::Uniform => (0..=ns)
                .map(|i| spec.x_min + (spec.x_max - spec.x_min) * i as f64 / ns as f64)
                .collect(),
            Stretching::Log => {
                let (a, b) = (spec.x_min.ln(), spec.x_max.ln());
                (0..=ns).map(|i| (a + (b - a) * i as f64 / ns as f64).exp()).collect()
            }
        };
        Ok(Grid { spec, times, states })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self) -> f64 {
        self.horizon() / self.spec.n_time as f64
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Same nodes, bit for bit.
    pub fn same_nodes(&self, other: &Grid) -> bool {
        self.times == other.times && self.states == other.states
    }

    /// Index of the time node equal to `t` (up to rounding), if any.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let j = (t / self.dt()).round();
        if j < 0.0 || j as usize >= self.times.len() {
            return None;
        }
        let j = j as usize;
        if (self.times[j] - t).abs() <= 1e-9 * self.horizon().max(1.0) {
            Some(j)
        } else {
            None
        }
    }
}

/// Three-point first-derivative weights at interior node `i`.
pub(crate) fn d1_weights(xs: &[f64], i: usize) -> [f64; 3] {
    let hm = xs[i] - xs[i - 1];
    let hp = xs[i + 1] - xs[i];
    [-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))]
}

/// Three-point second-derivative weights at interior node `i`.
pub(crate) fn d2_weights(xs: &[f64], i: usize) -> [f64; 3] {
    let hm = xs[i] - xs[i - 1];
    let hp = xs[i + 1] - xs[i];
    [2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp))]
}

/// One-sided three-point first derivative at the lower end, weights for
/// nodes 0, 1, 2.
pub(crate) fn d1_lower(xs: &[f64]) -> [f64; 3] {
    let h1 = xs[1] - xs[0];
    let h2 = xs[2] - xs[1];
    [-(2.0 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2))]
}

/// One-sided three-point first derivative at the upper end, weights for
/// nodes n-2, n-1, n.
pub(crate) fn d1_upper(xs: &[f64]) -> [f64; 3] {
    let n = xs.len() - 1;
    let h1 = xs[n] - xs[n - 1];
    let h2 = xs[n - 1] - xs[n - 2];
    [h1 / (h2 * (h1 + h2)), -(h1 + h2) / (h1 * h2), (2.0 * h1 + h2) / (h1 * (h1 + h2))]
}

/// First derivative of nodal values at every node (second order).
pub(crate) fn derivative(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len() - 1;
    let mut out = vec![0.0; xs.len()];
    let w = d1_lower(xs);
    out[0] = w[0] * ys[0] + w[1] * ys[1] + w[2] * ys[2];
    for i in 1..n {
        let w = d1_weights(xs, i);
        out[i] = w[0] * ys[i - 1] + w[1] * ys[i] + w[2] * ys[i + 1];
    }
    let w = d1_upper(xs);
    out[n] = w[0] * ys[n - 2] + w[1] * ys[n - 1] + w[2] * ys[n];
    out
}
