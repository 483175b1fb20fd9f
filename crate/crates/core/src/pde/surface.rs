use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::grid::{derivative, Grid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PreDefault,
    PostDefault,
    Premium,
}

impl Regime {
    pub fn code(self) -> u8 {
        match self {
            Regime::PreDefault => 0,
            Regime::PostDefault => 1,
            Regime::Premium => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Regime::PreDefault),
            1 => Some(Regime::PostDefault),
            2 => Some(Regime::Premium),
            _ => None,
        }
    }
}

/// Values `Y(t, x)` and controls `Z(t, x) = sigma(x) x dY/dx` on a
/// time-by-price grid. Rows are time levels (ascending), columns prices.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSurface {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
    pub regime: Regime,
}

impl SolutionSurface {
    pub fn new(times: Vec<f64>, states: Vec<f64>, y: Array2<f64>, z: Array2<f64>, regime: Regime) -> Result<Self> {
        let shape = (times.len(), states.len());
        if y.dim() != shape || z.dim() != shape {
            return Err(Error::GridMismatch(format!(
                "surface arrays {:?}/{:?} do not match grid {shape:?}",
                y.dim(),
                z.dim()
            )));
        }
        if times.len() < 2 || states.len() < 3 {
            return Err(Error::GridMismatch("surface needs at least 2 times and 3 states".into()));
        }
        Ok(SolutionSurface { times, states, y, z, regime })
    }

    /// Tabulates a known function and its price derivative on `grid`.
    pub fn from_fn(
        grid: &Grid,
        regime: Regime,
        vol: impl Fn(f64) -> f64,
        value: impl Fn(f64, f64) -> f64,
        dvalue_dx: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let (nt, nx) = (grid.n_times(), grid.n_states());
        let y = Array2::from_shape_fn((nt, nx), |(j, i)| value(grid.times[j], grid.states[i]));
        let z = Array2::from_shape_fn((nt, nx), |(j, i)| {
            let x = grid.states[i];
            vol(x) * x * dvalue_dx(grid.times[j], x)
        });
        SolutionSurface { times: grid.times.clone(), states: grid.states.clone(), y, z, regime }
    }

    /// Recomputes the `Z` row for time level `j` from `Y` by finite differences.
    pub(crate) fn z_row_from_y(states: &[f64], y_row: &[f64], vol: &dyn Fn(f64) -> f64) -> Vec<f64> {
        derivative(states, y_row)
            .into_iter()
            .zip(states)
            .map(|(d, &x)| vol(x) * x * d)
            .collect()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn same_grid(&self, other: &SolutionSurface) -> bool {
        self.times == other.times && self.states == other.states
    }

    pub fn max_abs(&self) -> f64 {
        self.y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().all(|v| v.is_finite()) && self.z.iter().all(|v| v.is_finite())
    }

    pub fn terminal_row(&self) -> Vec<f64> {
        self.y.row(self.times.len() - 1).to_vec()
    }

    fn time_bracket(&self, t: f64) -> Result<(usize, f64)> {
        let n = self.times.len();
        let (t0, t1) = (self.times[0], self.times[n - 1]);
        let slack = 1e-10 * (t1 - t0).abs().max(1.0);
        if !(t >= t0 - slack && t <= t1 + slack) {
            return Err(Error::OutOfGrid { t, x: f64::NAN });
        }
        let t = t.clamp(t0, t1);
        let dt = (t1 - t0) / (n - 1) as f64;
        let mut j = (((t - t0) / dt).floor() as usize).min(n - 2);
        // uniform in construction, but guard against rounding
        while j > 0 && self.times[j] > t {
            j -= 1;
        }
        while j + 1 < n - 1 && self.times[j + 1] < t {
            j += 1;
        }
        let w = ((t - self.times[j]) / (self.times[j + 1] - self.times[j])).clamp(0.0, 1.0);
        Ok((j, w))
    }

    fn space_bracket(&self, x: f64, t: f64) -> Result<usize> {
        let xs = &self.states;
        let n = xs.len();
        if !(x >= xs[0] && x <= xs[n - 1]) {
            return Err(Error::OutOfGrid { t, x });
        }
        let i = xs.partition_point(|&s| s <= x);
        Ok(i.saturating_sub(1).min(n - 2))
    }

    /// Cubic Hermite interpolation of one time row at `x`, with nodal slopes
    /// from three-point differences.
    fn hermite_row(&self, j: usize, i: usize, x: f64) -> f64 {
        let xs = &self.states;
        let row = self.y.row(j);
        let slope = |k: usize| -> f64 {
            let n = xs.len() - 1;
            if k == 0 {
                let w = super::grid::d1_lower(xs);
                w[0] * row[0] + w[1] * row[1] + w[2] * row[2]
            } else if k == n {
                let w = super::grid::d1_upper(xs);
                w[0] * row[n - 2] + w[1] * row[n - 1] + w[2] * row[n]
            } else {
                let w = super::grid::d1_weights(xs, k);
                w[0] * row[k - 1] + w[1] * row[k] + w[2] * row[k + 1]
            }
        };
        let h = xs[i + 1] - xs[i];
        let s = (x - xs[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * row[i] + h10 * h * slope(i) + h01 * row[i + 1] + h11 * h * slope(i + 1)
    }

    /// `Y(t, x)`: linear in time, cubic Hermite in price.
    pub fn value_at(&self, t: f64, x: f64) -> Result<f64> {
        let (j, w) = self.time_bracket(t)?;
        let i = self.space_bracket(x, t)?;
        let lo = self.hermite_row(j, i, x);
        if w == 0.0 {
            return Ok(lo);
        }
        let hi = self.hermite_row(j + 1, i, x);
        Ok((1.0 - w) * lo + w * hi)
    }

    /// `Z(t, x)` by bilinear interpolation.
    pub fn z_at(&self, t: f64, x: f64) -> Result<f64> {
        let (j, w) = self.time_bracket(t)?;
        let i = self.space_bracket(x, t)?;
        let xs = &self.states;
        let s = (x - xs[i]) / (xs[i + 1] - xs[i]);
        let row = |jj: usize| (1.0 - s) * self.z[(jj, i)] + s * self.z[(jj, i + 1)];
        let lo = row(j);
        if w == 0.0 {
            Ok(lo)
        } else {
            Ok((1.0 - w) * lo + w * row(j + 1))
        }
    }
}

/// Control `Z` at `(t, x)` by bilinear interpolation of the surface.
pub fn extract_z(surface: &SolutionSurface, t: f64, x: f64) -> Result<f64> {
    surface.z_at(t, x)
}
