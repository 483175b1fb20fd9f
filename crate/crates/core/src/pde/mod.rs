//! One-dimensional finite-difference solvers for semilinear terminal-value
//! problems
//!
//! ```text
//! w_t + mu x w_x + 1/2 sigma(x)^2 x^2 w_xx + R(t, x, w, sigma(x) x w_x) = 0,  w(T, .) = g
//! ```
//!
//! discretised with a theta-scheme in time (Crank-Nicolson by default, with
//! a few fully implicit start-up steps) and three-point stencils on a
//! possibly non-uniform price grid. Each time step is solved by damped
//! Newton iteration.

mod closed_form;
mod export;
mod grid;
mod solver;
mod surface;

pub use closed_form::{bs_put_closed_form, bs_put_delta, norm_cdf, norm_pdf};
pub use export::{read_surface_binary, surface_from_binary, surface_to_binary, write_surface_binary, write_surface_csv, SURFACE_MAGIC};
pub use grid::{Grid, GridSpec, Stretching};
pub use solver::{
    solve_premium_pde, solve_terminal_value, Boundary, BoundaryPolicy, FnReaction, LinearZReaction, Node,
    Reaction, TerminalValueProblem, Volatility, ZeroReaction, NEWTON_TOLERANCE,
};
pub use surface::{extract_z, Regime, SolutionSurface};
pub(crate) use export::surface_from_prefix;
