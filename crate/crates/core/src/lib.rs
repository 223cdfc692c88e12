//! Solver laboratory for double-obstacle quasi-variational inequalities with
//! non-local drivers.
//!
//! The value function is squeezed between a lower barrier h and the
//! self-referential upper barrier M v (the best one-impulse value). The crate
//! provides:
//!
//! - [`model`]: problem data and validators for the structural assumptions
//!   (impulse non-expansion, no-free-loop, terminal consistency, Lipschitz
//!   and growth estimates);
//! - [`operators`]: the grid, interpolation, the intervention operator M,
//!   the penalty operator K^n and the discrete generator L;
//! - [`solver`]: backward theta-scheme solvers for the penalized and the
//!   direct double-obstacle problem, with residual diagnostics;
//! - [`fixedpoint`]: Picard iteration for drivers with an intervention term
//!   k * M g, with convergence traces;
//! - [`montecarlo`]: forward jump-diffusion simulation and probabilistic
//!   cross-checks of the solver output, plus a binomial pricing oracle;
//! - [`expr`], [`config`], [`cli`]: the model-file expression language,
//!   config parsing, and the command-line front end.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod expr;
pub mod fixedpoint;
pub mod model;
pub mod montecarlo;
pub mod operators;
pub mod solver;

/// Formats a double with 17 significant digits so output round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    if v == v.floor() && v.abs() < 1e15 && v.to_string().len() <= 17 {
        // short form for integers keeps small CSVs readable
        format!("{v}")
    } else {
        format!("{v:.16e}")
    }
}
