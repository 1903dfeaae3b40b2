//! Backward SDEs with jumps: closed-form linear solver, regression Monte
//! Carlo for general drivers, an exact tree oracle and comparison checks.

mod claim;
mod driver;
mod linear;
mod scheme;
mod tree;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use claim::Claim;
pub use driver::{Driver, DriverInput, LinearDriverParams};
pub use linear::solve_linear;
pub use scheme::solve_regression;
pub use tree::{compare_trees, Branch, Tree, TreeSolution};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Regression,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Total degree of the polynomial regression basis.
    pub basis_degree: u32,
    /// Keep the full `(Y, Z, K)` arrays; otherwise only `Y(0)` statistics survive.
    pub store_paths: bool,
    /// Grid index of a deterministic stopping time; the claim is then the
    /// value at that step and the driver is switched off afterwards.
    pub stop_step: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { basis_degree: 3, store_paths: true, stop_step: None }
    }
}

/// Per-path samples of `(Y, Z, K)` on the grid, stored `[step][path]`
/// (`[step][path][atom]` for `K`).
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub method: Method,
    pub y0: f64,
    /// Standard error of `Y(0)` from the pathwise representation of the solution.
    pub y0_std_error: f64,
    /// Set when a one-path ensemble forced the pathwise identity in place of regression.
    pub degenerate: bool,
    /// Largest fixed-point increment left after the implicit step.
    pub fixed_point_residual: f64,
    pub(crate) grid: Vec<f64>,
    pub(crate) n_paths: usize,
    pub(crate) n_atoms: usize,
    pub(crate) y: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) y0_samples: Vec<f64>,
}

impl BsdeSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// Per-path samples whose mean estimates `Y(0)`; their spread gives `y0_std_error`.
    pub fn y0_samples(&self) -> &[f64] {
        &self.y0_samples
    }

    pub fn has_paths(&self) -> bool {
        !self.y.is_empty()
    }

    #[inline]
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[step * self.n_paths + path]
    }

    #[inline]
    pub fn z(&self, path: usize, step: usize) -> f64 {
        self.z[step * self.n_paths + path]
    }

    #[inline]
    pub fn k(&self, path: usize, step: usize, atom: usize) -> f64 {
        self.k[(step * self.n_paths + path) * self.n_atoms + atom]
    }

    /// `Y` across paths at one step. Panics when paths were not stored.
    pub fn y_step(&self, step: usize) -> &[f64] {
        &self.y[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z_step(&self, step: usize) -> &[f64] {
        &self.z[step * self.n_paths..(step + 1) * self.n_paths]
    }

    /// One row per path-step: `path,t,Y,Z,K_0,...`. `Z` and `K` are empty on the last step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "path,t,Y,Z")?;
        for j in 0..self.n_atoms {
            write!(out, ",K_{j}")?;
        }
        writeln!(out)?;
        if !self.has_paths() {
            return Ok(());
        }
        let n = self.n_steps();
        for p in 0..self.n_paths {
            for s in 0..=n {
                write!(out, "{p},{:.16e},{:.16e}", self.grid[s], self.y(p, s))?;
                if s < n {
                    write!(out, ",{:.16e}", self.z(p, s))?;
                    for j in 0..self.n_atoms {
                        write!(out, ",{:.16e}", self.k(p, s, j))?;
                    }
                } else {
                    write!(out, ",")?;
                    for _ in 0..self.n_atoms {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Outcome of a pathwise comparison `Y1 <= Y2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Largest `Y1 - Y2` over all paths (or nodes) and steps.
    pub max_diff: f64,
    pub worst_path: usize,
    pub worst_step: usize,
    /// Number of points where `Y1 - Y2 > tolerance`.
    pub violations: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl ComparisonReport {
    pub(crate) fn new(tolerance: f64) -> Self {
        ComparisonReport {
            max_diff: f64::NEG_INFINITY,
            worst_path: 0,
            worst_step: 0,
            violations: 0,
            tolerance,
            passed: true,
        }
    }

    pub(crate) fn record(&mut self, diff: f64, path: usize, step: usize) {
        if diff > self.max_diff {
            self.max_diff = diff;
            self.worst_path = path;
            self.worst_step = step;
        }
        if diff > self.tolerance || diff.is_nan() {
            self.violations += 1;
            self.passed = false;
        }
    }
}

/// Checks `Y1 <= Y2 + tolerance` at every path and step of two stored solutions.
pub fn check_comparison(sol1: &BsdeSolution, sol2: &BsdeSolution, tolerance: f64) -> Result<ComparisonReport> {
    if sol1.grid != sol2.grid || sol1.n_paths != sol2.n_paths {
        return Err(Error::GridMismatch("solutions live on different grids or ensembles".into()));
    }
    if !sol1.has_paths() || !sol2.has_paths() {
        return Err(Error::InvalidArgument("comparison needs solutions with stored paths".into()));
    }
    let mut rep = ComparisonReport::new(tolerance);
    for s in 0..=sol1.n_steps() {
        for (p, (a, b)) in sol1.y_step(s).iter().zip(sol2.y_step(s)).enumerate() {
            rep.record(a - b, p, s);
        }
    }
    Ok(rep)
}
