use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::market::{PathEnsemble, PathView};

type PathFn = dyn Fn(&PathView<'_>) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum Payoff {
    Path(Arc<PathFn>),
    Terminal(Arc<TerminalFn>),
    Values(Arc<Vec<f64>>),
}

/// A terminal random variable `F` evaluated on an ensemble.
#[derive(Clone)]
pub struct Claim {
    payoff: Payoff,
    pub label: String,
}

impl fmt::Debug for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Claim").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Claim {
    /// A claim that may read the whole path.
    pub fn path<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&PathView<'_>) -> f64 + Send + Sync + 'static,
    {
        Claim { payoff: Payoff::Path(Arc::new(f)), label: label.into() }
    }

    /// A claim depending on `W(T)` and the terminal jump counts `N_j(T)`.
    pub fn terminal<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Claim { payoff: Payoff::Terminal(Arc::new(f)), label: label.into() }
    }

    pub fn constant(a: f64) -> Self {
        Claim::terminal(format!("constant {a}"), move |_, _| a)
    }

    /// Precomputed per-path samples.
    pub fn from_values(label: impl Into<String>, values: Vec<f64>) -> Self {
        Claim { payoff: Payoff::Values(Arc::new(values)), label: label.into() }
    }

    /// Samples of `F` on every path; errors on non-finite values.
    pub fn evaluate(&self, paths: &PathEnsemble) -> Result<Vec<f64>> {
        let n = paths.n_paths();
        let steps = paths.n_steps();
        let values = match &self.payoff {
            Payoff::Path(f) => (0..n).map(|p| f(&paths.path(p))).collect(),
            Payoff::Terminal(f) => {
                let w = paths.brownian_at(steps);
                let na = paths.n_atoms();
                let counts = paths.counts_at(steps);
                (0..n).map(|p| f(w[p], &counts[p * na..(p + 1) * na])).collect()
            }
            Payoff::Values(v) => {
                if v.len() != n {
                    return Err(Error::GridMismatch(format!(
                        "claim {} has {} samples for {n} paths",
                        self.label,
                        v.len()
                    )));
                }
                v.as_ref().clone()
            }
        };
        let values: Vec<f64> = values;
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("claim {} on path {p}", self.label), step: steps });
        }
        if !values.iter().map(|v| v * v).sum::<f64>().is_finite() {
            return Err(Error::InvalidArgument(format!("claim {} is not square-summable", self.label)));
        }
        Ok(values)
    }

    /// `F + a`.
    pub fn shifted(&self, a: f64) -> Claim {
        let inner = self.clone();
        let label = format!("{} + {a}", self.label);
        match &self.payoff {
            Payoff::Values(v) => Claim::from_values(label, v.iter().map(|x| x + a).collect()),
            _ => Claim::path(label, move |view| inner.eval_one(view) + a),
        }
    }

    fn eval_one(&self, view: &PathView<'_>) -> f64 {
        match &self.payoff {
            Payoff::Path(f) => f(view),
            Payoff::Terminal(f) => {
                let na = view.ensemble().n_atoms();
                let counts: Vec<f64> = (0..na).map(|j| view.terminal_jumps(j)).collect();
                f(view.terminal_brownian(), &counts)
            }
            Payoff::Values(v) => v[view.index()],
        }
    }
}
