//! Deterministic coefficient curves `t -> R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic function of time.
///
/// Knot curves interpolate linearly between knots and are held flat
/// outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Curve {
    Constant(f64),
    Knots { times: Vec<f64>, values: Vec<f64> },
}

impl Default for Curve {
    fn default() -> Self {
        Curve::Constant(0.0)
    }
}

impl From<f64> for Curve {
    fn from(v: f64) -> Self {
        Curve::Constant(v)
    }
}

impl Curve {
    pub fn constant(v: f64) -> Self {
        Curve::Constant(v)
    }

    pub fn knots(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "knot curve needs matching non-empty times/values (got {} and {})",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("knot times must be strictly increasing".into()));
        }
        Ok(Curve::Knots { times, values })
    }

    /// Samples `f` at the given times into a knot curve.
    pub fn sample<F: Fn(f64) -> f64>(times: &[f64], f: F) -> Result<Self> {
        Curve::knots(times.to_vec(), times.iter().map(|&t| f(t)).collect())
    }

    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Curve::Constant(v) => *v,
            Curve::Knots { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let i = times.partition_point(|&k| k <= t) - 1;
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                values[i] + w * (values[i + 1] - values[i])
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Curve::Constant(_) => true,
            Curve::Knots { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Curve::Constant(v) => *v == 0.0,
            Curve::Knots { values, .. } => values.iter().all(|&v| v == 0.0),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Curve::Constant(v) => v.is_finite(),
            Curve::Knots { times, values } => {
                times.iter().chain(values.iter()).all(|v| v.is_finite())
            }
        }
    }

    /// Pointwise map, keeping the knot layout.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Curve {
        match self {
            Curve::Constant(v) => Curve::Constant(f(*v)),
            Curve::Knots { times, values } => Curve::Knots {
                times: times.clone(),
                values: values.iter().map(|&v| f(v)).collect(),
            },
        }
    }

    /// Breakpoints of the curve inside `(a, b)`.
    pub(crate) fn breakpoints_within(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            Curve::Constant(_) => Vec::new(),
            Curve::Knots { times, .. } => {
                times.iter().copied().filter(|&t| t > a && t < b).collect()
            }
        }
    }
}
