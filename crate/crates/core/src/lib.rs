//! BSDEs with jumps, convex risk measures and risk-minimal portfolios for
//! Ito-Levy markets with a finite-atom Levy measure.

pub mod curve;
pub mod error;
pub mod market;
pub mod numerics;
pub mod regression;
pub mod bsde;
pub mod risk;
pub mod maxprinciple;
pub mod hjbi;
pub mod newsvendor;

pub use curve::Curve;
pub use error::{Error, Result};
pub use market::{
    girsanov_density, relative_entropy, simulate, stochastic_exponential, Atom, GridProcess,
    MarketModel, PathEnsemble, PathView, Scenario,
};
pub use numerics::Estimate;
