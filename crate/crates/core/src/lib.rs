//! Heavy-tailed operational risk on bipartite loss networks: marginal tail
//! fitting, spectral estimation of risk constants, asymptotic VaR and CoTE,
//! Euler allocation, simulation studies and an independence test.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gpd;
pub mod ingest;
pub mod marginals;
pub mod par;
pub mod risk;
pub mod seed;
pub mod sim;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use ingest::FractionMatrix;
pub use marginals::{MarginalModel, TestResult};
pub use spectral::{AngularSet, DiscreteSpectralMeasure};
