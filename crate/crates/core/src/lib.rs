//! Estimation of quasi-potentials and WKB prefactors for small-noise SDEs.
//!
//! The pipeline runs Euler–Maruyama ensembles at several noise strengths,
//! bins the samples, fits `log u = log Z0 - V/eps + slope*eps` per
//! collocation point, checks the residuals against a chi-squared law, and
//! then trains two networks: one for the quasi-potential `V` (data fit plus
//! Hamilton–Jacobi residual) and one for the prefactor `Z0` (data fit plus
//! transport residual). The product `eps^(-(n-d)/2) Z0 exp(-V/eps)` is the
//! approximate invariant density.

pub mod density;
pub mod expand;
pub mod field;
pub mod models;
pub mod net;
pub mod pipeline;
pub mod regression;
pub mod simulate;
pub mod train_v;
pub mod train_z;
pub mod validation;

pub use field::ScalarField;
pub use models::{make_benchmark, Benchmark, BenchmarkSpec, SdeSystem};
