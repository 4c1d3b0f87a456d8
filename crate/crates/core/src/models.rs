//! SDE systems `dX = f(X) dt + sqrt(eps) sigma(X) dB` and the benchmark zoo.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown benchmark id `{0}`")]
    UnknownBenchmark(String),
    #[error("benchmark `{id}` has no parameter `{param}`")]
    UnknownParameter { id: String, param: String },
    #[error("parameter `{0}` is not finite")]
    NonFiniteParameter(String),
    #[error("parameter `{name}` out of range: {value}")]
    InvalidParameter { name: String, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Model under study. All evaluators are pure functions of `x`.
pub trait SdeSystem: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    /// Dimension of the deterministic attractor; enters the normalisation `Q(eps) ~ eps^((n-d)/2)`.
    fn attractor_dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn sigma(&self, x: &[f64]) -> DMatrix<f64>;
    fn drift_jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        let s = self.sigma(x);
        &s * s.transpose()
    }

    fn drift_divergence(&self, x: &[f64]) -> f64 {
        self.drift_jacobian(x).trace()
    }

    /// `(sum_i d_i a^{ij})_j`. Zero for constant diffusion.
    fn diffusion_row_divergence(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dim_state())
    }

    /// True when `A` does not depend on `x`.
    fn constant_diffusion(&self) -> bool;

    /// `out = x + scale * sigma(x) * xi`. Hot path of the Euler–Maruyama loop.
    fn add_noise(&self, x: &[f64], xi: &[f64], scale: f64, out: &mut [f64]) {
        let s = self.sigma(x);
        for i in 0..self.dim_state() {
            let mut acc = 0.0;
            for j in 0..self.dim_noise() {
                acc += s[(i, j)] * xi[j];
            }
            out[i] = x[i] + scale * acc;
        }
    }

    fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.dim_state()];
        self.drift(x, &mut f);
        f
    }
}

/// Benchmark selection as it appears in a config file: a name plus a parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Overrides the benchmark's default attractor dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attractor_dim: Option<usize>,
}

impl BenchmarkSpec {
    pub fn new(id: &str) -> Self {
        Self { id: id.to_string(), params: BTreeMap::new(), attractor_dim: None }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchmarkId {
    Ou1d,
    Ou2d,
    Vdp { mu: f64 },
    Figure8 { mu: f64 },
    CoupledVdp { mu: f64, delta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
}

impl BenchmarkId {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkId::Ou1d => "ou1d",
            BenchmarkId::Ou2d => "ou2d",
            BenchmarkId::Vdp { .. } => "vdp",
            BenchmarkId::Figure8 { .. } => "figure8",
            BenchmarkId::CoupledVdp { .. } => "coupled_vdp",
            BenchmarkId::Rossler { .. } => "rossler",
        }
    }

    fn dim(&self) -> usize {
        match self {
            BenchmarkId::Ou1d => 1,
            BenchmarkId::Ou2d | BenchmarkId::Vdp { .. } | BenchmarkId::Figure8 { .. } => 2,
            BenchmarkId::CoupledVdp { .. } => 4,
            BenchmarkId::Rossler { .. } => 3,
        }
    }

    fn default_attractor_dim(&self) -> usize {
        match self {
            BenchmarkId::Ou1d | BenchmarkId::Ou2d => 0,
            BenchmarkId::Vdp { .. } | BenchmarkId::Figure8 { .. } => 1,
            BenchmarkId::CoupledVdp { .. } | BenchmarkId::Rossler { .. } => 2,
        }
    }
}

/// A code-registered benchmark with additive identity noise (`sigma = I`, `n = m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub id: BenchmarkId,
    attractor_dim: usize,
}

fn take_param(
    id: &str,
    params: &BTreeMap<String, f64>,
    allowed: &[(&str, f64)],
) -> Result<Vec<f64>, ModelError> {
    for key in params.keys() {
        if !allowed.iter().any(|(name, _)| name == key) {
            return Err(ModelError::UnknownParameter { id: id.to_string(), param: key.clone() });
        }
    }
    allowed
        .iter()
        .map(|(name, default)| {
            let v = params.get(*name).copied().unwrap_or(*default);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ModelError::NonFiniteParameter(name.to_string()))
            }
        })
        .collect()
}

fn nonzero(name: &str, v: f64) -> Result<f64, ModelError> {
    if v == 0.0 {
        Err(ModelError::InvalidParameter { name: name.to_string(), value: v })
    } else {
        Ok(v)
    }
}

/// Builds a benchmark from its name and parameter overrides.
///
/// Defaults: `vdp` and `coupled_vdp` use `mu = 1`, `coupled_vdp` uses `delta = 0`,
/// `figure8` uses `mu = 0.5`, `rossler` uses `a = b = 0.2, c = 5.7`.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, ModelError> {
    let p = &spec.params;
    let name = spec.id.as_str();
    let id = match name {
        "ou1d" => {
            take_param(name, p, &[])?;
            BenchmarkId::Ou1d
        }
        "ou2d" => {
            take_param(name, p, &[])?;
            BenchmarkId::Ou2d
        }
        "vdp" => {
            let v = take_param(name, p, &[("mu", 1.0)])?;
            BenchmarkId::Vdp { mu: nonzero("mu", v[0])? }
        }
        "figure8" => {
            let v = take_param(name, p, &[("mu", 0.5)])?;
            BenchmarkId::Figure8 { mu: v[0] }
        }
        "coupled_vdp" => {
            let v = take_param(name, p, &[("mu", 1.0), ("delta", 0.0)])?;
            BenchmarkId::CoupledVdp { mu: nonzero("mu", v[0])?, delta: v[1] }
        }
        "rossler" => {
            let v = take_param(name, p, &[("a", 0.2), ("b", 0.2), ("c", 5.7)])?;
            BenchmarkId::Rossler { a: v[0], b: v[1], c: v[2] }
        }
        other => return Err(ModelError::UnknownBenchmark(other.to_string())),
    };
    let attractor_dim = spec.attractor_dim.unwrap_or_else(|| id.default_attractor_dim());
    if attractor_dim > id.dim() {
        return Err(ModelError::InvalidParameter {
            name: "attractor_dim".into(),
            value: attractor_dim as f64,
        });
    }
    Ok(Benchmark { id, attractor_dim })
}

/// Figure-eight Hamiltonian `H = y^2/2 + x^4/12 - x^2/2` and its gradient.
pub fn figure8_hamiltonian(x: f64, y: f64) -> (f64, f64, f64) {
    let h = 0.5 * y * y + x.powi(4) / 12.0 - 0.5 * x * x;
    let hx = x.powi(3) / 3.0 - x;
    (h, hx, y)
}

impl SdeSystem for Benchmark {
    fn dim_state(&self) -> usize {
        self.id.dim()
    }

    fn dim_noise(&self) -> usize {
        self.id.dim()
    }

    fn attractor_dim(&self) -> usize {
        self.attractor_dim
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self.id {
            BenchmarkId::Ou1d => out[0] = -x[0],
            BenchmarkId::Ou2d => {
                out[0] = -x[0];
                out[1] = -x[1];
            }
            BenchmarkId::Vdp { mu } => {
                out[0] = mu * (x[0] - x[0].powi(3) / 3.0 - x[1]);
                out[1] = x[0] / mu;
            }
            BenchmarkId::Figure8 { mu } => {
                let (h, hx, hy) = figure8_hamiltonian(x[0], x[1]);
                out[0] = hy - mu * h * hx;
                out[1] = -hx - mu * h * hy;
            }
            BenchmarkId::CoupledVdp { mu, delta } => {
                let (x1, y1, x2, y2) = (x[0], x[1], x[2], x[3]);
                out[0] = mu * (x1 - x1.powi(3) / 3.0 - y1) + delta * (x1 - x2);
                out[1] = x1 / mu;
                out[2] = mu * (x2 - x2.powi(3) / 3.0 - y2) + delta * (x2 - x1);
                out[3] = x2 / mu;
            }
            BenchmarkId::Rossler { a, b, c } => {
                out[0] = -x[1] - x[2];
                out[1] = x[0] + a * x[1];
                out[2] = b + x[2] * (x[0] - c);
            }
        }
    }

    fn sigma(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.id.dim(), self.id.dim())
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.id.dim(), self.id.dim())
    }

    fn drift_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        match self.id {
            BenchmarkId::Ou1d => DMatrix::from_element(1, 1, -1.0),
            BenchmarkId::Ou2d => -DMatrix::identity(2, 2),
            BenchmarkId::Vdp { mu } => {
                DMatrix::from_row_slice(2, 2, &[mu * (1.0 - x[0] * x[0]), -mu, 1.0 / mu, 0.0])
            }
            BenchmarkId::Figure8 { mu } => {
                let (h, hx, hy) = figure8_hamiltonian(x[0], x[1]);
                let hxx = x[0] * x[0] - 1.0;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        -mu * (hx * hx + h * hxx),
                        1.0 - mu * hx * hy,
                        -hxx - mu * hx * hy,
                        -mu * (hy * hy + h),
                    ],
                )
            }
            BenchmarkId::CoupledVdp { mu, delta } => {
                let (x1, x2) = (x[0], x[2]);
                DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        mu * (1.0 - x1 * x1) + delta,
                        -mu,
                        -delta,
                        0.0,
                        1.0 / mu,
                        0.0,
                        0.0,
                        0.0,
                        -delta,
                        0.0,
                        mu * (1.0 - x2 * x2) + delta,
                        -mu,
                        0.0,
                        0.0,
                        1.0 / mu,
                        0.0,
                    ],
                )
            }
            BenchmarkId::Rossler { a, c, .. } => DMatrix::from_row_slice(
                3,
                3,
                &[0.0, -1.0, -1.0, 1.0, a, 0.0, x[2], 0.0, x[0] - c],
            ),
        }
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn add_noise(&self, x: &[f64], xi: &[f64], scale: f64, out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = x[i] + scale * xi[i];
        }
    }
}

/// Everything a loss kernel needs at one point, evaluated from the same `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub drift: DVector<f64>,
    pub diffusion: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub divergence: f64,
    pub diffusion_row_divergence: DVector<f64>,
}

pub fn eval_derivatives<S: SdeSystem + ?Sized>(system: &S, x: &[f64]) -> Result<Derivatives, ModelError> {
    let n = system.dim_state();
    if x.len() != n {
        return Err(ModelError::DimensionMismatch { expected: n, got: x.len() });
    }
    let mut f = vec![0.0; n];
    system.drift(x, &mut f);
    Ok(Derivatives {
        drift: DVector::from_vec(f),
        diffusion: system.diffusion(x),
        jacobian: system.drift_jacobian(x),
        divergence: system.drift_divergence(x),
        diffusion_row_divergence: system.diffusion_row_divergence(x),
    })
}
