//! Scalar fields with first and second derivatives.
//!
//! Trained networks and closed-form oracles both implement [`ScalarField`], so
//! the transport coefficients, characteristic seeding and density evaluation can
//! be checked against analytic quasi-potentials.

use nalgebra::DMatrix;

pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
    /// Values at many points; networks override this with batched evaluation.
    fn values(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.value(x)).collect()
    }
}

type ValueFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type HessFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Closed-form field built from closures.
pub struct AnalyticField {
    dim: usize,
    value: ValueFn,
    gradient: GradFn,
    hessian: HessFn,
}

impl AnalyticField {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, value: Box::new(value), gradient: Box::new(gradient), hessian: Box::new(hessian) }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(dim, move |_| c, move |_| vec![0.0; dim], move |_| DMatrix::zeros(dim, dim))
    }

    /// `V(x) = |x|^2`, the quasi-potential of `dX = -X dt + sqrt(eps) dB`.
    pub fn ou_quasi_potential(dim: usize) -> Self {
        Self::new(
            dim,
            |x| x.iter().map(|v| v * v).sum(),
            |x| x.iter().map(|v| 2.0 * v).collect(),
            move |_| DMatrix::identity(dim, dim) * 2.0,
        )
    }

    /// `V = mu H^2` for the figure-eight system.
    pub fn figure8_quasi_potential(mu: f64) -> Self {
        use crate::models::figure8_hamiltonian;
        Self::new(
            2,
            move |x| {
                let (h, _, _) = figure8_hamiltonian(x[0], x[1]);
                mu * h * h
            },
            move |x| {
                let (h, hx, hy) = figure8_hamiltonian(x[0], x[1]);
                vec![2.0 * mu * h * hx, 2.0 * mu * h * hy]
            },
            move |x| {
                let (h, hx, hy) = figure8_hamiltonian(x[0], x[1]);
                let hxx = x[0] * x[0] - 1.0;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        2.0 * mu * (hx * hx + h * hxx),
                        2.0 * mu * hx * hy,
                        2.0 * mu * hx * hy,
                        2.0 * mu * (hy * hy + h),
                    ],
                )
            },
        )
    }
}

impl ScalarField for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (self.hessian)(x)
    }
}

/// `inner / scale`; used for the alpha-corrected quasi-potential `V_theta / alpha`.
pub struct ScaledField<'a> {
    pub inner: &'a dyn ScalarField,
    pub scale: f64,
}

impl ScalarField for ScaledField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x) / self.scale
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.inner.gradient(x).into_iter().map(|g| g / self.scale).collect()
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.inner.hessian(x) / self.scale
    }
    fn values(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        self.inner.values(xs).into_iter().map(|v| v / self.scale).collect()
    }
}
