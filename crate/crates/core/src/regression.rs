//! Per-point least squares across noise levels.
//!
//! At a fixed point, `log u_eps + ((n - d)/2) log eps = -V/eps + log Z0 + s*eps + O(eps^2)`
//! is linear in `beta = (V, log Z0, s)`. Rows are weighted by `sqrt(N0 / (1 - N0/N))`, the
//! inverse standard deviation of `log u_hat` under binomial counting, so the weighted
//! residual sum of squares is approximately chi-squared with `K - 3` degrees of freedom.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("noise ladder must be positive, strictly increasing and have more than 3 levels")]
    InvalidLadder,
    #[error("only {0} usable noise levels (need at least {1})")]
    TooFewRows(usize, usize),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("input lengths disagree")]
    LengthMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLadder {
    eps: Vec<f64>,
}

impl NoiseLadder {
    pub fn new(eps: Vec<f64>) -> Result<Self, RegressionError> {
        let ok = eps.len() > 3
            && eps.iter().all(|e| e.is_finite() && *e > 0.0)
            && eps.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self { eps })
        } else {
            Err(RegressionError::InvalidLadder)
        }
    }

    /// Ladder with `sqrt(eps)` evenly spaced from `lo` to `hi`.
    pub fn from_sqrt_linspace(lo: f64, hi: f64, k: usize) -> Result<Self, RegressionError> {
        if k < 2 {
            return Err(RegressionError::InvalidLadder);
        }
        let eps = (0..k)
            .map(|i| {
                let s = lo + (hi - lo) * i as f64 / (k - 1) as f64;
                s * s
            })
            .collect();
        Self::new(eps)
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }
}

/// Empirical density of one point at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelData {
    pub u_hat: f64,
    pub n0: u64,
    pub n: u64,
}

impl LevelData {
    pub fn from_counts(n0: u64, n: u64, bin_volume: f64) -> Self {
        let u_hat = if n == 0 { 0.0 } else { n0 as f64 / (bin_volume * n as f64) };
        Self { u_hat, n0, n }
    }

    pub fn usable(&self, min_count: u64) -> bool {
        self.n0 >= min_count.max(1) && self.n0 < self.n && self.u_hat > 0.0 && self.u_hat.is_finite()
    }

    /// `sqrt(N0 / (1 - N0/N))`.
    pub fn weight(&self) -> f64 {
        let n0 = self.n0 as f64;
        (n0 / (1.0 - n0 / self.n as f64)).sqrt()
    }
}

/// Rows `(-1/eps_i, 1, eps_i)`.
pub fn build_design_matrix(eps: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(eps.len(), 3, |i, j| match j {
        0 => -1.0 / eps[i],
        1 => 1.0,
        _ => eps[i],
    })
}

/// Response and weights over the usable levels of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub eps: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Drops levels with `N0 < min_count` and returns `log u_i + ((n-d)/2) log eps_i` with the
/// counting weights.
pub fn build_response(
    rows: &[LevelData],
    eps: &[f64],
    dims: (usize, usize),
    min_count: u64,
) -> Result<Response, RegressionError> {
    if rows.len() != eps.len() {
        return Err(RegressionError::LengthMismatch);
    }
    let shift = (dims.0 as f64 - dims.1 as f64) / 2.0;
    let mut out = Response { eps: Vec::new(), y: Vec::new(), weights: Vec::new() };
    for (row, &e) in rows.iter().zip(eps) {
        if row.usable(min_count) {
            out.eps.push(e);
            out.y.push(row.u_hat.ln() + shift * e.ln());
            out.weights.push(row.weight());
        }
    }
    if out.eps.len() < 4 {
        return Err(RegressionError::TooFewRows(out.eps.len(), 4));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub beta: Vec<f64>,
    /// `D A beta - D y`.
    pub residual: Vec<f64>,
    pub rss: f64,
}

/// Minimises `|D A beta - D y|^2` by Householder QR of the column-equilibrated `D A`.
pub fn solve_rescaled_ls(a: &DMatrix<f64>, d: &[f64], y: &[f64]) -> Result<LsSolution, RegressionError> {
    let (k, p) = a.shape();
    if d.len() != k || y.len() != k {
        return Err(RegressionError::LengthMismatch);
    }
    if k < p {
        return Err(RegressionError::RankDeficient);
    }
    let mut m = DMatrix::from_fn(k, p, |i, j| d[i] * a[(i, j)]);
    let mut scale = vec![0.0; p];
    for j in 0..p {
        let norm = m.column(j).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(RegressionError::RankDeficient);
        }
        scale[j] = norm;
        m.column_mut(j).scale_mut(1.0 / norm);
    }
    let rhs = DVector::from_fn(k, |i, _| d[i] * y[i]);
    let qr = m.clone().qr();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)].abs() < 1e-12 {
            return Err(RegressionError::RankDeficient);
        }
    }
    let qty = qr.q().transpose() * &rhs;
    let z = r.solve_upper_triangular(&qty).ok_or(RegressionError::RankDeficient)?;
    let beta: Vec<f64> = (0..p).map(|j| z[j] / scale[j]).collect();
    let residual: Vec<f64> = (&m * &z - &rhs).iter().copied().collect();
    let rss = residual.iter().map(|v| v * v).sum();
    Ok(LsSolution { beta, residual, rss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub v_hat: f64,
    pub log_z0_hat: f64,
    /// Coefficient of `eps`; only the combination `Z1/Z0 - C1` is identifiable.
    pub slope: f64,
    pub rss_plain: f64,
    pub rss_rescaled: f64,
    pub dof: usize,
    pub used_rows: usize,
    pub reliable: bool,
}

/// Fits one point. `reliable` requires more than 3 usable levels and `v_hat <= far_field_threshold`.
pub fn regress_point(
    rows: &[LevelData],
    eps: &[f64],
    dims: (usize, usize),
    min_count: u64,
    far_field_threshold: f64,
) -> Result<RegressionResult, RegressionError> {
    let resp = build_response(rows, eps, dims, min_count)?;
    let a = build_design_matrix(&resp.eps);
    let weighted = solve_rescaled_ls(&a, &resp.weights, &resp.y)?;
    let plain = solve_rescaled_ls(&a, &vec![1.0; resp.y.len()], &resp.y)?;
    let used_rows = resp.eps.len();
    let v_hat = weighted.beta[0];
    Ok(RegressionResult {
        v_hat,
        log_z0_hat: weighted.beta[1],
        slope: weighted.beta[2],
        rss_plain: plain.rss,
        rss_rescaled: weighted.rss,
        dof: used_rows - 3,
        used_rows,
        reliable: used_rows > 3 && v_hat <= far_field_threshold,
    })
}

/// Intercept of the ordinary least-squares line through `(eps_i, eps_i^((n-d)/2) u_i)`.
/// Meant for points on the attractor, where `V = 0`.
pub fn extrapolate_z0_attractor(
    rows: &[LevelData],
    eps: &[f64],
    dims: (usize, usize),
    min_count: u64,
) -> Result<f64, RegressionError> {
    if rows.len() != eps.len() {
        return Err(RegressionError::LengthMismatch);
    }
    let power = (dims.0 as f64 - dims.1 as f64) / 2.0;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .zip(eps)
        .filter(|(r, _)| r.usable(min_count))
        .map(|(r, &e)| (e, e.powf(power) * r.u_hat))
        .collect();
    if pts.len() < 2 {
        return Err(RegressionError::TooFewRows(pts.len(), 2));
    }
    let m = pts.len() as f64;
    let mean_e = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_e).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(RegressionError::RankDeficient);
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_e) * (p.1 - mean_y)).sum();
    Ok(mean_y - sxy / sxx * mean_e)
}

/// Linear-interpolation percentile of `values` (`q` in [0, 1]); `None` if empty.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Regressions over a whole collocation set.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRegression {
    /// `None` where fewer than 4 levels were usable.
    pub results: Vec<Option<RegressionResult>>,
    pub far_field_threshold: f64,
}

/// Fits every point in parallel. When `far_field_threshold` is `None` it is set to the
/// `quantile` of `v_hat` over points with more than 3 usable levels, and reliability is
/// assigned against it.
pub fn regress_all(
    rows: &[Vec<LevelData>],
    eps: &[f64],
    dims: (usize, usize),
    min_count: u64,
    far_field_threshold: Option<f64>,
    quantile: f64,
) -> BatchRegression {
    let mut results: Vec<Option<RegressionResult>> = rows
        .par_iter()
        .map(|r| regress_point(r, eps, dims, min_count, f64::INFINITY).ok())
        .collect();
    let threshold = far_field_threshold.unwrap_or_else(|| {
        let vs: Vec<f64> = results.iter().flatten().filter(|r| r.used_rows > 3).map(|r| r.v_hat).collect();
        percentile(&vs, quantile).unwrap_or(f64::INFINITY)
    });
    for r in results.iter_mut().flatten() {
        r.reliable = r.used_rows > 3 && r.v_hat <= threshold;
    }
    BatchRegression { results, far_field_threshold: threshold }
}

/// CSV with `coords, v_hat, log_z0_hat, slope, rss_rescaled, dof, reliable` for fitted points.
pub fn write_results_csv<W: std::io::Write>(
    mut w: W,
    points: &[Vec<f64>],
    results: &[Option<RegressionResult>],
) -> std::io::Result<()> {
    let n = points.first().map_or(0, |p| p.len());
    let header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
    writeln!(w, "{},v_hat,log_z0_hat,slope,rss_rescaled,dof,reliable", header.join(","))?;
    for (p, r) in points.iter().zip(results) {
        if let Some(r) = r {
            let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                coords.join(","),
                r.v_hat,
                r.log_z0_hat,
                r.slope,
                r.rss_rescaled,
                r.dof,
                r.reliable
            )?;
        }
    }
    Ok(())
}
