//! Goodness-of-fit check of the weighted residuals against the chi-squared law.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regression::RegressionResult;

pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;
/// Quantile beyond which a point counts towards the tail fraction.
pub const TAIL_QUANTILE: f64 = 0.999;
/// Largest admissible fraction of points above [`TAIL_QUANTILE`].
pub const TAIL_LIMIT: f64 = 0.005;
const MIN_KS_SAMPLE: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample of {0} values is too small (need {MIN_KS_SAMPLE})")]
    SampleTooSmall(usize),
    #[error("no reliable points to test")]
    NoReliablePoints,
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularised lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_prefactor.exp() * h)).max(0.0)
    }
}

/// `P(chi^2_k <= x)`.
pub fn chi2_cdf(x: f64, k: f64) -> Result<f64, ValidationError> {
    if !(x >= 0.0) || !(k > 0.0) {
        return Err(ValidationError::InvalidArgument(format!("chi2_cdf({x}, {k})")));
    }
    Ok(regularized_gamma_p(k / 2.0, x / 2.0))
}

/// Inverse of [`chi2_cdf`] by bisection.
pub fn chi2_quantile(p: f64, k: f64) -> Result<f64, ValidationError> {
    if !(0.0..1.0).contains(&p) || !(k > 0.0) {
        return Err(ValidationError::InvalidArgument(format!("chi2_quantile({p}, {k})")));
    }
    let mut hi = k.max(1.0);
    while chi2_cdf(hi, k)? < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, k)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Asymptotic Kolmogorov survival function `2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2)`,
/// truncated at 100 terms.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let sign = if j as u64 % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * (-2.0 * j * j * lambda * lambda).exp();
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test of `sample` against `cdf`.
pub fn ks_test_with(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64), ValidationError> {
    if sample.len() < MIN_KS_SAMPLE {
        return Err(ValidationError::SampleTooSmall(sample.len()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok((d, kolmogorov_sf(n.sqrt() * d)))
}

/// KS test of `sample` against chi-squared with `k` degrees of freedom: `(D, p-value)`.
pub fn ks_test(sample: &[f64], k: usize) -> Result<(f64, f64), ValidationError> {
    if k == 0 {
        return Err(ValidationError::InvalidArgument("dof must be positive".into()));
    }
    if sample.iter().any(|v| !(*v >= 0.0)) {
        return Err(ValidationError::InvalidArgument("chi-squared sample must be nonnegative".into()));
    }
    ks_test_with(sample, |x| regularized_gamma_p(k as f64 / 2.0, x / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Indices (into the regression results) of the tested points.
    pub tested_indices: Vec<usize>,
    pub rss: Vec<f64>,
    pub dof: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub significance: f64,
    /// `p_value >= significance`.
    pub pass: bool,
    pub mean_rss: f64,
    /// Fraction of tested points above the 0.999 quantile.
    pub tail_fraction: f64,
    pub tail_ok: bool,
    pub tested: usize,
    pub excluded: usize,
}

impl ValidationReport {
    pub fn to_text(&self) -> String {
        format!(
            "verdict: {}\ndof: {}\ntested: {}\nexcluded: {}\nmean_rss: {}\nks_statistic: {}\np_value: {}\nsignificance: {}\ntail_fraction: {}\ntail_ok: {}\n",
            if self.pass { "holds" } else { "does not hold" },
            self.dof,
            self.tested,
            self.excluded,
            self.mean_rss,
            self.ks_statistic,
            self.p_value,
            self.significance,
            self.tail_fraction,
            self.tail_ok
        )
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W, points: &[Vec<f64>]) -> std::io::Result<()> {
        let n = points.first().map_or(0, |p| p.len());
        let header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},rss", header.join(","))?;
        for (&i, r) in self.tested_indices.iter().zip(&self.rss) {
            let coords: Vec<String> = points[i].iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", coords.join(","), r)?;
        }
        Ok(())
    }
}

/// Pools the weighted RSS of reliable points whose degrees of freedom equal `dof`
/// (the full ladder minus 3) and tests it against chi-squared.
pub fn validate_wkb(
    results: &[Option<RegressionResult>],
    dof: usize,
    significance: f64,
) -> Result<ValidationReport, ValidationError> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(ValidationError::InvalidArgument(format!("significance {significance}")));
    }
    let mut tested_indices = Vec::new();
    let mut rss = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if let Some(r) = r {
            if r.reliable && r.dof == dof {
                tested_indices.push(i);
                rss.push(r.rss_rescaled);
            }
        }
    }
    if rss.is_empty() {
        return Err(ValidationError::NoReliablePoints);
    }
    let (ks_statistic, p_value) = ks_test(&rss, dof)?;
    let cut = chi2_quantile(TAIL_QUANTILE, dof as f64)?;
    let tail_fraction = rss.iter().filter(|v| **v > cut).count() as f64 / rss.len() as f64;
    let tested = rss.len();
    Ok(ValidationReport {
        mean_rss: rss.iter().sum::<f64>() / tested as f64,
        tested_indices,
        rss,
        dof,
        ks_statistic,
        p_value,
        significance,
        pass: p_value >= significance,
        tail_fraction,
        tail_ok: tail_fraction < TAIL_LIMIT,
        tested,
        excluded: results.len() - tested,
    })
}
