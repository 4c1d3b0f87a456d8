//! Training-set expansion along Hamilton–Jacobi characteristics.
//!
//! Characteristics of `H(x, p) = f(x) . p + 1/2 p^T A p` are integrated with the
//! implicit-in-x symplectic Euler scheme. Along a curve `dV/ds = 1/2 p^T A p` and
//! `d log Z0 / ds = -c(x)`, so each curve extends both training sets beyond the
//! region covered by Monte Carlo data. A fixed-time minimum-action estimate is
//! provided as a fallback.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ScalarField;
use crate::models::SdeSystem;
use crate::simulate::BoxDomain;
use crate::train_z::transport_coefficients;

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 50;
/// Seeds with `|H(x0, p0)|` at or above this are rejected.
pub const SEED_MAX_HAMILTONIAN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("characteristic expansion needs constant diffusion")]
    NonConstantDiffusion,
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("fixed-point iteration did not converge (residual {0:e})")]
    SolverFailure(f64),
    #[error("found only {found} of {wanted} seeds after {attempts} attempts")]
    SeedingFailed { found: usize, wanted: usize, attempts: usize },
    #[error("curve carries no transport data")]
    MissingTransport,
    #[error("diffusion matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("no surface points given")]
    EmptySurface,
    #[error("action increased for {0} consecutive iterations")]
    Diverged(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharState {
    pub x: Vec<f64>,
    /// Costate, equal to `grad V` along the curve.
    pub p: Vec<f64>,
    pub v: f64,
    /// Accumulated `-int c ds`.
    pub log_z: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ReachedVMax,
    LeftDomain,
    StepLimit,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicCurve {
    pub samples: Vec<CharState>,
    /// Last state reached, whether or not it was sampled.
    pub terminal: CharState,
    pub termination: Termination,
    pub steps: usize,
    pub transported: bool,
}

/// `f(x) . p + 1/2 p^T A p`.
pub fn hamiltonian<S: SdeSystem + ?Sized>(system: &S, x: &[f64], p: &[f64]) -> f64 {
    let f = system.drift_vec(x);
    let a = system.diffusion(x);
    let pv = DVector::from_column_slice(p);
    let ap = &a * &pv;
    f.iter().zip(p).map(|(fi, pi)| fi * pi).sum::<f64>() + 0.5 * pv.dot(&ap)
}

/// One symplectic Euler step: implicit in `x`, explicit in `p`.
///
/// `x' = x + h (f(x') + A p)`, `p' = p - h (Df(x'))^T p`, `v' = v + h/2 p^T A p`, and with
/// a transport field `log_z' = log_z - h c(x)`.
pub fn symplectic_char_step<S: SdeSystem + ?Sized>(
    system: &S,
    state: &CharState,
    h: f64,
    transport: Option<&dyn ScalarField>,
) -> Result<CharState, ExpandError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ExpandError::BadStep(h));
    }
    if !system.constant_diffusion() {
        return Err(ExpandError::NonConstantDiffusion);
    }
    let n = state.x.len();
    let a = system.diffusion(&state.x);
    let p = DVector::from_column_slice(&state.p);
    let ap = &a * &p;
    let mut x = state.x.clone();
    let mut f = vec![0.0; n];
    let mut converged = false;
    let mut resid = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        system.drift(&x, &mut f);
        resid = 0.0;
        for i in 0..n {
            let next = state.x[i] + h * (f[i] + ap[i]);
            resid = f64::max(resid, (next - x[i]).abs());
            x[i] = next;
        }
        if !resid.is_finite() {
            break;
        }
        if resid <= FIXED_POINT_TOL * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ExpandError::SolverFailure(resid));
    }
    let jac = system.drift_jacobian(&x);
    let jtp = jac.transpose() * &p;
    let p_new: Vec<f64> = (0..n).map(|i| state.p[i] - h * jtp[i]).collect();
    let mut log_z = state.log_z;
    if let Some(v) = transport {
        let (_, c) = transport_coefficients(system, v, &state.x);
        log_z -= h * c;
    }
    Ok(CharState { x, p: p_new, v: state.v + 0.5 * h * p.dot(&ap), log_z, s: state.s + h })
}

/// Rejection-samples seeds near the level set `{V = level}` of an (alpha-corrected) field.
///
/// Accepted points satisfy `|V(x) - level| < 0.1 level` and `|H(x, grad V)| < 0.05`; each
/// seed starts with `p = grad V`, `v = V(x)`, `log_z = 0`.
pub fn seed_characteristics<S: SdeSystem + ?Sized>(
    system: &S,
    v: &dyn ScalarField,
    level: f64,
    count: usize,
    domain: &BoxDomain,
    seed: u64,
) -> Result<Vec<CharState>, ExpandError> {
    if !(level > 0.0) {
        return Err(ExpandError::Invalid(format!("level must be positive, got {level}")));
    }
    let cap = 10_000 * count.max(1) + 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= cap {
            return Err(ExpandError::SeedingFailed { found: out.len(), wanted: count, attempts });
        }
        attempts += 1;
        let x: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
        let val = v.value(&x);
        if (val - level).abs() >= 0.1 * level {
            continue;
        }
        let p = v.gradient(&x);
        if hamiltonian(system, &x, &p).abs() >= SEED_MAX_HAMILTONIAN {
            continue;
        }
        out.push(CharState { x, p, v: val, log_z: 0.0, s: 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub h: f64,
    pub v_max: f64,
    pub samples_per_curve: usize,
    pub max_steps: usize,
}

/// Integrates one characteristic until `v >= v_max`, a domain exit, the step cap, or a
/// solver failure. Samples are spread uniformly in `v` between the seed and the
/// terminal state; the last sample is the terminal state.
pub fn trace_curve<S: SdeSystem + ?Sized>(
    system: &S,
    init: &CharState,
    cfg: &TraceConfig,
    domain: &BoxDomain,
    transport: Option<&dyn ScalarField>,
) -> Result<CharacteristicCurve, ExpandError> {
    if !system.constant_diffusion() {
        return Err(ExpandError::NonConstantDiffusion);
    }
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(ExpandError::BadStep(cfg.h));
    }
    let mut path = vec![init.clone()];
    let mut termination = Termination::StepLimit;
    if init.v >= cfg.v_max {
        termination = Termination::ReachedVMax;
    } else {
        for _ in 0..cfg.max_steps {
            let cur = path.last().expect("path starts non-empty");
            let next = match symplectic_char_step(system, cur, cfg.h, transport) {
                Ok(s) => s,
                Err(ExpandError::SolverFailure(_)) => {
                    termination = Termination::SolverFailure;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !domain.contains(&next.x) {
                termination = Termination::LeftDomain;
                break;
            }
            let done = next.v >= cfg.v_max;
            path.push(next);
            if done {
                termination = Termination::ReachedVMax;
                break;
            }
        }
    }
    let steps = path.len() - 1;
    let samples = sample_uniform_in_v(&path, cfg.samples_per_curve);
    let terminal = path.pop().expect("path starts non-empty");
    Ok(CharacteristicCurve { samples, terminal, termination, steps, transported: transport.is_some() })
}

/// For each target level `v0 + j (v_end - v0) / m`, `j = 1..=m`, takes the first stored
/// state at or above it. Duplicates are dropped, so short curves give fewer samples.
fn sample_uniform_in_v(path: &[CharState], m: usize) -> Vec<CharState> {
    if path.len() < 2 || m == 0 {
        return Vec::new();
    }
    let v0 = path[0].v;
    let v1 = path[path.len() - 1].v;
    let mut out: Vec<CharState> = Vec::with_capacity(m);
    let mut last = 0usize;
    let mut k = 1usize;
    for j in 1..=m {
        let target = v0 + (v1 - v0) * j as f64 / m as f64;
        while k < path.len() - 1 && path[k].v < target {
            k += 1;
        }
        if k != last {
            out.push(path[k].clone());
            last = k;
        }
    }
    out
}

/// Traces every seed in parallel; results keep seed order.
pub fn trace_all<S: SdeSystem + ?Sized>(
    system: &S,
    seeds: &[CharState],
    cfg: &TraceConfig,
    domain: &BoxDomain,
    transport: Option<&dyn ScalarField>,
) -> Result<Vec<CharacteristicCurve>, ExpandError> {
    seeds.par_iter().map(|s| trace_curve(system, s, cfg, domain, transport)).collect()
}

/// `Z0` along the sampled states: `z0_init * exp(log_z)`.
pub fn transport_z0(curve: &CharacteristicCurve, z0_init: f64) -> Result<Vec<f64>, ExpandError> {
    if !curve.transported {
        return Err(ExpandError::MissingTransport);
    }
    Ok(curve.samples.iter().map(|s| z0_init * s.log_z.exp()).collect())
}

/// Expanded-set CSV: coordinates, `v`, optional `z0`, origin.
pub fn write_expanded_csv<W: std::io::Write>(
    mut w: W,
    points: &[Vec<f64>],
    v: &[f64],
    z0: Option<&[f64]>,
) -> std::io::Result<()> {
    let n = points.first().map_or(0, |p| p.len());
    let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    header.push("v".into());
    if z0.is_some() {
        header.push("z0".into());
    }
    header.push("origin".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, p) in points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|c| c.to_string()).collect();
        row.push(v[i].to_string());
        if let Some(z) = z0 {
            row.push(z[i].to_string());
        }
        row.push("characteristic".into());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Discretised path with fixed endpoints and uniform time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPath {
    pub nodes: Vec<Vec<f64>>,
    pub dt: f64,
    pub action: f64,
}

impl ActionPath {
    pub fn recompute<S: SdeSystem + ?Sized>(&mut self, system: &S) -> Result<f64, ExpandError> {
        let a_inv = diffusion_inverse(system, &self.nodes[0])?;
        self.action = discrete_action(system, &self.nodes, self.dt, &a_inv, None);
        Ok(self.action)
    }
}

fn diffusion_inverse<S: SdeSystem + ?Sized>(system: &S, x: &[f64]) -> Result<DMatrix<f64>, ExpandError> {
    if !system.constant_diffusion() {
        return Err(ExpandError::NonConstantDiffusion);
    }
    let a = system.diffusion(x);
    let chol = a.cholesky().ok_or(ExpandError::NotPositiveDefinite)?;
    Ok(chol.inverse())
}

/// Trapezoid rule for `int 1/2 |phi' - f(phi)|^2_{A^-1} ds`: on each segment the
/// finite-difference velocity is paired with the drift at both ends.
///
/// When `grad` is given, the gradient with respect to every node is written into it.
pub fn discrete_action<S: SdeSystem + ?Sized>(
    system: &S,
    nodes: &[Vec<f64>],
    dt: f64,
    a_inv: &DMatrix<f64>,
    mut grad: Option<&mut [Vec<f64>]>,
) -> f64 {
    let n = nodes[0].len();
    let drifts: Vec<DVector<f64>> = nodes.iter().map(|x| DVector::from_vec(system.drift_vec(x))).collect();
    let jacs: Option<Vec<DMatrix<f64>>> =
        grad.as_ref().map(|_| nodes.iter().map(|x| system.drift_jacobian(x)).collect());
    if let Some(g) = grad.as_deref_mut() {
        for gk in g.iter_mut() {
            gk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut s = 0.0;
    for k in 0..nodes.len() - 1 {
        let vel = DVector::from_fn(n, |i, _| (nodes[k + 1][i] - nodes[k][i]) / dt);
        for (end, w) in [(k, 0.5), (k + 1, 0.5)] {
            let r = &vel - &drifts[end];
            let ar = a_inv * &r;
            s += w * dt * 0.5 * r.dot(&ar);
            if let (Some(g), Some(j)) = (grad.as_deref_mut(), jacs.as_ref()) {
                // d/d phi_{k+1} of r is +1/dt, of phi_k is -1/dt, plus -Df at `end`
                let jt = j[end].transpose() * &ar;
                for i in 0..n {
                    g[k + 1][i] += w * ar[i];
                    g[k][i] -= w * ar[i];
                    g[end][i] -= w * dt * jt[i];
                }
            }
        }
    }
    s
}

/// Gradient descent on the interior nodes of a fixed-time path, started from the
/// straight line. Each update is `-lr * dt * grad`. Stops early once the relative
/// action change falls below `1e-14` for 100 iterations in a row.
pub fn minimize_fixed_time<S: SdeSystem + ?Sized>(
    system: &S,
    start: &[f64],
    target: &[f64],
    t_total: f64,
    n_nodes: usize,
    iters: usize,
    lr: f64,
) -> Result<ActionPath, ExpandError> {
    if n_nodes < 2 || !(t_total > 0.0) || !(lr > 0.0) {
        return Err(ExpandError::Invalid("need n_nodes >= 2, T > 0 and lr > 0".into()));
    }
    let a_inv = diffusion_inverse(system, start)?;
    let dt = t_total / (n_nodes - 1) as f64;
    let n = start.len();
    let mut nodes: Vec<Vec<f64>> = (0..n_nodes)
        .map(|k| {
            let t = k as f64 / (n_nodes - 1) as f64;
            (0..n).map(|i| start[i] + t * (target[i] - start[i])).collect()
        })
        .collect();
    let mut grad = vec![vec![0.0; n]; n_nodes];
    let mut prev = discrete_action(system, &nodes, dt, &a_inv, Some(&mut grad));
    let mut increases = 0;
    let mut flat = 0;
    for _ in 0..iters {
        for k in 1..n_nodes - 1 {
            for i in 0..n {
                nodes[k][i] -= lr * dt * grad[k][i];
            }
        }
        let s = discrete_action(system, &nodes, dt, &a_inv, Some(&mut grad));
        if !s.is_finite() {
            return Err(ExpandError::Diverged(increases + 1));
        }
        if s > prev {
            increases += 1;
            if increases >= 50 {
                return Err(ExpandError::Diverged(increases));
            }
        } else {
            increases = 0;
        }
        if (prev - s).abs() <= 1e-14 * s.abs().max(1e-300) {
            flat += 1;
            if flat >= 100 {
                prev = s;
                break;
            }
        } else {
            flat = 0;
        }
        prev = s;
    }
    Ok(ActionPath { nodes, dt, action: prev })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinActionConfig {
    /// Geometric scan of the total time between these bounds.
    pub t_min: f64,
    pub t_max: f64,
    pub t_scan: usize,
    /// Golden-section iterations around the best scanned time.
    pub refine_iters: usize,
    pub n_nodes: usize,
    pub iters: usize,
    pub lr: f64,
}

impl Default for MinActionConfig {
    fn default() -> Self {
        Self { t_min: 0.1, t_max: 10.0, t_scan: 13, refine_iters: 20, n_nodes: 50, iters: 20_000, lr: 0.4 }
    }
}

/// `level + min` over surface starts and total times of the minimised discrete action
/// from a start to `x_target`. Returns the estimate and the best path.
pub fn min_action_estimate<S: SdeSystem + ?Sized>(
    system: &S,
    x_target: &[f64],
    surface_points: &[Vec<f64>],
    level: f64,
    cfg: &MinActionConfig,
) -> Result<(f64, ActionPath), ExpandError> {
    if surface_points.is_empty() {
        return Err(ExpandError::EmptySurface);
    }
    if !(cfg.t_min > 0.0 && cfg.t_max >= cfg.t_min && cfg.t_scan >= 1) {
        return Err(ExpandError::Invalid("bad time scan".into()));
    }
    diffusion_inverse(system, x_target)?;
    if surface_points.iter().any(|y| y.as_slice() == x_target) {
        return Ok((level, ActionPath { nodes: vec![x_target.to_vec()], dt: 0.0, action: 0.0 }));
    }
    let mut best: Option<ActionPath> = None;
    for y in surface_points {
        let solve = |t: f64| minimize_fixed_time(system, y, x_target, t, cfg.n_nodes, cfg.iters, cfg.lr);
        let ratio = if cfg.t_scan > 1 { (cfg.t_max / cfg.t_min).powf(1.0 / (cfg.t_scan - 1) as f64) } else { 1.0 };
        let times: Vec<f64> = (0..cfg.t_scan).map(|k| cfg.t_min * ratio.powi(k as i32)).collect();
        let scans = times.iter().map(|&t| solve(t)).collect::<Result<Vec<_>, _>>()?;
        let (kbest, _) = scans
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.action.total_cmp(&b.1.action))
            .expect("scan is non-empty");
        let mut local = scans[kbest].clone();
        if cfg.t_scan > 1 {
            // golden section on log T over the bracketing scan cells
            let mut lo = times[kbest.saturating_sub(1)].ln();
            let mut hi = times[(kbest + 1).min(cfg.t_scan - 1)].ln();
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let mut c = hi - g * (hi - lo);
            let mut d = lo + g * (hi - lo);
            let mut pc = solve(c.exp())?;
            let mut pd = solve(d.exp())?;
            for _ in 0..cfg.refine_iters {
                if pc.action < pd.action {
                    hi = d;
                    d = c;
                    pd = pc;
                    c = hi - g * (hi - lo);
                    pc = solve(c.exp())?;
                } else {
                    lo = c;
                    c = d;
                    pc = pd;
                    d = lo + g * (hi - lo);
                    pd = solve(d.exp())?;
                }
            }
            for cand in [pc, pd] {
                if cand.action < local.action {
                    local = cand;
                }
            }
        }
        if best.as_ref().is_none_or(|b| local.action < b.action) {
            best = Some(local);
        }
    }
    let path = best.expect("surface is non-empty");
    Ok((level + path.action, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;
    use crate::models::{figure8_hamiltonian, make_benchmark, BenchmarkSpec};

    struct Still;

    impl SdeSystem for Still {
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_noise(&self) -> usize {
            1
        }
        fn attractor_dim(&self) -> usize {
            0
        }
        fn drift(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn sigma(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn drift_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
        fn constant_diffusion(&self) -> bool {
            true
        }
    }

    fn ou() -> crate::Benchmark {
        make_benchmark(&BenchmarkSpec::new("ou1d")).unwrap()
    }

    fn state(x: Vec<f64>, p: Vec<f64>, v: f64) -> CharState {
        CharState { x, p, v, log_z: 0.0, s: 0.0 }
    }

    #[test]
    fn hand_computed_step() {
        let sys = ou();
        let s1 = symplectic_char_step(&sys, &state(vec![0.1], vec![0.2], 0.0), 0.1, None).unwrap();
        assert!((s1.x[0] - 0.12 / 1.1).abs() < 1e-13);
        assert!((s1.p[0] - 0.22).abs() < 1e-15);
        assert!((s1.v - 0.1 * 0.5 * 0.04).abs() < 1e-16);
        let h1 = hamiltonian(&sys, &s1.x, &s1.p);
        assert!((h1.abs() - 2.0e-4).abs() < 1e-5, "{h1}");
    }

    #[test]
    fn zero_costate_is_a_flow_line() {
        let sys = ou();
        let mut s = state(vec![0.8], vec![0.0], 0.0);
        for _ in 0..100 {
            let next = symplectic_char_step(&sys, &s, 0.01, None).unwrap();
            assert!((next.x[0] - s.x[0] / 1.01).abs() < 1e-14);
            assert_eq!(next.v, 0.0);
            s = next;
        }
    }

    #[test]
    fn ou_curves_track_quasi_potential() {
        let sys = ou();
        let domain = BoxDomain::new(vec![-2.0], vec![2.0]);
        let cfg = TraceConfig { h: 1e-4, v_max: 0.4, samples_per_curve: 20, max_steps: 100_000 };
        for x0 in [0.2, -0.2, 0.35] {
            let c = trace_curve(&sys, &state(vec![x0], vec![2.0 * x0], x0 * x0), &cfg, &domain, None).unwrap();
            assert_eq!(c.termination, Termination::ReachedVMax);
            assert_eq!(c.samples.len(), 20);
            assert!((c.terminal.x[0].abs() - 0.4f64.sqrt()).abs() < 2e-3);
            assert_eq!(c.terminal.x[0].signum(), x0.signum());
            for w in c.samples.windows(2) {
                assert!(w[1].v >= w[0].v && w[1].s > w[0].s);
            }
            for smp in &c.samples {
                assert!((smp.v - smp.x[0] * smp.x[0]).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn v_increment_is_exact_and_monotone() {
        let sys = make_benchmark(&BenchmarkSpec::new("vdp")).unwrap();
        let mut s = state(vec![1.0, 0.5], vec![0.3, -0.2], 0.0);
        let a = sys.diffusion(&s.x);
        for _ in 0..200 {
            let p = DVector::from_column_slice(&s.p);
            let dv = 0.5 * 1e-3 * p.dot(&(&a * &p));
            let next = symplectic_char_step(&sys, &s, 1e-3, None).unwrap();
            assert!((next.v - s.v - dv).abs() <= 1e-15);
            assert!(next.v >= s.v);
            s = next;
        }
    }

    /// First-order drift ratio under step halving, up to rounding of the leading term.
    const HALVING: f64 = 0.505;

    fn drift_over_unit_horizon(sys: &crate::Benchmark, x0: Vec<f64>, p0: Vec<f64>, h: f64) -> f64 {
        let h0 = hamiltonian(sys, &x0, &p0);
        let mut s = state(x0, p0, 0.0);
        let steps = (1.0 / h).round() as usize;
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            s = symplectic_char_step(sys, &s, h, None).unwrap();
            worst = worst.max((hamiltonian(sys, &s.x, &s.p) - h0).abs());
        }
        worst
    }

    #[test]
    fn energy_drift_is_first_order() {
        let sys = ou();
        let d1 = drift_over_unit_horizon(&sys, vec![0.2], vec![0.4], 1e-3);
        let d2 = drift_over_unit_horizon(&sys, vec![0.2], vec![0.4], 5e-4);
        assert!(d1 < 1e-3 && d2 <= HALVING * d1, "{d1} {d2}");
        let vdp = make_benchmark(&BenchmarkSpec::new("vdp")).unwrap();
        let d1 = drift_over_unit_horizon(&vdp, vec![1.0, 0.5], vec![0.1, -0.05], 1e-3);
        let d2 = drift_over_unit_horizon(&vdp, vec![1.0, 0.5], vec![0.1, -0.05], 5e-4);
        assert!(d1 < 1e-3 && d2 <= HALVING * d1, "{d1} {d2}");
    }

    #[test]
    fn figure8_curves_follow_hamiltonian_oracle() {
        let sys = make_benchmark(&BenchmarkSpec::new("figure8")).unwrap();
        let v = AnalyticField::figure8_quasi_potential(0.5);
        let domain = BoxDomain::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let seeds = seed_characteristics(&sys, &v, 0.06, 8, &domain, 3).unwrap();
        assert_eq!(seeds.len(), 8);
        // 0.5 H^2 peaks at 0.28125 in the lobe centres, so stay below that
        let cfg = TraceConfig { h: 1e-4, v_max: 0.2, samples_per_curve: 20, max_steps: 200_000 };
        let curves = trace_all(&sys, &seeds, &cfg, &domain, None).unwrap();
        for c in &curves {
            for smp in c.samples.iter().chain([&c.terminal]) {
                let (hh, _, _) = figure8_hamiltonian(smp.x[0], smp.x[1]);
                assert!((smp.v - 0.5 * hh * hh).abs() < 5e-3, "{} vs {}", smp.v, 0.5 * hh * hh);
            }
        }
    }

    #[test]
    fn seeding_ou_level() {
        let sys = ou();
        let v = AnalyticField::ou_quasi_potential(1);
        let domain = BoxDomain::new(vec![-2.0], vec![2.0]);
        let seeds = seed_characteristics(&sys, &v, 0.04, 30, &domain, 1).unwrap();
        assert_eq!(seeds.len(), 30);
        for s in &seeds {
            assert!((s.x[0].abs() - 0.2).abs() < 0.011);
            assert!((s.p[0] - 2.0 * s.x[0]).abs() < 1e-15);
        }
        assert!(seed_characteristics(&sys, &v, 0.04, 0, &domain, 1).unwrap().is_empty());
        let tiny = BoxDomain::new(vec![1.0], vec![2.0]);
        assert!(matches!(
            seed_characteristics(&sys, &v, 0.04, 1, &tiny, 1),
            Err(ExpandError::SeedingFailed { .. })
        ));
    }

    #[test]
    fn seed_above_v_max_gives_empty_curve() {
        let sys = ou();
        let domain = BoxDomain::new(vec![-2.0], vec![2.0]);
        let cfg = TraceConfig { h: 1e-3, v_max: 0.1, samples_per_curve: 20, max_steps: 1000 };
        let c = trace_curve(&sys, &state(vec![0.5], vec![1.0], 0.25), &cfg, &domain, None).unwrap();
        assert!(c.samples.is_empty());
        assert_eq!(c.termination, Termination::ReachedVMax);
    }

    #[test]
    fn short_and_escaping_curves() {
        let sys = ou();
        let domain = BoxDomain::new(vec![-0.5], vec![0.5]);
        let cfg = TraceConfig { h: 1e-3, v_max: 1.0, samples_per_curve: 20, max_steps: 5 };
        let c = trace_curve(&sys, &state(vec![0.2], vec![0.4], 0.04), &cfg, &domain, None).unwrap();
        assert_eq!(c.termination, Termination::StepLimit);
        assert_eq!(c.samples.len(), 5);
        let cfg = TraceConfig { max_steps: 100_000, ..cfg };
        let c = trace_curve(&sys, &state(vec![0.2], vec![0.4], 0.04), &cfg, &domain, None).unwrap();
        assert_eq!(c.termination, Termination::LeftDomain);
        assert!(c.terminal.x[0] <= 0.5);
    }

    #[test]
    fn ou_transport_keeps_prefactor_constant() {
        let sys = ou();
        let v = AnalyticField::ou_quasi_potential(1);
        let domain = BoxDomain::new(vec![-2.0], vec![2.0]);
        let cfg = TraceConfig { h: 1e-3, v_max: 0.5, samples_per_curve: 10, max_steps: 100_000 };
        let c = trace_curve(&sys, &state(vec![0.3], vec![0.6], 0.09), &cfg, &domain, Some(&v)).unwrap();
        let z = transport_z0(&c, 0.5642).unwrap();
        assert!(z.iter().all(|z| (z - 0.5642).abs() < 1e-12));
        assert!(transport_z0(&c, 0.0).unwrap().iter().all(|z| *z == 0.0));
        let plain = trace_curve(&sys, &state(vec![0.3], vec![0.6], 0.09), &cfg, &domain, None).unwrap();
        assert!(matches!(transport_z0(&plain, 1.0), Err(ExpandError::MissingTransport)));
    }

    #[test]
    fn constant_coefficient_transport() {
        // V = x^2 under pure diffusion gives c = 1/2 * 1 * 2 = 1
        let sys = Still;
        let v = AnalyticField::ou_quasi_potential(1);
        let mut s = state(vec![0.1], vec![0.0], 0.0);
        for _ in 0..1000 {
            s = symplectic_char_step(&sys, &s, 1e-3, Some(&v)).unwrap();
        }
        let curve = CharacteristicCurve {
            samples: vec![s.clone()],
            terminal: s,
            termination: Termination::StepLimit,
            steps: 1000,
            transported: true,
        };
        assert!((transport_z0(&curve, 1.0).unwrap()[0] - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn action_gradient_matches_fd() {
        let sys = make_benchmark(&BenchmarkSpec::new("vdp")).unwrap();
        let a_inv = diffusion_inverse(&sys, &[0.0, 0.0]).unwrap();
        let nodes: Vec<Vec<f64>> = (0..7).map(|k| vec![0.1 * k as f64, (0.3 * k as f64).sin()]).collect();
        let mut grad = vec![vec![0.0; 2]; 7];
        let s = discrete_action(&sys, &nodes, 0.2, &a_inv, Some(&mut grad));
        assert!((s - discrete_action(&sys, &nodes, 0.2, &a_inv, None)).abs() < 1e-15);
        for k in 0..7 {
            for i in 0..2 {
                let mut p = nodes.clone();
                p[k][i] += 1e-6;
                let fp = discrete_action(&sys, &p, 0.2, &a_inv, None);
                p[k][i] -= 2e-6;
                let fm = discrete_action(&sys, &p, 0.2, &a_inv, None);
                let fd = (fp - fm) / 2e-6;
                assert!((grad[k][i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{k} {i}");
            }
        }
    }

    #[test]
    fn action_matches_riemann_sum() {
        let sys = ou();
        let nodes: Vec<Vec<f64>> = (0..11).map(|k| vec![0.3 + 0.03 * k as f64]).collect();
        let dt = 0.1;
        let mut path = ActionPath { nodes: nodes.clone(), dt, action: 0.0 };
        let s = path.recompute(&sys).unwrap();
        // velocity 0.3, f = -x, A = 1
        let mut sum = 0.0;
        for k in 0..10 {
            let (a, b) = (nodes[k][0], nodes[k + 1][0]);
            sum += dt * 0.5 * (0.5 * (0.3 + a).powi(2) + 0.5 * (0.3 + b).powi(2));
        }
        assert!((s - sum).abs() < 1e-12);
        assert_eq!(path.action, s);
    }

    #[test]
    fn descent_reduces_action() {
        let sys = ou();
        let mut last = f64::INFINITY;
        for it in 0..=10 {
            let p = minimize_fixed_time(&sys, &[0.3], &[0.6], 5.0, 50, it, 0.4).unwrap();
            assert!(p.action < last);
            last = p.action;
        }
    }

    #[test]
    fn ou_min_action() {
        let sys = ou();
        let (est, path) = min_action_estimate(&sys, &[0.6], &[vec![0.3]], 0.09, &MinActionConfig::default()).unwrap();
        assert!((est - 0.36).abs() < 0.02, "{est}");
        assert!(path.action >= 0.0);
        let (same, _) = min_action_estimate(&sys, &[0.3], &[vec![0.3]], 0.09, &MinActionConfig::default()).unwrap();
        assert!((same - 0.09).abs() < 1e-12);
        assert!(matches!(
            min_action_estimate(&sys, &[0.6], &[], 0.09, &MinActionConfig::default()),
            Err(ExpandError::EmptySurface)
        ));
    }
}
