//! Euler–Maruyama ensembles, deterministic integration and attractor sampling.

use std::io::{self, Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::SdeSystem;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no trajectories requested")]
    NoTrajectories,
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
    #[error("requested {requested} attractor points but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("bad raw sample stream: {0}")]
    BadStream(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EscapePolicy {
    #[default]
    None,
    /// A step leaving the domain is rolled back; the trajectory continues from the last inside point.
    RestartAtLastInside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn is_valid(&self) -> bool {
        self.lower.len() == self.upper.len()
            && !self.lower.is_empty()
            && self.lower.iter().zip(&self.upper).all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi)
    }
}

fn default_burn_in() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    pub dt: f64,
    /// Horizon of each trajectory.
    pub total_time: f64,
    pub n_traj: usize,
    /// Time between retained samples; a multiple of `dt`.
    pub sample_interval: f64,
    pub seed: u64,
    pub domain: BoxDomain,
    #[serde(default)]
    pub escape_policy: EscapePolicy,
    pub initial: Vec<f64>,
    /// Fraction of each trajectory discarded before sampling.
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
}

fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    let r = num / den;
    let k = r.round();
    if k >= 1.0 && (r - k).abs() <= 1e-9 * k.max(1.0) {
        Some(k as u64)
    } else {
        None
    }
}

impl SimConfig {
    /// Returns `(steps per trajectory, steps between samples, burn-in steps)`.
    pub fn step_counts(&self, dim: usize) -> Result<(u64, u64, u64), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be finite and >= 0");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.n_traj == 0 {
            return Err(SimError::NoTrajectories);
        }
        if !self.domain.is_valid() || self.domain.dim() != dim {
            return bad("domain box must be nonempty and match the state dimension");
        }
        if self.initial.len() != dim || self.initial.iter().any(|v| !v.is_finite()) {
            return bad("initial point must be finite with the state dimension");
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return bad("burn_in_fraction must lie in [0, 1)");
        }
        let steps = integer_ratio(self.total_time, self.dt)
            .ok_or_else(|| SimError::InvalidConfig("total_time / dt must be a positive integer".into()))?;
        let stride = integer_ratio(self.sample_interval, self.dt)
            .ok_or_else(|| SimError::InvalidConfig("sample_interval / dt must be a positive integer".into()))?;
        if self.escape_policy == EscapePolicy::RestartAtLastInside && !self.domain.contains(&self.initial) {
            return bad("initial point must lie inside the domain when escapes are rolled back");
        }
        let burn_in = (self.burn_in_fraction * steps as f64).floor() as u64;
        Ok((steps, stride, burn_in))
    }
}

/// Consumer of retained samples. One sink per trajectory; sinks are merged afterwards.
pub trait SampleSink: Send {
    fn push(&mut self, x: &[f64]);
    fn absorb(&mut self, other: Self)
    where
        Self: Sized;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub steps: u64,
    pub samples: u64,
    pub escapes: u64,
    /// Trajectories stopped early because the state became non-finite: `(index, step)`.
    pub aborted: Vec<(usize, u64)>,
}

struct TrajectoryOutcome<S> {
    sink: S,
    steps: u64,
    samples: u64,
    escapes: u64,
    aborted_at: Option<u64>,
}

/// Runs `cfg.n_traj` independent trajectories of the SDE and feeds every retained
/// sample to a per-trajectory sink; sinks are merged in trajectory order.
///
/// Trajectory `i` draws its noise from ChaCha8 keyed by `(cfg.seed, stream i)`, so
/// results do not depend on scheduling.
pub fn simulate_ensemble<M, S, F>(system: &M, cfg: &SimConfig, make_sink: F) -> Result<(S, SimSummary), SimError>
where
    M: SdeSystem + ?Sized,
    S: SampleSink,
    F: Fn(usize) -> S + Sync,
{
    let n = system.dim_state();
    let (steps, stride, burn_in) = cfg.step_counts(n)?;
    let outcomes: Vec<TrajectoryOutcome<S>> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| run_trajectory(system, cfg, i, steps, stride, burn_in, make_sink(i)))
        .collect();
    let mut summary = SimSummary::default();
    let mut merged: Option<S> = None;
    for (i, out) in outcomes.into_iter().enumerate() {
        summary.steps += out.steps;
        summary.samples += out.samples;
        summary.escapes += out.escapes;
        if let Some(step) = out.aborted_at {
            summary.aborted.push((i, step));
        }
        match merged.as_mut() {
            None => merged = Some(out.sink),
            Some(m) => m.absorb(out.sink),
        }
    }
    Ok((merged.expect("n_traj > 0"), summary))
}

fn run_trajectory<M: SdeSystem + ?Sized, S: SampleSink>(
    system: &M,
    cfg: &SimConfig,
    index: usize,
    steps: u64,
    stride: u64,
    burn_in: u64,
    sink: S,
) -> TrajectoryOutcome<S> {
    let n = system.dim_state();
    let m = system.dim_noise();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let noise_scale = (cfg.epsilon * cfg.dt).sqrt();
    let rollback = cfg.escape_policy == EscapePolicy::RestartAtLastInside;

    let mut x = cfg.initial.clone();
    let mut next = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut xi = vec![0.0; m];
    let mut out = TrajectoryOutcome { sink, steps: 0, samples: 0, escapes: 0, aborted_at: None };
    for step in 1..=steps {
        system.drift(&x, &mut f);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        system.add_noise(&x, &xi, noise_scale, &mut next);
        let mut finite = true;
        for k in 0..n {
            next[k] += f[k] * cfg.dt;
            finite &= next[k].is_finite();
        }
        out.steps = step;
        if !finite {
            out.aborted_at = Some(step);
            break;
        }
        if rollback && !cfg.domain.contains(&next) {
            out.escapes += 1;
        } else {
            std::mem::swap(&mut x, &mut next);
        }
        if step > burn_in && step % stride == 0 {
            out.sink.push(&x);
            out.samples += 1;
        }
    }
    out
}

/// Flat buffer of retained samples, merged by concatenation in trajectory order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBuffer {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SampleBuffer {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

impl SampleSink for SampleBuffer {
    fn push(&mut self, x: &[f64]) {
        self.data.extend_from_slice(x);
    }
    fn absorb(&mut self, other: Self) {
        self.data.extend(other.data);
    }
}

const RAW_MAGIC: &[u8; 4] = b"DWKB";
const RAW_VERSION: u32 = 1;

/// Writes the raw sample dump: `"DWKB"`, version, dimension, reserved (all `u32` LE),
/// then little-endian `f64` tuples.
pub fn write_raw_samples<W: Write>(mut w: W, buffer: &SampleBuffer) -> io::Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&(buffer.dim as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in &buffer.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw_samples<R: Read>(mut r: R) -> Result<SampleBuffer, SimError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != RAW_MAGIC {
        return Err(SimError::BadStream("magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != RAW_VERSION {
        return Err(SimError::BadStream(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if dim == 0 || bytes.len() % (8 * dim) != 0 {
        return Err(SimError::BadStream("truncated record".into()));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(SampleBuffer { dim, data })
}

/// Deterministic trajectory sampled at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

fn rk4_step<M: SdeSystem + ?Sized>(system: &M, x: &[f64], dt: f64, scratch: &mut [Vec<f64>; 5]) -> Vec<f64> {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    system.drift(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    system.drift(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    system.drift(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    system.drift(tmp, k4);
    (0..n).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Integrates the noise-free flow with classical fourth-order Runge–Kutta and a fixed step.
pub fn integrate_ode<M: SdeSystem + ?Sized>(
    system: &M,
    x0: &[f64],
    dt: f64,
    total_time: f64,
) -> Result<Trajectory, SimError> {
    if x0.iter().any(|v| !v.is_finite()) || x0.len() != system.dim_state() {
        return Err(SimError::InvalidConfig("x0 must be finite with the state dimension".into()));
    }
    let steps = integer_ratio(total_time, dt)
        .ok_or_else(|| SimError::InvalidConfig("total_time / dt must be a positive integer".into()))?;
    let n = x0.len();
    let mut scratch = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut states = Vec::with_capacity(steps as usize + 1);
    states.push(x0.to_vec());
    for k in 1..=steps {
        let next = rk4_step(system, states.last().unwrap(), dt, &mut scratch);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { time: k as f64 * dt });
        }
        states.push(next);
    }
    Ok(Trajectory { dt, states })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSample {
    pub points: Vec<Vec<f64>>,
    pub burn_in: f64,
}

/// Integrates through `burn_in`, then picks `count` distinct time steps uniformly from
/// the following `collect_time` and returns the states at those steps.
pub fn sample_attractor<M: SdeSystem + ?Sized>(
    system: &M,
    x0: &[f64],
    dt: f64,
    burn_in: f64,
    collect_time: f64,
    count: usize,
    seed: u64,
) -> Result<AttractorSample, SimError> {
    let start = if burn_in > 0.0 {
        integrate_ode(system, x0, dt, burn_in)?.states.pop().unwrap()
    } else {
        x0.to_vec()
    };
    let steps = integer_ratio(collect_time, dt)
        .ok_or_else(|| SimError::InvalidConfig("collect_time / dt must be a positive integer".into()))?
        as usize;
    if count > steps {
        return Err(SimError::NotEnoughSamples { requested: count, available: steps });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, steps, count).into_vec();
    picks.sort_unstable();

    let n = start.len();
    let mut scratch = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut points = Vec::with_capacity(count);
    let mut x = start;
    let mut next_pick = picks.iter().peekable();
    for k in 0..steps {
        x = rk4_step(system, &x, dt, &mut scratch);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { time: burn_in + (k + 1) as f64 * dt });
        }
        while next_pick.peek() == Some(&&k) {
            points.push(x.clone());
            next_pick.next();
        }
        if next_pick.peek().is_none() {
            break;
        }
    }
    Ok(AttractorSample { points, burn_in })
}
