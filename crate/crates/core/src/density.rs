//! Grid histograms, empirical densities `N0 / (h N)` and collocation selection.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulate::SampleSink;

/// Bins whose count is below this are treated as having insufficient data.
pub const DEFAULT_MIN_COUNT: u64 = 20;
/// Upper bound on the number of bins a grid may declare.
pub const MAX_BINS: u64 = 1 << 48;
/// Grids up to this dimension store counts densely.
const DENSE_MAX_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point lies outside the grid")]
    OutsideGrid,
    #[error("histograms are defined on different grids")]
    GridMismatch,
    #[error("requested {requested} distinct bins but only {available} are available")]
    NotEnoughBins { requested: usize, available: usize },
    #[error("no histograms supplied")]
    NoHistograms,
    #[error("bad histogram file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins: Vec<usize>) -> Result<Self, DensityError> {
        let g = Self { lower, upper, bins };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        let n = self.lower.len();
        if n == 0 || self.upper.len() != n || self.bins.len() != n {
            return Err(DensityError::InvalidGrid("corner and bin lists must share a nonzero length".into()));
        }
        for k in 0..n {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DensityError::InvalidGrid(format!("axis {k} has bounds [{lo}, {hi}]")));
            }
            if self.bins[k] == 0 {
                return Err(DensityError::InvalidGrid(format!("axis {k} has no bins")));
            }
        }
        let mut total: u64 = 1;
        for &b in &self.bins {
            total = total
                .checked_mul(b as u64)
                .filter(|t| *t <= MAX_BINS)
                .ok_or_else(|| DensityError::InvalidGrid("too many bins".into()))?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn total_bins(&self) -> u64 {
        self.bins.iter().map(|&b| b as u64).product()
    }

    pub fn width(&self, k: usize) -> f64 {
        (self.upper[k] - self.lower[k]) / self.bins[k] as f64
    }

    pub fn bin_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).product()
    }

    /// Bin index along axis `k`, using `[lo, hi)` bins with the last bin closed.
    pub fn axis_index(&self, k: usize, v: f64) -> Option<usize> {
        let (lo, hi, b) = (self.lower[k], self.upper[k], self.bins[k]);
        if !(v >= lo && v <= hi) {
            return None;
        }
        if v == hi {
            return Some(b - 1);
        }
        let w = self.width(k);
        let mut i = (((v - lo) / w).floor() as usize).min(b - 1);
        // Guard against rounding in the division near edges.
        if i + 1 < b && v >= lo + (i + 1) as f64 * w {
            i += 1;
        } else if i > 0 && v < lo + i as f64 * w {
            i -= 1;
        }
        Some(i)
    }

    /// Flat index, axis 0 most significant.
    pub fn locate(&self, x: &[f64]) -> Option<u64> {
        let mut flat: u64 = 0;
        for (k, v) in x.iter().enumerate() {
            let i = self.axis_index(k, *v)?;
            flat = flat * self.bins[k] as u64 + i as u64;
        }
        Some(flat)
    }

    pub fn multi_index(&self, mut flat: u64) -> Vec<usize> {
        let n = self.dim();
        let mut idx = vec![0; n];
        for k in (0..n).rev() {
            let b = self.bins[k] as u64;
            idx[k] = (flat % b) as usize;
            flat /= b;
        }
        idx
    }

    pub fn center(&self, flat: u64) -> Vec<f64> {
        self.multi_index(flat)
            .into_iter()
            .enumerate()
            .map(|(k, i)| self.lower[k] + (i as f64 + 0.5) * self.width(k))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Counts {
    Dense(Vec<u64>),
    Sparse(BTreeMap<u64, u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    pub grid: GridSpec,
    counts: Counts,
    /// All samples seen, including those outside the grid.
    pub total: u64,
    pub epsilon: f64,
}

/// Empirical density of one bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub u_hat: f64,
    pub n0: u64,
    pub n: u64,
    /// False when `n0 < min_count`.
    pub sufficient: bool,
}

impl DensityHistogram {
    pub fn new(grid: GridSpec, epsilon: f64) -> Self {
        let counts = if grid.dim() <= DENSE_MAX_DIM {
            Counts::Dense(vec![0; grid.total_bins() as usize])
        } else {
            Counts::Sparse(BTreeMap::new())
        };
        Self { grid, counts, total: 0, epsilon }
    }

    /// Records one sample; off-grid samples only increase `total`.
    pub fn bin_sample(&mut self, x: &[f64]) {
        self.total += 1;
        if let Some(flat) = self.grid.locate(x) {
            self.add_count(flat, 1);
        }
    }

    fn add_count(&mut self, flat: u64, c: u64) {
        match &mut self.counts {
            Counts::Dense(v) => v[flat as usize] += c,
            Counts::Sparse(m) => *m.entry(flat).or_insert(0) += c,
        }
    }

    pub fn count(&self, flat: u64) -> u64 {
        match &self.counts {
            Counts::Dense(v) => v.get(flat as usize).copied().unwrap_or(0),
            Counts::Sparse(m) => m.get(&flat).copied().unwrap_or(0),
        }
    }

    /// Nonzero bins in increasing index order.
    pub fn occupied(&self) -> Vec<(u64, u64)> {
        match &self.counts {
            Counts::Dense(v) => {
                v.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, c)| (i as u64, *c)).collect()
            }
            Counts::Sparse(m) => m.iter().map(|(i, c)| (*i, *c)).collect(),
        }
    }

    pub fn on_grid(&self) -> u64 {
        match &self.counts {
            Counts::Dense(v) => v.iter().sum(),
            Counts::Sparse(m) => m.values().sum(),
        }
    }

    pub fn off_grid(&self) -> u64 {
        self.total - self.on_grid()
    }

    pub fn merge(&mut self, other: &DensityHistogram) -> Result<(), DensityError> {
        if self.grid != other.grid {
            return Err(DensityError::GridMismatch);
        }
        self.total += other.total;
        match (&mut self.counts, &other.counts) {
            (Counts::Dense(a), Counts::Dense(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            _ => {
                for (i, c) in other.occupied() {
                    self.add_count(i, c);
                }
            }
        }
        Ok(())
    }

    /// `N0 / (h N)` for bin `flat`, or 0 when nothing has been recorded.
    pub fn density_at(&self, flat: u64) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(flat) as f64 / (self.grid.bin_volume() * self.total as f64)
        }
    }

    pub fn estimate_at(&self, flat: u64, min_count: u64) -> DensityEstimate {
        let n0 = self.count(flat);
        DensityEstimate { u_hat: self.density_at(flat), n0, n: self.total, sufficient: n0 >= min_count.max(1) }
    }

    pub fn empirical_density(&self, x: &[f64], min_count: u64) -> Result<DensityEstimate, DensityError> {
        let flat = self.grid.locate(x).ok_or(DensityError::OutsideGrid)?;
        Ok(self.estimate_at(flat, min_count))
    }

    /// `sum_bins u_hat * h`, the fraction of samples on the grid.
    pub fn riemann_mass(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.on_grid() as f64 / self.total as f64
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.grid.dim();
        w.write_all(HIST_MAGIC)?;
        w.write_all(&HIST_VERSION.to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        for &b in &self.grid.bins {
            w.write_all(&(b as u64).to_le_bytes())?;
        }
        for v in self.grid.lower.iter().chain(&self.grid.upper) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.epsilon.to_le_bytes())?;
        w.write_all(&self.total.to_le_bytes())?;
        let occ = self.occupied();
        w.write_all(&(occ.len() as u64).to_le_bytes())?;
        for (i, c) in occ {
            w.write_all(&i.to_le_bytes())?;
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DensityError> {
        let bad = |m: &str| DensityError::BadFile(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != HIST_MAGIC {
            return Err(bad("magic"));
        }
        if read_u32(&mut r)? != HIST_VERSION {
            return Err(bad("version"));
        }
        let n = read_u32(&mut r)? as usize;
        if n == 0 || n > 64 {
            return Err(bad("dimension"));
        }
        let bins = (0..n).map(|_| read_u64(&mut r).map(|b| b as usize)).collect::<Result<Vec<_>, _>>()?;
        let lower = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let upper = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let grid = GridSpec::new(lower, upper, bins)?;
        let epsilon = read_f64(&mut r)?;
        let total = read_u64(&mut r)?;
        let records = read_u64(&mut r)?;
        let mut hist = DensityHistogram::new(grid, epsilon);
        hist.total = total;
        for _ in 0..records {
            let i = read_u64(&mut r)?;
            let c = read_u64(&mut r)?;
            if i >= hist.grid.total_bins() {
                return Err(bad("bin index out of range"));
            }
            hist.add_count(i, c);
        }
        if hist.on_grid() > total {
            return Err(bad("counts exceed total"));
        }
        Ok(hist)
    }

    /// CSV of `(bin center coordinates, u_hat)` for occupied bins.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.grid.dim()).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},u_hat", header.join(","))?;
        for (i, _) in self.occupied() {
            let c = self.grid.center(i);
            let coords: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", coords.join(","), self.density_at(i))?;
        }
        Ok(())
    }
}

impl SampleSink for DensityHistogram {
    fn push(&mut self, x: &[f64]) {
        self.bin_sample(x);
    }
    fn absorb(&mut self, other: Self) {
        self.merge(&other).expect("sinks share one grid");
    }
}

const HIST_MAGIC: &[u8; 8] = b"DWKBHIST";
const HIST_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointOrigin {
    Trajectory,
    Uniform,
    Attractor,
    Characteristic,
    Artificial,
}

/// Collocation points with their origin and, for bin centers, the per-level
/// `(N0, N)` counts in ladder order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollocationSet {
    pub points: Vec<Vec<f64>>,
    pub origins: Vec<PointOrigin>,
    pub counts: Vec<Option<Vec<(u64, u64)>>>,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vec<f64>, origin: PointOrigin, counts: Option<Vec<(u64, u64)>>) {
        self.points.push(point);
        self.origins.push(origin);
        self.counts.push(counts);
    }
}

/// Per-level `(N0, N)` of bin `flat` across `histograms`.
pub fn counts_at(histograms: &[DensityHistogram], flat: u64) -> Vec<(u64, u64)> {
    histograms.iter().map(|h| (h.count(flat), h.total)).collect()
}

/// Picks `m` distinct bin centers: `round(m * traj_fraction)` drawn with probability
/// proportional to the counts at the largest noise level (weighted sampling without
/// replacement), the rest uniformly among the remaining bins.
///
/// `histograms` must be sorted by increasing epsilon and share one grid.
pub fn select_collocation(
    histograms: &[DensityHistogram],
    m: usize,
    traj_fraction: f64,
    seed: u64,
) -> Result<CollocationSet, DensityError> {
    let top = histograms.last().ok_or(DensityError::NoHistograms)?;
    if histograms.iter().any(|h| h.grid != top.grid) {
        return Err(DensityError::GridMismatch);
    }
    let grid = &top.grid;
    let k_traj = ((m as f64) * traj_fraction.clamp(0.0, 1.0)).round() as usize;
    let k_uniform = m - k_traj;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen: Vec<(u64, PointOrigin)> = Vec::with_capacity(m);
    let mut taken: HashSet<u64> = HashSet::with_capacity(m);
    if k_traj > 0 {
        let occ = top.occupied();
        if k_traj > occ.len() {
            return Err(DensityError::NotEnoughBins { requested: k_traj, available: occ.len() });
        }
        // Efraimidis–Spirakis: keep the k largest ln(u)/w.
        let mut keyed: Vec<(f64, u64)> = occ
            .iter()
            .map(|&(i, c)| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / c as f64, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(k_traj) {
            taken.insert(i);
            chosen.push((i, PointOrigin::Trajectory));
        }
    }
    let total = grid.total_bins();
    let free = total - taken.len() as u64;
    if (k_uniform as u64) > free {
        return Err(DensityError::NotEnoughBins { requested: k_uniform, available: free as usize });
    }
    if (k_uniform as u64) * 2 > free {
        // Dense request: shuffle the free bins instead of rejecting.
        let mut pool: Vec<u64> = (0..total).filter(|i| !taken.contains(i)).collect();
        for j in 0..k_uniform {
            let pick = rng.random_range(j..pool.len());
            pool.swap(j, pick);
            chosen.push((pool[j], PointOrigin::Uniform));
        }
    } else {
        let mut drawn = 0;
        while drawn < k_uniform {
            let i = rng.random_range(0..total);
            if taken.insert(i) {
                chosen.push((i, PointOrigin::Uniform));
                drawn += 1;
            }
        }
    }

    let mut set = CollocationSet::default();
    for (i, origin) in chosen {
        set.push(grid.center(i), origin, Some(counts_at(histograms, i)));
    }
    Ok(set)
}
