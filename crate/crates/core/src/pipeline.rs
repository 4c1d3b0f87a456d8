//! Stage orchestration, run configuration, artifacts and the density diagnostics.
//!
//! A run is a chain of eight stages sharing one output directory. Every stage writes
//! its artifacts there and appends a record with SHA-256 hashes to `manifest.json`.
//! A stage is skipped when its fingerprint (relevant config section plus the upstream
//! record) and its output hashes are unchanged. Wall-clock timings go to
//! `timing.json` so that manifests of identical runs are byte-identical.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::density::{counts_at, select_collocation, CollocationSet, DensityError, DensityHistogram, GridSpec, PointOrigin};
use crate::expand::{seed_characteristics, trace_all, transport_z0, ExpandError, Termination, TraceConfig};
use crate::field::{ScalarField, ScaledField};
use crate::models::{make_benchmark, Benchmark, BenchmarkSpec, ModelError, SdeSystem};
use crate::net::{Mlp, MlpSpec, NetError};
use crate::regression::{
    extrapolate_z0_attractor, regress_all, write_results_csv, BatchRegression, LevelData, NoiseLadder,
    RegressionError, RegressionResult,
};
use crate::simulate::{sample_attractor, simulate_ensemble, BoxDomain, EscapePolicy, SimConfig, SimError};
use crate::train_v::{
    assemble_qp_sets, estimate_alpha, EpochLog, qp_loss, reliable_pairs, write_log_csv, AssembleOptions, QpTrainingSets,
    TrainConfig, TrainError, Trainer,
};
use crate::train_z::{assemble_z_sets, z_loss, ZCounts, ZSources};
use crate::validation::{validate_wkb, ValidationError};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{needs}` to be completed first")]
    MissingDependency { stage: Stage, needs: Stage },
    #[error("artifact `{0}` does not match its recorded hash")]
    HashMismatch(String),
    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Net(#[from] NetError),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Regress,
    Validate,
    TrainV,
    Expand,
    TrainZ,
    Evaluate,
    FpResidual,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Simulate,
        Stage::Regress,
        Stage::Validate,
        Stage::TrainV,
        Stage::Expand,
        Stage::TrainZ,
        Stage::Evaluate,
        Stage::FpResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Regress => "regress",
            Stage::Validate => "validate",
            Stage::TrainV => "train-v",
            Stage::Expand => "expand",
            Stage::TrainZ => "train-z",
            Stage::Evaluate => "evaluate",
            Stage::FpResidual => "fp-residual",
        }
    }

    fn position(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("listed")
    }

    /// The stage that must be complete before this one.
    pub fn dependency(self) -> Option<Stage> {
        self.position().checked_sub(1).map(|i| Stage::ALL[i])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL.iter().copied().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    /// Noise levels as `sqrt(eps)`, strictly increasing.
    pub sqrt_eps: Vec<f64>,
}

impl LadderConfig {
    pub fn eps(&self) -> Vec<f64> {
        self.sqrt_eps.iter().map(|s| s * s).collect()
    }
}

/// Simulation settings shared by every noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub total_time: f64,
    pub n_traj: usize,
    pub sample_interval: f64,
    pub domain: BoxDomain,
    #[serde(default)]
    pub escape_policy: EscapePolicy,
    pub initial: Vec<f64>,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
}

fn default_burn_in() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorConfig {
    pub count: usize,
    pub dt: f64,
    pub burn_in: f64,
    pub collect_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default = "default_quantile")]
    pub far_field_quantile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far_field_threshold: Option<f64>,
    /// Smallest noise levels used for the attractor prefactor; default half the ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attractor_levels: Option<usize>,
}

fn default_min_count() -> u64 {
    crate::density::DEFAULT_MIN_COUNT
}
fn default_quantile() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    #[serde(default = "default_significance")]
    pub significance: f64,
}

fn default_significance() -> f64 {
    crate::validation::DEFAULT_SIGNIFICANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationConfig {
    /// Regression points (distinct bins).
    pub points: usize,
    #[serde(default = "default_half")]
    pub traj_fraction: f64,
    /// Free points for the residual losses.
    pub residual_points: usize,
    #[serde(default = "default_far_density")]
    pub far_field_density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artificial_value: Option<f64>,
}

fn default_half() -> f64 {
    0.5
}
fn default_far_density() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandConfig {
    pub enabled: bool,
    pub level: f64,
    pub count: usize,
    pub h: f64,
    pub v_max: f64,
    pub samples_per_curve: usize,
    pub max_steps: usize,
    /// Epochs of continued V training on the expanded set (before fine-tuning).
    pub retrain_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainZConfig {
    pub schedule: TrainConfig,
    #[serde(default)]
    pub counts: ZCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub epsilon: f64,
    /// Evaluation grid; defaults to the histogram grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<SliceSpec>,
}

/// Planar cut through a higher-dimensional state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// Full state; entries on free axes are overwritten.
    pub point: Vec<f64>,
    /// State axes driven by the grid axes, in order.
    pub free_axes: Vec<usize>,
}

impl SliceSpec {
    pub fn embed(&self, c: &[f64]) -> Vec<f64> {
        let mut x = self.point.clone();
        for (a, v) in self.free_axes.iter().zip(c) {
            x[*a] = *v;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    /// Drives simulation, collocation and attractor sampling.
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub benchmark: BenchmarkSpec,
    pub ladder: LadderConfig,
    pub grid: GridSpec,
    pub simulation: SimulationConfig,
    pub attractor: AttractorConfig,
    pub regression: RegressionConfig,
    pub validation: ValidationConfig,
    pub collocation: CollocationConfig,
    /// Shared by the V and Z networks.
    pub network: MlpSpec,
    pub train_v: TrainConfig,
    pub expand: ExpandConfig,
    pub train_z: TrainZConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(PipelineError::Config(format!("unsupported config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Cross-field checks; returns the benchmark.
    pub fn validate(&self) -> Result<Benchmark> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let system = make_benchmark(&self.benchmark)?;
        let n = system.dim_state();
        NoiseLadder::new(self.ladder.eps()).map_err(|_| {
            PipelineError::Config("ladder needs more than 3 strictly increasing positive levels".into())
        })?;
        self.grid.validate()?;
        if self.grid.dim() != n {
            return bad(format!("grid has dimension {} but the benchmark has {n}", self.grid.dim()));
        }
        if self.simulation.domain.dim() != n || self.simulation.initial.len() != n {
            return bad("simulation domain and initial point must match the state dimension".into());
        }
        if self.network.input_dim() != n {
            return bad(format!("network input width {} != state dimension {n}", self.network.input_dim()));
        }
        self.network.validate()?;
        self.train_v.validate()?;
        self.train_z.schedule.validate()?;
        if let Some(g) = &self.evaluate.grid {
            g.validate()?;
        }
        let eval_dim = self.evaluate.grid.as_ref().map_or(n, |g| g.dim());
        match &self.evaluate.slice {
            Some(s)
                if s.point.len() != n
                    || s.free_axes.len() != eval_dim
                    || s.free_axes.iter().any(|a| *a >= n)
                    || (1..s.free_axes.len()).any(|i| s.free_axes[..i].contains(&s.free_axes[i])) =>
            {
                return bad("slice needs a full state point and one distinct free axis per grid axis".into());
            }
            None if eval_dim != n => return bad("a lower-dimensional evaluation grid needs a slice".into()),
            _ => {}
        }
        if !(self.evaluate.epsilon > 0.0) {
            return bad("evaluation epsilon must be positive".into());
        }
        Ok(system)
    }

    /// Defaults per benchmark. `ou1d` is a desk-scale run; the others carry the
    /// published scales (grid, ladder, horizon, set sizes, training schedule).
    pub fn for_benchmark(id: &str) -> Result<Self> {
        let sqrt = |v: &[f64]| LadderConfig { sqrt_eps: v.to_vec() };
        let full_ladder = [0.08, 0.09, 0.1, 0.11, 0.12, 0.14, 0.16, 0.18, 0.2, 0.24];
        let square = |lo: f64, hi: f64, n: usize, bins: usize| {
            GridSpec::new(vec![lo; n], vec![hi; n], vec![bins; n]).expect("valid grid")
        };
        let domain = |lo: f64, hi: f64, n: usize| BoxDomain::new(vec![lo; n], vec![hi; n]);
        let spec = BenchmarkSpec::new(id);
        let system = make_benchmark(&spec)?;
        let n = system.dim_state();
        let full_train = TrainConfig::default();
        let mut cfg = RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            benchmark: spec,
            ladder: sqrt(&full_ladder),
            grid: square(-3.0, 3.0, n, 1024),
            simulation: SimulationConfig {
                dt: 0.002,
                total_time: 1e7,
                n_traj: 10,
                sample_interval: 0.02,
                domain: domain(-3.0, 3.0, n),
                escape_policy: EscapePolicy::None,
                initial: vec![0.5; n],
                burn_in_fraction: default_burn_in(),
            },
            attractor: AttractorConfig { count: 3551, dt: 0.002, burn_in: 1000.0, collect_time: 50000.0 },
            regression: RegressionConfig {
                min_count: default_min_count(),
                far_field_quantile: default_quantile(),
                far_field_threshold: None,
                attractor_levels: None,
            },
            validation: ValidationConfig { significance: default_significance() },
            collocation: CollocationConfig {
                points: 5000,
                traj_fraction: 0.5,
                residual_points: 20000,
                far_field_density: default_far_density(),
                artificial_value: None,
            },
            network: MlpSpec::standard(n),
            train_v: full_train.clone(),
            expand: ExpandConfig {
                enabled: true,
                level: 0.05,
                count: 171,
                h: 1e-4,
                v_max: 0.4,
                samples_per_curve: 20,
                max_steps: 1_000_000,
                retrain_epochs: 50,
                seed: 1,
            },
            train_z: TrainZConfig {
                schedule: TrainConfig { seed: 2, ..full_train },
                counts: ZCounts { attractor: None, regression: Some(3000), transported: Some(3000), residual: None },
            },
            evaluate: EvaluateConfig { epsilon: 0.0225, grid: None, slice: None },
        };
        match id {
            "vdp" => {}
            "figure8" => {
                cfg.simulation.total_time = 2e10 * 0.002 / cfg.simulation.n_traj as f64;
                cfg.simulation.initial = vec![1.0, 0.0];
                cfg.expand.level = 0.06;
                cfg.expand.count = 273;
                cfg.expand.samples_per_curve = 15;
                cfg.evaluate.epsilon = 0.0225;
                cfg.attractor.burn_in = 200.0;
            }
            "coupled_vdp" => {
                cfg.grid = square(-3.0, 3.0, n, 64);
                cfg.collocation.points = 50000;
                cfg.evaluate = EvaluateConfig {
                    epsilon: 0.0225,
                    grid: Some(square(-3.0, 3.0, 2, 256)),
                    slice: Some(SliceSpec { point: vec![0.0; 4], free_axes: vec![0, 1] }),
                };
            }
            "rossler" => {
                cfg.ladder = sqrt(&[0.1, 0.11, 0.12, 0.14, 0.16, 0.18, 0.2, 0.22, 0.24, 0.28]);
                cfg.grid = GridSpec::new(vec![-15.0, -15.0, -1.5], vec![15.0, 15.0, 1.5], vec![256, 256, 32])
                    .expect("valid grid");
                cfg.simulation.dt = 0.001;
                cfg.simulation.sample_interval = 0.01;
                cfg.simulation.total_time = 4e10 * 0.001 / cfg.simulation.n_traj as f64;
                cfg.simulation.domain = BoxDomain::new(vec![-20.0, -20.0, -5.0], vec![20.0, 20.0, 30.0]);
                cfg.simulation.escape_policy = EscapePolicy::RestartAtLastInside;
                cfg.simulation.initial = vec![1.0, 1.0, 0.0];
                cfg.collocation.points = 60000;
                cfg.evaluate = EvaluateConfig {
                    epsilon: 0.075,
                    grid: Some(GridSpec::new(vec![-15.0, -15.0], vec![15.0, 15.0], vec![256, 256]).expect("grid")),
                    slice: Some(SliceSpec { point: vec![0.0; 3], free_axes: vec![0, 1] }),
                };
                cfg.expand.enabled = false;
            }
            "ou1d" | "ou2d" => {
                cfg.ladder = LadderConfig { sqrt_eps: (0..10).map(|i| 0.2 + 0.4 * i as f64 / 9.0).collect() };
                cfg.grid = square(-2.0, 2.0, n, if n == 1 { 256 } else { 128 });
                cfg.simulation = SimulationConfig {
                    dt: 0.005,
                    total_time: 2.5e4,
                    n_traj: 10,
                    sample_interval: 0.25,
                    domain: domain(-10.0, 10.0, n),
                    escape_policy: EscapePolicy::None,
                    initial: vec![0.0; n],
                    burn_in_fraction: default_burn_in(),
                };
                cfg.attractor = AttractorConfig { count: 16, dt: 0.01, burn_in: 50.0, collect_time: 1.0 };
                cfg.collocation.points = 200;
                cfg.collocation.residual_points = 512;
                cfg.regression.min_count = 200;
                cfg.network = MlpSpec { widths: vec![n, 64, 64, 1], l2_lambda: 0.0 };
                cfg.train_v = TrainConfig {
                    epochs: 8000,
                    warmup_epochs: 6000,
                    batch_size: 64,
                    fine_tune_epochs: 0,
                    ..TrainConfig::default()
                };
                cfg.expand = ExpandConfig {
                    enabled: true,
                    level: 0.09,
                    count: 6,
                    h: 2e-3,
                    v_max: 1.5,
                    samples_per_curve: 20,
                    max_steps: 100_000,
                    retrain_epochs: 20,
                    seed: 1,
                };
                cfg.train_z = TrainZConfig {
                    schedule: TrainConfig { epochs: 200, batch_size: 64, seed: 2, ..TrainConfig::default() },
                    counts: ZCounts::default(),
                };
                cfg.evaluate = EvaluateConfig { epsilon: 0.04, grid: None, slice: None };
            }
            _ => {}
        }
        Ok(cfg)
    }

    /// Simulation config for ladder level `k`.
    pub fn sim_config(&self, k: usize) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            epsilon: self.ladder.eps()[k],
            dt: s.dt,
            total_time: s.total_time,
            n_traj: s.n_traj,
            sample_interval: s.sample_interval,
            seed: sub_seed(self.seed, 100 + k as u64),
            domain: s.domain.clone(),
            escape_policy: s.escape_policy,
            initial: s.initial.clone(),
            burn_in_fraction: s.burn_in_fraction,
        }
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        use serde_json::json;
        match stage {
            Stage::Simulate => json!({
                "seed": self.seed, "benchmark": self.benchmark, "ladder": self.ladder,
                "grid": self.grid, "simulation": self.simulation, "attractor": self.attractor,
            }),
            Stage::Regress => json!({ "regression": self.regression, "collocation": self.collocation }),
            Stage::Validate => json!({ "validation": self.validation }),
            Stage::TrainV => json!({ "network": self.network, "train_v": self.train_v }),
            Stage::Expand => json!({ "expand": self.expand }),
            Stage::TrainZ => json!({ "train_z": self.train_z }),
            Stage::Evaluate | Stage::FpResidual => json!({ "evaluate": self.evaluate }),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub outputs: Vec<Artifact>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// Records in dependency order.
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `holds` or `does not hold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self { version: CONFIG_VERSION, stages: Vec::new(), alpha: None, verdict: None }
    }
}

impl RunManifest {
    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn wkb_holds(&self) -> Option<bool> {
        self.verdict.as_deref().map(|v| v == "holds")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Drops the record of `stage` and everything downstream, and the summary fields they own.
    fn truncate_from(&mut self, stage: Stage) {
        self.stages.retain(|r| r.stage < stage);
        if stage <= Stage::Validate {
            self.verdict = None;
        }
        if stage <= Stage::Expand {
            self.alpha = self.record(Stage::TrainV).and_then(|r| r.metrics.get("alpha").copied());
            if stage <= Stage::TrainV {
                self.alpha = None;
            }
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fingerprint(config: &RunConfig, stage: Stage, upstream: Option<&StageRecord>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(serde_json::to_vec(&config.section(stage))?);
    if let Some(u) = upstream {
        h.update(u.fingerprint.as_bytes());
        for a in &u.outputs {
            h.update(a.sha256.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn outputs_intact(dir: &Path, rec: &StageRecord) -> bool {
    rec.outputs.iter().all(|a| sha256_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Runs one stage against the manifest in `out_dir`, writing artifacts there.
///
/// The upstream stage must be recorded with intact outputs. A completed stage whose
/// fingerprint and outputs are unchanged is skipped unless `force` is set. Running a
/// stage invalidates every downstream record.
pub fn run_stage(
    stage: Stage,
    config: &RunConfig,
    manifest: &mut RunManifest,
    out_dir: &Path,
    force: bool,
) -> Result<StageStatus> {
    let system = config.validate()?;
    fs::create_dir_all(out_dir)?;
    let upstream = match stage.dependency() {
        Some(dep) => {
            let rec = manifest.record(dep).ok_or(PipelineError::MissingDependency { stage, needs: dep })?;
            for a in &rec.outputs {
                if sha256_file(&out_dir.join(&a.path)).ok().as_deref() != Some(a.sha256.as_str()) {
                    return Err(PipelineError::HashMismatch(a.path.clone()));
                }
            }
            Some(rec.clone())
        }
        None => None,
    };
    let fp = fingerprint(config, stage, upstream.as_ref())?;
    if !force {
        if let Some(rec) = manifest.record(stage) {
            if rec.fingerprint == fp && outputs_intact(out_dir, rec) {
                return Ok(StageStatus::Skipped);
            }
        }
    }
    let start = Instant::now();
    let ctx = StageContext { config, system: &system, dir: out_dir };
    let out = match stage {
        Stage::Simulate => ctx.simulate(),
        Stage::Regress => ctx.regress(),
        Stage::Validate => ctx.validate(),
        Stage::TrainV => ctx.train_v(),
        Stage::Expand => ctx.expand(),
        Stage::TrainZ => ctx.train_z(),
        Stage::Evaluate => ctx.evaluate(),
        Stage::FpResidual => ctx.fp_residual(),
    }?;
    let mut out = out;
    // JSON has no NaN
    out.metrics.retain(|_, v| v.is_finite());
    let mut outputs = Vec::with_capacity(out.files.len());
    for f in &out.files {
        outputs.push(Artifact { path: f.clone(), sha256: sha256_file(&out_dir.join(f))? });
    }
    manifest.truncate_from(stage);
    if let Some(pass) = out.verdict {
        manifest.verdict = Some(if pass { "holds" } else { "does not hold" }.to_string());
    }
    if let Some(a) = out.metrics.get("alpha") {
        manifest.alpha = Some(*a);
    }
    manifest.stages.push(StageRecord { stage, fingerprint: fp, outputs, metrics: out.metrics, notes: out.notes });
    manifest.save(out_dir)?;
    record_timing(out_dir, stage, start.elapsed().as_secs_f64())?;
    Ok(StageStatus::Ran)
}

fn record_timing(dir: &Path, stage: Stage, secs: f64) -> Result<()> {
    let path = dir.join(TIMING_FILE);
    let mut map: BTreeMap<String, f64> = match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    map.insert(stage.name().to_string(), secs);
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Runs every stage in order. Stops after validation when the WKB form is rejected and
/// reports that through the returned manifest verdict.
pub fn run_all(config: &RunConfig, out_dir: &Path, force: bool) -> Result<RunManifest> {
    let mut manifest = RunManifest::load(out_dir)?;
    for stage in Stage::ALL {
        run_stage(stage, config, &mut manifest, out_dir, force)?;
        if stage == Stage::Validate && manifest.wkb_holds() == Some(false) {
            break;
        }
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// artifacts shared between stages

const REGRESS_FILE: &str = "regress.json";
const V_CKPT: &str = "v_net.ckpt";
const V_EXPANDED_CKPT: &str = "v_net_expanded.ckpt";
const Z_CKPT: &str = "z_net.ckpt";
const EXPAND_FILE: &str = "expand.json";
const DENSITY_FILE: &str = "density.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttractorArtifact {
    points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegressArtifact {
    points: Vec<Vec<f64>>,
    origins: Vec<PointOrigin>,
    counts: Vec<Option<Vec<(u64, u64)>>>,
    results: Vec<Option<RegressionResult>>,
    far_field_threshold: f64,
    residual_points: Vec<Vec<f64>>,
    attractor: Vec<Vec<f64>>,
    /// Extrapolated prefactor at each attractor point, where the fit succeeded.
    attractor_z0: Vec<Option<f64>>,
}

impl RegressArtifact {
    fn collocation(&self) -> CollocationSet {
        CollocationSet { points: self.points.clone(), origins: self.origins.clone(), counts: self.counts.clone() }
    }
    fn batch(&self) -> BatchRegression {
        BatchRegression { results: self.results.clone(), far_field_threshold: self.far_field_threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExpandArtifact {
    enabled: bool,
    points: Vec<Vec<f64>>,
    v: Vec<f64>,
    z0: Vec<f64>,
    artificial_value: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn write_net(path: &Path, net: &Mlp) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    net.write_checkpoint(&mut w, None)?;
    w.flush()?;
    Ok(())
}

pub fn read_net(path: &Path) -> Result<Mlp> {
    Ok(Mlp::read_checkpoint(BufReader::new(File::open(path)?))?.0)
}

/// Histograms written by the simulate stage for the first `levels` ladder entries.
pub fn read_histograms(dir: &Path, levels: usize) -> Result<Vec<DensityHistogram>> {
    (0..levels)
        .map(|k| Ok(DensityHistogram::read_from(BufReader::new(File::open(dir.join(hist_file(k)))?))?))
        .collect()
}

fn hist_file(k: usize) -> String {
    format!("hist_{k:02}.bin")
}

#[derive(Default)]
struct StageOutput {
    files: Vec<String>,
    metrics: BTreeMap<String, f64>,
    notes: BTreeMap<String, String>,
    verdict: Option<bool>,
}

struct StageContext<'a> {
    config: &'a RunConfig,
    system: &'a Benchmark,
    dir: &'a Path,
}

impl StageContext<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn dims(&self) -> (usize, usize) {
        (self.system.dim_state(), self.system.attractor_dim())
    }

    fn fail(stage: Stage, message: impl Into<String>) -> PipelineError {
        PipelineError::StageFailed { stage, message: message.into() }
    }

    fn load_histograms(&self) -> Result<Vec<DensityHistogram>> {
        read_histograms(self.dir, self.config.ladder.sqrt_eps.len())
    }

    fn simulate(&self) -> Result<StageOutput> {
        let cfg = self.config;
        let mut out = StageOutput::default();
        let mut escapes = 0u64;
        let mut aborted = 0usize;
        for k in 0..cfg.ladder.sqrt_eps.len() {
            let sc = cfg.sim_config(k);
            let (hist, summary) =
                simulate_ensemble(self.system, &sc, |_| DensityHistogram::new(cfg.grid.clone(), sc.epsilon))?;
            escapes += summary.escapes;
            aborted += summary.aborted.len();
            let name = hist_file(k);
            let mut w = BufWriter::new(File::create(self.path(&name))?);
            hist.write_to(&mut w)?;
            w.flush()?;
            out.metrics.insert(format!("samples_{k:02}"), hist.total as f64);
            out.metrics.insert(format!("off_grid_{k:02}"), hist.off_grid() as f64);
            out.files.push(name);
        }
        out.metrics.insert("escapes".into(), escapes as f64);
        out.metrics.insert("aborted_trajectories".into(), aborted as f64);
        let a = &cfg.attractor;
        let att = sample_attractor(
            self.system,
            &cfg.simulation.initial,
            a.dt,
            a.burn_in,
            a.collect_time,
            a.count,
            sub_seed(cfg.seed, 1),
        )?;
        write_json(&self.path("attractor.json"), &AttractorArtifact { points: att.points })?;
        out.files.push("attractor.json".into());
        Ok(out)
    }

    fn regress(&self) -> Result<StageOutput> {
        let cfg = self.config;
        let hists = self.load_histograms()?;
        let eps = cfg.ladder.eps();
        let h = cfg.grid.bin_volume();
        let dims = self.dims();
        let colloc = select_collocation(&hists, cfg.collocation.points, cfg.collocation.traj_fraction, sub_seed(cfg.seed, 2))?;
        let rows: Vec<Vec<LevelData>> = colloc
            .counts
            .iter()
            .map(|c| c.as_ref().map_or_else(Vec::new, |c| c.iter().map(|&(n0, n)| LevelData::from_counts(n0, n, h)).collect()))
            .collect();
        let batch = regress_all(
            &rows,
            &eps,
            dims,
            cfg.regression.min_count,
            cfg.regression.far_field_threshold,
            cfg.regression.far_field_quantile,
        );
        let residual_points = draw_free_points(
            hists.last().expect("ladder is non-empty"),
            cfg.collocation.residual_points,
            cfg.collocation.traj_fraction,
            sub_seed(cfg.seed, 3),
        );
        let att: AttractorArtifact = read_json(&self.path("attractor.json"))?;
        let levels = cfg.regression.attractor_levels.unwrap_or(eps.len().div_ceil(2)).clamp(2, eps.len());
        let mut cache: HashMap<u64, Option<f64>> = HashMap::new();
        let attractor_z0: Vec<Option<f64>> = att
            .points
            .iter()
            .map(|p| {
                let flat = cfg.grid.locate(p)?;
                *cache.entry(flat).or_insert_with(|| {
                    let rows: Vec<LevelData> = counts_at(&hists[..levels], flat)
                        .into_iter()
                        .map(|(n0, n)| LevelData::from_counts(n0, n, h))
                        .collect();
                    extrapolate_z0_attractor(&rows, &eps[..levels], dims, cfg.regression.min_count)
                        .ok()
                        .filter(|z| z.is_finite() && *z > 0.0)
                })
            })
            .collect();
        let art = RegressArtifact {
            points: colloc.points.clone(),
            origins: colloc.origins.clone(),
            counts: colloc.counts.clone(),
            results: batch.results.clone(),
            far_field_threshold: batch.far_field_threshold,
            residual_points,
            attractor: att.points,
            attractor_z0,
        };
        write_json(&self.path(REGRESS_FILE), &art)?;
        let mut w = BufWriter::new(File::create(self.path("regression.csv"))?);
        write_results_csv(&mut w, &art.points, &art.results)?;
        w.flush()?;
        let mut out = StageOutput { files: vec![REGRESS_FILE.into(), "regression.csv".into()], ..Default::default() };
        let fitted = art.results.iter().flatten().count();
        let reliable = art.results.iter().flatten().filter(|r| r.reliable).count();
        out.metrics.insert("collocation_points".into(), art.points.len() as f64);
        out.metrics.insert("fitted_points".into(), fitted as f64);
        out.metrics.insert("reliable_points".into(), reliable as f64);
        out.metrics.insert("far_field_threshold".into(), art.far_field_threshold);
        out.metrics.insert("attractor_z0_points".into(), art.attractor_z0.iter().flatten().count() as f64);
        Ok(out)
    }

    fn validate(&self) -> Result<StageOutput> {
        let art: RegressArtifact = read_json(&self.path(REGRESS_FILE))?;
        let dof = self.config.ladder.sqrt_eps.len() - 3;
        let report = validate_wkb(&art.results, dof, self.config.validation.significance)?;
        fs::write(self.path("validation.txt"), report.to_text())?;
        let mut w = BufWriter::new(File::create(self.path("validation.csv"))?);
        report.write_csv(&mut w, &art.points)?;
        w.flush()?;
        let mut out = StageOutput {
            files: vec!["validation.txt".into(), "validation.csv".into()],
            verdict: Some(report.pass),
            ..Default::default()
        };
        out.metrics.insert("p_value".into(), report.p_value);
        out.metrics.insert("ks_statistic".into(), report.ks_statistic);
        out.metrics.insert("mean_rss".into(), report.mean_rss);
        out.metrics.insert("tail_fraction".into(), report.tail_fraction);
        out.metrics.insert("tested".into(), report.tested as f64);
        Ok(out)
    }

    fn qp_sets(&self, art: &RegressArtifact) -> Result<QpTrainingSets> {
        let c = &self.config.collocation;
        let opts = AssembleOptions {
            far_field_density: c.far_field_density,
            artificial_value: c.artificial_value,
            bin_volume: self.config.grid.bin_volume(),
        };
        Ok(assemble_qp_sets(&art.attractor, &art.collocation(), &art.batch(), &art.residual_points, &opts)?)
    }

    /// Trains on `sets`, writing a diagnostic checkpoint if a loss becomes non-finite.
    fn run_qp(&self, stage: Stage, sets: &QpTrainingSets, mut trainer: Trainer, epochs: usize) -> Result<Trainer> {
        let mut cfg = self.config.train_v.clone();
        if stage != Stage::TrainV {
            // continued training starts from a fitted net
            cfg.warmup_epochs = 0;
        }
        let cfg = &cfg;
        let lens = [sets.x1.len(), sets.x2.len(), sets.x3.len()];
        let res = trainer.run(cfg, lens, epochs, cfg.fine_tune_epochs, |k, net, idx| qp_loss(k, net, sets, idx, self.system));
        self.diverged(stage, res, "v_net_diverged.ckpt")?;
        Ok(trainer)
    }

    fn diverged(&self, stage: Stage, res: std::result::Result<(), TrainError>, name: &str) -> Result<()> {
        match res {
            Err(TrainError::NonFiniteLoss { kind, epoch, net }) => {
                write_net(&self.path(name), &net)?;
                Err(Self::fail(stage, format!("non-finite {kind:?} loss in epoch {epoch}; diagnostic checkpoint {name}")))
            }
            other => Ok(other?),
        }
    }

    fn train_v(&self) -> Result<StageOutput> {
        let art: RegressArtifact = read_json(&self.path(REGRESS_FILE))?;
        let sets = self.qp_sets(&art)?;
        let net = Mlp::init(self.config.network.clone(), self.config.train_v.seed)?;
        let trainer = self.run_qp(Stage::TrainV, &sets, Trainer::new(net, self.config.train_v.lr), self.config.train_v.epochs)?;
        let (pts, vals) = reliable_pairs(&sets);
        let alpha = estimate_alpha(&trainer.net, &pts, &vals)?;
        write_net(&self.path(V_CKPT), &trainer.net)?;
        let mut w = BufWriter::new(File::create(self.path("v_log.csv"))?);
        write_log_csv(&mut w, &trainer.log)?;
        w.flush()?;
        let mut out = StageOutput { files: vec![V_CKPT.into(), "v_log.csv".into()], ..Default::default() };
        out.metrics.insert("alpha".into(), alpha);
        out.metrics.insert("x1".into(), sets.x1.len() as f64);
        out.metrics.insert("x2".into(), sets.x2.len() as f64);
        out.metrics.insert("x3".into(), sets.x3.len() as f64);
        out.metrics.insert("artificial".into(), sets.x2_artificial.iter().filter(|a| **a).count() as f64);
        final_losses(&trainer.log, &mut out.metrics);
        Ok(out)
    }

    fn grid_domain(&self) -> BoxDomain {
        BoxDomain::new(self.config.grid.lower.clone(), self.config.grid.upper.clone())
    }

    fn expand(&self) -> Result<StageOutput> {
        let cfg = &self.config.expand;
        let mut out = StageOutput::default();
        if !cfg.enabled {
            write_json(
                &self.path(EXPAND_FILE),
                &ExpandArtifact { enabled: false, points: vec![], v: vec![], z0: vec![], artificial_value: None },
            )?;
            out.files.push(EXPAND_FILE.into());
            out.notes.insert("status".into(), "disabled".into());
            return Ok(out);
        }
        let art: RegressArtifact = read_json(&self.path(REGRESS_FILE))?;
        let rec_alpha = read_alpha(self.dir)?;
        let v_net = read_net(&self.path(V_CKPT))?;
        let domain = self.grid_domain();
        let scaled = ScaledField { inner: &v_net, scale: rec_alpha };
        let seeds = seed_characteristics(self.system, &scaled, cfg.level, cfg.count, &domain, cfg.seed)?;
        let trace = TraceConfig { h: cfg.h, v_max: cfg.v_max, samples_per_curve: cfg.samples_per_curve, max_steps: cfg.max_steps };
        let curves = trace_all(self.system, &seeds, &trace, &domain, Some(&scaled))?;
        let mut points = Vec::new();
        let mut vs = Vec::new();
        let mut zs = Vec::new();
        let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
        for (seed, curve) in seeds.iter().zip(&curves) {
            let reason = match curve.termination {
                Termination::ReachedVMax => "reached_v_max",
                Termination::LeftDomain => "left_domain",
                Termination::StepLimit => "step_limit",
                Termination::SolverFailure => "solver_failure",
            };
            *reasons.entry(reason).or_default() += 1;
            let z_init = seed_prefactor(&art, &self.config.grid, &seed.x);
            let z = transport_z0(curve, z_init.unwrap_or(f64::NAN))?;
            for (s, z) in curve.samples.iter().zip(z) {
                points.push(s.x.clone());
                vs.push(s.v);
                zs.push(z);
            }
        }
        // continue training V on the enlarged set with an updated far-field value
        let mut sets = self.qp_sets(&art)?;
        let c = 1.5 * art.far_field_threshold.max(cfg.v_max);
        let c = self.config.collocation.artificial_value.unwrap_or(c);
        sets.set_artificial_value(c);
        for (p, v) in points.iter().zip(&vs) {
            sets.x2.push(p.clone());
            sets.x2_targets.push(*v);
            sets.x2_artificial.push(false);
        }
        let trainer = Trainer::new(v_net.clone(), self.config.train_v.lr);
        let trainer = self.run_qp(Stage::Expand, &sets, trainer, cfg.retrain_epochs)?;
        let (pts, vals) = reliable_pairs(&sets);
        let alpha = estimate_alpha(&trainer.net, &pts, &vals)?;
        write_net(&self.path(V_EXPANDED_CKPT), &trainer.net)?;
        let mut w = BufWriter::new(File::create(self.path("expanded.csv"))?);
        crate::expand::write_expanded_csv(&mut w, &points, &vs, Some(&zs))?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(self.path("v_expanded_log.csv"))?);
        write_log_csv(&mut w, &trainer.log)?;
        w.flush()?;
        write_json(
            &self.path(EXPAND_FILE),
            &ExpandArtifact { enabled: true, points, v: vs, z0: zs, artificial_value: Some(c) },
        )?;
        out.files = vec![EXPAND_FILE.into(), V_EXPANDED_CKPT.into(), "expanded.csv".into(), "v_expanded_log.csv".into()];
        out.metrics.insert("alpha".into(), alpha);
        out.metrics.insert("curves".into(), curves.len() as f64);
        out.metrics.insert("artificial_value".into(), c);
        for (r, n) in reasons {
            out.metrics.insert(format!("terminated_{r}"), n as f64);
        }
        Ok(out)
    }

    /// Final V network and its scale factor.
    fn final_v(&self) -> Result<(Mlp, f64)> {
        let exp: ExpandArtifact = read_json(&self.path(EXPAND_FILE))?;
        let net = if exp.enabled { read_net(&self.path(V_EXPANDED_CKPT))? } else { read_net(&self.path(V_CKPT))? };
        Ok((net, read_alpha(self.dir)?))
    }

    fn train_z(&self) -> Result<StageOutput> {
        let art: RegressArtifact = read_json(&self.path(REGRESS_FILE))?;
        let exp: ExpandArtifact = read_json(&self.path(EXPAND_FILE))?;
        let (v_net, alpha) = self.final_v()?;
        let attractor: Vec<(Vec<f64>, f64)> =
            art.attractor.iter().zip(&art.attractor_z0).filter_map(|(p, z)| z.map(|z| (p.clone(), z))).collect();
        let regression: Vec<(Vec<f64>, f64)> = art
            .points
            .iter()
            .zip(&art.results)
            .filter_map(|(p, r)| r.as_ref().filter(|r| r.reliable).map(|r| (p.clone(), r.log_z0_hat.exp())))
            .collect();
        let transported: Vec<(Vec<f64>, f64)> = exp
            .points
            .iter()
            .zip(&exp.z0)
            .filter(|(_, z)| z.is_finite())
            .map(|(p, z)| (p.clone(), *z))
            .collect();
        let src = ZSources { attractor, regression, transported, residual: art.residual_points.clone() };
        let zc = &self.config.train_z;
        let mut sets = assemble_z_sets(&src, &zc.counts, sub_seed(self.config.seed, 4))?;
        let scaled = ScaledField { inner: &v_net, scale: alpha };
        sets.attach_coefficients(self.system, &scaled);
        let net = Mlp::init(self.config.network.clone(), zc.schedule.seed)?;
        let mut trainer = Trainer::new(net, zc.schedule.lr);
        let lens = [sets.y1.len(), sets.y2.len(), sets.y3.len()];
        let res = trainer.run(&zc.schedule, lens, zc.schedule.epochs, zc.schedule.fine_tune_epochs, |k, n, i| z_loss(k, n, &sets, i));
        self.diverged(Stage::TrainZ, res, "z_net_diverged.ckpt")?;
        write_net(&self.path(Z_CKPT), &trainer.net)?;
        let mut w = BufWriter::new(File::create(self.path("z_log.csv"))?);
        write_log_csv(&mut w, &trainer.log)?;
        w.flush()?;
        let mut out = StageOutput { files: vec![Z_CKPT.into(), "z_log.csv".into()], ..Default::default() };
        out.metrics.insert("y1".into(), sets.y1.len() as f64);
        out.metrics.insert("y2".into(), sets.y2.len() as f64);
        out.metrics.insert("y3".into(), sets.y3.len() as f64);
        final_losses(&trainer.log, &mut out.metrics);
        Ok(out)
    }

    fn eval_grid(&self) -> GridSpec {
        self.config.evaluate.grid.clone().unwrap_or_else(|| self.config.grid.clone())
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let (v_net, alpha) = self.final_v()?;
        let z_net = read_net(&self.path(Z_CKPT))?;
        let grid = self.eval_grid();
        let e = &self.config.evaluate;
        let density = evaluate_wkb_grid(&v_net, alpha, &z_net, e.epsilon, &grid, self.dims(), e.slice.as_ref());
        let mut w = BufWriter::new(File::create(self.path(DENSITY_FILE))?);
        density.write_csv(&mut w)?;
        w.flush()?;
        let mut out = StageOutput { files: vec![DENSITY_FILE.into()], ..Default::default() };
        out.metrics.insert("mass".into(), density.mass);
        Ok(out)
    }

    fn fp_residual(&self) -> Result<StageOutput> {
        let grid = self.eval_grid();
        let mut out = StageOutput::default();
        if self.config.evaluate.slice.is_some() {
            out.notes.insert("status".into(), "skipped: evaluation grid is a slice".into());
            return Ok(out);
        }
        let density = DensityGrid::read_csv(&self.path(DENSITY_FILE), grid)?;
        let res = fp_residual_grid(self.system, &density, self.config.evaluate.epsilon)
            .map_err(|m| Self::fail(Stage::FpResidual, m))?;
        let mut w = BufWriter::new(File::create(self.path("fp_residual.csv"))?);
        res.write_csv(&mut w, &density.grid)?;
        w.flush()?;
        out.files.push("fp_residual.csv".into());
        out.metrics.insert("relative_residual".into(), res.relative_norm);
        Ok(out)
    }
}

/// Last logged value of each loss (L2 is not logged while fine-tuning).
fn final_losses(log: &[EpochLog], metrics: &mut BTreeMap<String, f64>) {
    for k in 0..3 {
        if let Some(l) = log.iter().rev().map(|e| e.losses[k]).find(|l| l.is_finite()) {
            metrics.insert(format!("final_l{}", k + 1), l);
        }
    }
}

/// Alpha of the most recent V stage recorded in the manifest on disk.
fn read_alpha(dir: &Path) -> Result<f64> {
    RunManifest::load(dir)?.alpha.ok_or_else(|| PipelineError::Config("no alpha recorded".into()))
}

/// Regression prefactor at the seed's bin, falling back to the nearest reliable point.
fn seed_prefactor(art: &RegressArtifact, grid: &GridSpec, x: &[f64]) -> Option<f64> {
    let flat = grid.locate(x);
    let mut best: Option<(f64, f64)> = None;
    for (p, r) in art.points.iter().zip(&art.results) {
        let Some(r) = r.as_ref().filter(|r| r.reliable) else { continue };
        if flat.is_some() && grid.locate(p) == flat {
            return Some(r.log_z0_hat.exp());
        }
        let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, r.log_z0_hat.exp()));
        }
    }
    best.map(|(_, z)| z)
}

/// Free points: a `traj_fraction` share drawn with replacement from bins weighted by
/// their counts, jittered uniformly inside the bin; the rest uniform on the grid box.
pub fn draw_free_points(hist: &DensityHistogram, count: usize, traj_fraction: f64, seed: u64) -> Vec<Vec<f64>> {
    let grid = &hist.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = hist.occupied();
    let k_traj = if occ.is_empty() { 0 } else { ((count as f64) * traj_fraction.clamp(0.0, 1.0)).round() as usize };
    let mut cum = Vec::with_capacity(occ.len());
    let mut acc = 0u64;
    for &(_, c) in &occ {
        acc += c;
        cum.push(acc);
    }
    let mut pts = Vec::with_capacity(count);
    for _ in 0..k_traj {
        let r = rng.random_range(0..acc);
        let j = cum.partition_point(|&c| c <= r);
        let center = grid.center(occ[j].0);
        pts.push(center.iter().enumerate().map(|(k, c)| c + grid.width(k) * (rng.random::<f64>() - 0.5)).collect());
    }
    for _ in k_traj..count {
        pts.push((0..grid.dim()).map(|k| rng.random_range(grid.lower[k]..grid.upper[k])).collect());
    }
    pts
}

// ---------------------------------------------------------------------------
// density grids

/// Values at bin centers in flat-index order (axis 0 most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    /// Riemann sum `sum u * bin_volume`.
    pub mass: f64,
}

impl DensityGrid {
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Self {
        let mass = values.iter().sum::<f64>() * grid.bin_volume();
        Self { grid, values, mass }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.total_bins()).map(|i| f(&grid.center(i))).collect();
        Self::from_values(grid, values)
    }

    /// Columns: coordinates, then `u`; rows in flat-index order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.grid.dim()).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},u", header.join(","))?;
        for (i, v) in self.values.iter().enumerate() {
            let c: Vec<String> = self.grid.center(i as u64).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{}", c.join(","), v)?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path, grid: GridSpec) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut values = Vec::with_capacity(grid.total_bins() as usize);
        for line in text.lines().skip(1) {
            let last = line.rsplit(',').next().unwrap_or("");
            values.push(last.parse::<f64>().map_err(|e| PipelineError::Config(format!("bad density value: {e}")))?);
        }
        if values.len() as u64 != grid.total_bins() {
            return Err(PipelineError::Config("density file does not match the evaluation grid".into()));
        }
        Ok(Self::from_values(grid, values))
    }
}

/// `u(x) = eps^(-(n-d)/2) max(Z(x), 0) exp(-V(x) / (alpha eps))` at every bin center.
///
/// With a slice, grid coordinates are placed on its free axes.
pub fn evaluate_wkb_grid(
    v: &dyn ScalarField,
    alpha: f64,
    z: &dyn ScalarField,
    eps: f64,
    grid: &GridSpec,
    dims: (usize, usize),
    slice: Option<&SliceSpec>,
) -> DensityGrid {
    let embed = |c: Vec<f64>| match slice {
        None => c,
        Some(s) => s.embed(&c),
    };
    let pts: Vec<Vec<f64>> = (0..grid.total_bins()).map(|i| embed(grid.center(i))).collect();
    let vs = v.values(&pts);
    let zs = z.values(&pts);
    let q = eps.powf(-(dims.0 as f64 - dims.1 as f64) / 2.0);
    let values = vs.iter().zip(&zs).map(|(v, z)| q * z.max(0.0) * (-v / (alpha * eps)).exp()).collect();
    DensityGrid::from_values(grid.clone(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpResidual {
    /// Flat indices of interior nodes and `L u` there.
    pub nodes: Vec<u64>,
    pub residual: Vec<f64>,
    /// `||L u||_2 / (eps ||u||_2 max|div f|)` over interior nodes.
    pub relative_norm: f64,
}

impl FpResidual {
    pub fn write_csv<W: Write>(&self, mut w: W, grid: &GridSpec) -> std::io::Result<()> {
        let header: Vec<String> = (0..grid.dim()).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},residual", header.join(","))?;
        for (i, r) in self.nodes.iter().zip(&self.residual) {
            let c: Vec<String> = grid.center(*i).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{}", c.join(","), r)?;
        }
        Ok(())
    }
}

pub const FP_MIN_BINS: usize = 64;

/// Stationary Fokker–Planck residual `L u = -sum d_i(f_i u) + eps/2 sum d_ij(a_ij u)` with
/// second-order central differences at interior nodes.
pub fn fp_residual_grid<S: SdeSystem + ?Sized>(
    system: &S,
    density: &DensityGrid,
    eps: f64,
) -> std::result::Result<FpResidual, String> {
    let grid = &density.grid;
    let n = grid.dim();
    if n != system.dim_state() {
        return Err("grid dimension does not match the system".into());
    }
    if grid.bins.iter().any(|b| *b < FP_MIN_BINS) {
        return Err(format!("grid too coarse: need at least {FP_MIN_BINS} bins per axis"));
    }
    let total = grid.total_bins() as usize;
    let mut stride = vec![1usize; n];
    for k in (0..n.saturating_sub(1)).rev() {
        stride[k] = stride[k + 1] * grid.bins[k + 1];
    }
    let centers: Vec<Vec<f64>> = (0..total as u64).map(|i| grid.center(i)).collect();
    let u = &density.values;
    // f_i u and a_ij u at every node
    let mut fu = vec![vec![0.0; total]; n];
    let mut au = vec![vec![vec![0.0; total]; n]; n];
    let mut f = vec![0.0; n];
    for (idx, x) in centers.iter().enumerate() {
        system.drift(x, &mut f);
        let a = system.diffusion(x);
        for i in 0..n {
            fu[i][idx] = f[i] * u[idx];
            for j in 0..n {
                au[i][j][idx] = a[(i, j)] * u[idx];
            }
        }
    }
    let h: Vec<f64> = (0..n).map(|k| grid.width(k)).collect();
    let mut nodes = Vec::new();
    let mut residual = Vec::new();
    let (mut num, mut den, mut div_scale) = (0.0f64, 0.0f64, 0.0f64);
    for (idx, x) in centers.iter().enumerate() {
        let mi = grid.multi_index(idx as u64);
        if mi.iter().zip(&grid.bins).any(|(i, b)| *i == 0 || *i + 1 == *b) {
            continue;
        }
        let mut lu = 0.0;
        for i in 0..n {
            let (p, m) = (idx + stride[i], idx - stride[i]);
            lu -= (fu[i][p] - fu[i][m]) / (2.0 * h[i]);
            for j in 0..n {
                let g = &au[i][j];
                let d2 = if i == j {
                    (g[p] - 2.0 * g[idx] + g[m]) / (h[i] * h[i])
                } else {
                    let (sj_p, sj_m) = (stride[j], stride[j]);
                    (g[p + sj_p] - g[p - sj_m] - g[m + sj_p] + g[m - sj_m]) / (4.0 * h[i] * h[j])
                };
                lu += 0.5 * eps * d2;
            }
        }
        nodes.push(idx as u64);
        residual.push(lu);
        num += lu * lu;
        den += u[idx] * u[idx];
        div_scale = div_scale.max(system.drift_divergence(x).abs());
    }
    if div_scale == 0.0 {
        div_scale = 1.0;
    }
    let relative_norm = if den == 0.0 { 0.0 } else { num.sqrt() / (eps * den.sqrt() * div_scale) };
    Ok(FpResidual { nodes, residual, relative_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;
    use std::f64::consts::PI;

    #[test]
    fn config_round_trip_for_every_benchmark() {
        for id in ["ou1d", "ou2d", "vdp", "figure8", "coupled_vdp", "rossler"] {
            let cfg = RunConfig::for_benchmark(id).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg, "{id}");
        }
    }

    #[test]
    fn config_errors() {
        let mut cfg = RunConfig::for_benchmark("ou1d").unwrap();
        cfg.ladder.sqrt_eps.truncate(3);
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let mut cfg = RunConfig::for_benchmark("ou1d").unwrap();
        cfg.network = MlpSpec::standard(2);
        assert!(cfg.validate().is_err());
        let mut text = RunConfig::for_benchmark("ou1d").unwrap().to_toml().unwrap();
        text = text.replacen("version = 1", "version = 7", 1);
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn stage_order() {
        assert_eq!(Stage::Simulate.dependency(), None);
        assert_eq!(Stage::Validate.dependency(), Some(Stage::Regress));
        assert_eq!("train-z".parse::<Stage>().unwrap(), Stage::TrainZ);
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn ou_wkb_mass_is_one() {
        let v = AnalyticField::ou_quasi_potential(1);
        let z = AnalyticField::constant(1, PI.powf(-0.5));
        let grid = GridSpec::new(vec![-3.0], vec![3.0], vec![4000]).unwrap();
        let d = evaluate_wkb_grid(&v, 1.0, &z, 0.04, &grid, (1, 0), None);
        assert!((d.mass - 1.0).abs() < 1e-3, "{}", d.mass);
        assert!(d.values.iter().all(|u| *u >= 0.0));
        // a negative prefactor is clipped
        let neg = AnalyticField::constant(1, -1.0);
        assert!(evaluate_wkb_grid(&v, 1.0, &neg, 0.04, &grid, (1, 0), None).values.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn mass_concentrates_on_low_sublevel_set() {
        let v = AnalyticField::ou_quasi_potential(2);
        let z = AnalyticField::constant(2, 1.0);
        let grid = GridSpec::new(vec![-2.0; 2], vec![2.0; 2], vec![200; 2]).unwrap();
        let eps = 0.05;
        let d = evaluate_wkb_grid(&v, 1.0, &z, eps, &grid, (2, 0), None);
        let inside: f64 = (0..grid.total_bins())
            .filter(|i| v.value(&grid.center(*i)) < 10.0 * eps)
            .map(|i| d.values[i as usize])
            .sum::<f64>()
            * grid.bin_volume();
        assert!(inside / d.mass >= 0.99);
    }

    #[test]
    fn slice_evaluation_embeds_fixed_coordinates() {
        let v = AnalyticField::ou_quasi_potential(3);
        let z = AnalyticField::constant(3, 1.0);
        let grid = GridSpec::new(vec![-1.0; 2], vec![1.0; 2], vec![4; 2]).unwrap();
        let d = evaluate_wkb_grid(&v, 1.0, &z, 1.0, &grid, (3, 0), Some(&SliceSpec { point: vec![0.0, 0.5, 0.0], free_axes: vec![0, 2] }));
        let c = grid.center(5);
        let want = (-(c[0] * c[0] + 0.25 + c[1] * c[1])).exp();
        assert!((d.values[5] - want).abs() < 1e-15);
    }

    fn ou_exact(bins: usize, eps: f64) -> DensityGrid {
        let grid = GridSpec::new(vec![-3.0], vec![3.0], vec![bins]).unwrap();
        DensityGrid::from_fn(grid, |x| (PI * eps).powf(-0.5) * (-x[0] * x[0] / eps).exp())
    }

    #[test]
    fn fp_residual_of_exact_ou_density() {
        let sys = make_benchmark(&BenchmarkSpec::new("ou1d")).unwrap();
        let r512 = fp_residual_grid(&sys, &ou_exact(512, 0.25), 0.25).unwrap();
        assert!(r512.relative_norm < 1e-3, "{}", r512.relative_norm);
        let r1024 = fp_residual_grid(&sys, &ou_exact(1024, 0.25), 0.25).unwrap();
        let ratio = r512.relative_norm / r1024.relative_norm;
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
        let zero = DensityGrid::from_values(ou_exact(128, 0.25).grid, vec![0.0; 128]);
        assert_eq!(fp_residual_grid(&sys, &zero, 0.25).unwrap().relative_norm, 0.0);
        assert!(fp_residual_grid(&sys, &ou_exact(32, 0.25), 0.25).is_err());
    }

    #[test]
    fn fp_residual_two_dimensional_ou() {
        let sys = make_benchmark(&BenchmarkSpec::new("ou2d")).unwrap();
        let eps = 0.25;
        let grid = GridSpec::new(vec![-3.0; 2], vec![3.0; 2], vec![128; 2]).unwrap();
        let coarse = DensityGrid::from_fn(grid, |x| (-(x[0] * x[0] + x[1] * x[1]) / eps).exp());
        let fine_grid = GridSpec::new(vec![-3.0; 2], vec![3.0; 2], vec![256; 2]).unwrap();
        let fine = DensityGrid::from_fn(fine_grid, |x| (-(x[0] * x[0] + x[1] * x[1]) / eps).exp());
        let rc = fp_residual_grid(&sys, &coarse, eps).unwrap().relative_norm;
        let rf = fp_residual_grid(&sys, &fine, eps).unwrap().relative_norm;
        assert!((rc / rf - 4.0).abs() < 0.3, "{rc} {rf}");
    }

    #[test]
    fn density_csv_round_trip() {
        let d = ou_exact(64, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(File::create(&p).unwrap()).unwrap();
        let back = DensityGrid::read_csv(&p, d.grid.clone()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn free_points_follow_histogram() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], vec![10]).unwrap();
        let mut h = DensityHistogram::new(grid, 0.1);
        for _ in 0..100 {
            h.bin_sample(&[0.05]);
        }
        let pts = draw_free_points(&h, 100, 0.5, 3);
        assert_eq!(pts.len(), 100);
        assert!(pts[..50].iter().all(|p| p[0] >= 0.0 && p[0] < 0.1));
        assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p[0])));
        assert_eq!(pts, draw_free_points(&h, 100, 0.5, 3));
    }

    #[test]
    fn dependency_is_enforced() {
        let cfg = RunConfig::for_benchmark("ou1d").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::default();
        let err = run_stage(Stage::Validate, &cfg, &mut m, dir.path(), false).unwrap_err();
        assert!(matches!(err, PipelineError::MissingDependency { needs: Stage::Regress, .. }));
    }
}
