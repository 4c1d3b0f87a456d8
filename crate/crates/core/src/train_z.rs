//! Training of the prefactor network `Z_theta`.
//!
//! With the alpha-corrected quasi-potential fixed, `Z0` solves the transport equation
//! `b . grad Z0 + c Z0 = 0` where `b = f + A grad V` and
//! `c = div f + 1/2 sum a_ij d_ij V + sum d_i a_ij d_j V`. The losses mirror those of
//! the V trainer: value fits on attractor and near-attractor points, and the squared
//! transport residual on free points.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::ScalarField;
use crate::models::SdeSystem;
use crate::net::{batch_from_points, Mlp, MlpSpec};
use crate::train_v::{value_fit_loss, LossEval, LossKind, TrainConfig, TrainError, Trainer};

/// `(b, c)` of the transport operator at `x` for a quasi-potential field.
pub fn transport_coefficients<S: SdeSystem + ?Sized>(system: &S, v: &dyn ScalarField, x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len();
    let f = system.drift_vec(x);
    let a = system.diffusion(x);
    let g = v.gradient(x);
    let hess = v.hessian(x);
    let mut b = f;
    let mut c = system.drift_divergence(x);
    for i in 0..n {
        for j in 0..n {
            b[i] += a[(i, j)] * g[j];
            c += 0.5 * a[(i, j)] * hess[(i, j)];
        }
    }
    if !system.constant_diffusion() {
        let da = system.diffusion_row_divergence(x);
        for j in 0..n {
            c += da[j] * g[j];
        }
    }
    (b, c)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZTrainingSets {
    pub y1: Vec<Vec<f64>>,
    pub y1_targets: Vec<f64>,
    pub y2: Vec<Vec<f64>>,
    pub y2_targets: Vec<f64>,
    /// True where the target was transported along a characteristic.
    pub y2_transported: Vec<bool>,
    pub y3: Vec<Vec<f64>>,
    /// Transport coefficients at the `y3` points; filled by [`ZTrainingSets::attach_coefficients`].
    pub y3_b: Vec<Vec<f64>>,
    pub y3_c: Vec<f64>,
}

impl ZTrainingSets {
    /// Evaluates `(b, c)` at every residual point, in parallel.
    pub fn attach_coefficients<S: SdeSystem + ?Sized>(&mut self, system: &S, v: &dyn ScalarField) {
        let coeffs: Vec<(Vec<f64>, f64)> = self.y3.par_iter().map(|x| transport_coefficients(system, v, x)).collect();
        (self.y3_b, self.y3_c) = coeffs.into_iter().unzip();
    }
}

/// Labelled sources for the Z sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ZSources {
    /// Attractor points with extrapolated targets.
    pub attractor: Vec<(Vec<f64>, f64)>,
    /// Reliable regression points with `exp(log_z0_hat)`.
    pub regression: Vec<(Vec<f64>, f64)>,
    /// Characteristic samples with transported values.
    pub transported: Vec<(Vec<f64>, f64)>,
    pub residual: Vec<Vec<f64>>,
}

/// Requested sizes; `None` keeps every available point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ZCounts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attractor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transported: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<usize>,
}

fn subsample<T: Clone>(items: &[T], count: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<T> {
    match count {
        Some(k) if k < items.len() => {
            let mut idx = sample(rng, items.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        }
        _ => items.to_vec(),
    }
}

/// Draws the requested number of points from each source without replacement.
/// Regression and transported points share `Y2` with equal weight.
pub fn assemble_z_sets(src: &ZSources, counts: &ZCounts, seed: u64) -> Result<ZTrainingSets, TrainError> {
    if src.attractor.is_empty() {
        return Err(TrainError::EmptySet("Y1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y1 = subsample(&src.attractor, counts.attractor, &mut rng);
    let reg = subsample(&src.regression, counts.regression, &mut rng);
    let tr = subsample(&src.transported, counts.transported, &mut rng);
    let y3 = subsample(&src.residual, counts.residual, &mut rng);
    let mut sets = ZTrainingSets { y3, ..Default::default() };
    for (p, t) in y1 {
        sets.y1.push(p);
        sets.y1_targets.push(t);
    }
    for (flag, part) in [(false, reg), (true, tr)] {
        for (p, t) in part {
            sets.y2.push(p);
            sets.y2_targets.push(t);
            sets.y2_transported.push(flag);
        }
    }
    Ok(sets)
}

/// `mean((b . grad Z + c Z)^2)` with precomputed coefficients.
pub fn transport_loss(net: &Mlp, xs: &Array2<f64>, b: &Array2<f64>, c: &[f64]) -> Result<LossEval, TrainError> {
    let rows = xs.nrows();
    let tape = net.forward_tape(xs.view(), Some(b.view()))?;
    let mut value = 0.0;
    let mut ybar = Array1::zeros(rows);
    let mut sbar = Array1::zeros(rows);
    for r in 0..rows {
        let res = tape.directional[r] + c[r] * tape.value[r];
        value += res * res;
        sbar[r] = 2.0 * res / rows as f64;
        ybar[r] = c[r] * sbar[r];
    }
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&tape, ybar.view(), Some(sbar.view()), Some(&mut grad), false);
    net.add_penalty_grad(&mut grad);
    Ok(LossEval { value: value / rows as f64, penalty: net.penalty(), grad })
}

/// Evaluates one Z loss on the given rows of its set.
pub fn z_loss(kind: LossKind, net: &Mlp, sets: &ZTrainingSets, idx: &[usize]) -> Result<LossEval, TrainError> {
    let n = net.input_dim();
    match kind {
        LossKind::L1 => {
            let t: Vec<f64> = idx.iter().map(|&i| sets.y1_targets[i]).collect();
            value_fit_loss(net, &batch_from_points(&sets.y1, idx, n), Some(&t))
        }
        LossKind::L2 => {
            let t: Vec<f64> = idx.iter().map(|&i| sets.y2_targets[i]).collect();
            value_fit_loss(net, &batch_from_points(&sets.y2, idx, n), Some(&t))
        }
        LossKind::L3 => {
            if sets.y3_b.len() != sets.y3.len() {
                return Err(TrainError::InvalidConfig("transport coefficients not attached".into()));
            }
            let b = batch_from_points(&sets.y3_b, idx, n);
            let c: Vec<f64> = idx.iter().map(|&i| sets.y3_c[i]).collect();
            transport_loss(net, &batch_from_points(&sets.y3, idx, n), &b, &c)
        }
    }
}

/// Trains `Z_theta` with the same alternating schedule and fine-tuning as `V_theta`.
pub fn train_z(sets: &ZTrainingSets, cfg: &TrainConfig, dim: usize, trainer: Option<Trainer>) -> Result<Trainer, TrainError> {
    cfg.validate()?;
    if sets.y1.is_empty() {
        return Err(TrainError::EmptySet("Y1"));
    }
    if sets.y3_b.len() != sets.y3.len() {
        return Err(TrainError::InvalidConfig("transport coefficients not attached".into()));
    }
    let mut trainer = match trainer {
        Some(t) => t,
        None => Trainer::new(Mlp::init(MlpSpec::standard(dim), cfg.seed)?, cfg.lr),
    };
    let lens = [sets.y1.len(), sets.y2.len(), sets.y3.len()];
    trainer.run(cfg, lens, cfg.epochs, cfg.fine_tune_epochs, |kind, net, idx| z_loss(kind, net, sets, idx))?;
    Ok(trainer)
}

/// Coefficient of variation `std / |mean|` of a sample.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    var.sqrt() / mean.abs()
}
