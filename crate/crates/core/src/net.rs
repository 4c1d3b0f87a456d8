//! Scalar multilayer perceptron with exact first and second input derivatives.
//!
//! Every derivative the trainers need comes from one batched tape. The forward pass
//! carries the activations `a` and, optionally, their tangents `a_dot` along an input
//! direction `w`, so the output pair is `(NN(x), w . grad NN(x))`. The reverse pass takes
//! seeds `(y_bar, s_bar)` for that pair and returns parameter adjoints and the input
//! adjoint `y_bar grad NN + s_bar Hess NN w`.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ScalarField;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("gradient has non-finite entries; step rejected")]
    NonFiniteGradient,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths from input to output; the last is 1.
    pub widths: Vec<usize>,
    pub l2_lambda: f64,
}

impl MlpSpec {
    /// `n -> 32 -> 256 -> 256 -> 256 -> 64 -> 16 -> 1`, `lambda = 1e-3`.
    pub fn standard(n: usize) -> Self {
        Self { widths: vec![n, 32, 256, 256, 256, 64, 16, 1], l2_lambda: 1e-3 }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.len() < 2 || self.widths.iter().any(|w| *w == 0) {
            return Err(NetError::InvalidSpec("need at least two nonzero widths".into()));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(NetError::InvalidSpec("output width must be 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(NetError::InvalidSpec("l2_lambda must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

/// Parameters live in one flat vector; layer `l` stores its `out x in` weight matrix
/// row-major, then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

fn layer_offsets(spec: &MlpSpec) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(spec.layers() + 1);
    let mut off = 0;
    for w in spec.widths.windows(2) {
        offsets.push(off);
        off += w[1] * w[0] + w[1];
    }
    offsets.push(off);
    offsets
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Activations of one batched forward pass.
pub struct Tape {
    /// `acts[l]` is the input of layer `l` (`acts[0]` is the batch itself).
    acts: Vec<Array2<f64>>,
    /// Tangents of `acts` along the input direction, if requested.
    tans: Option<Vec<Array2<f64>>>,
    /// Pre-activation tangents `z_dot` of the hidden layers, indexed like `acts`.
    zdots: Vec<Array2<f64>>,
    pub value: Array1<f64>,
    /// `w . grad NN` per row; zero without a direction.
    pub directional: Array1<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let offsets = layer_offsets(&spec);
        let params = vec![0.0; spec.num_params()];
        Ok(Self { spec, params, offsets })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.spec.layers() {
            let (fan_in, fan_out) = (net.spec.widths[l], net.spec.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let off = net.offsets[l];
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn from_flat(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NetError> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NetError::DimensionMismatch { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// Weight matrix of layer `l` (`out x in`).
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
        let off = self.offsets[l];
        ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("layout")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
        let off = self.offsets[l] + o * i;
        ArrayView1::from(&self.params[off..off + o])
    }

    /// Mask that is 1 on weight entries and 0 on biases.
    pub fn is_weight(&self, k: usize) -> bool {
        let l = self.offsets.partition_point(|&o| o <= k) - 1;
        let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
        k - self.offsets[l] < o * i
    }

    /// `lambda/2 * |W|^2` over weights only.
    pub fn penalty(&self) -> f64 {
        let mut sum = 0.0;
        for l in 0..self.spec.layers() {
            sum += self.weight(l).iter().map(|w| w * w).sum::<f64>();
        }
        0.5 * self.spec.l2_lambda * sum
    }

    /// Adds `lambda * W` to the weight entries of `grad`.
    pub fn add_penalty_grad(&self, grad: &mut [f64]) {
        let lambda = self.spec.l2_lambda;
        if lambda == 0.0 {
            return;
        }
        for l in 0..self.spec.layers() {
            let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let off = self.offsets[l];
            for k in off..off + o * i {
                grad[k] += lambda * self.params[k];
            }
        }
    }

    fn check_batch(&self, xs: &ArrayView2<f64>) -> Result<(), NetError> {
        if xs.ncols() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: xs.ncols() });
        }
        Ok(())
    }

    /// Forward pass over the rows of `xs`, with tangents along the rows of `dirs` if given.
    pub fn forward_tape(&self, xs: ArrayView2<f64>, dirs: Option<ArrayView2<f64>>) -> Result<Tape, NetError> {
        self.check_batch(&xs)?;
        if let Some(d) = &dirs {
            if d.dim() != xs.dim() {
                return Err(NetError::DimensionMismatch { expected: xs.nrows(), got: d.nrows() });
            }
        }
        let b = xs.nrows();
        let layers = self.spec.layers();
        let mut acts = Vec::with_capacity(layers);
        let mut zdots = Vec::with_capacity(layers);
        let mut tans = dirs.as_ref().map(|_| Vec::with_capacity(layers));
        acts.push(xs.to_owned());
        zdots.push(Array2::zeros((0, 0)));
        if let (Some(t), Some(d)) = (tans.as_mut(), dirs.as_ref()) {
            t.push(d.to_owned());
        }
        let mut value = Array1::zeros(b);
        let mut directional = Array1::zeros(b);
        for l in 0..layers {
            let w = self.weight(l);
            let bias = self.bias(l);
            let mut z = Array2::zeros((b, w.nrows()));
            general_mat_mul(1.0, &acts[l], &w.t(), 0.0, &mut z);
            z += &bias;
            let zdot = tans.as_ref().map(|t| {
                let mut zd = Array2::zeros((b, w.nrows()));
                general_mat_mul(1.0, &t[l], &w.t(), 0.0, &mut zd);
                zd
            });
            if l + 1 < layers {
                z.mapv_inplace(sigmoid);
                if let (Some(t), Some(zd)) = (tans.as_mut(), zdot.as_ref()) {
                    let adot = ndarray::Zip::from(&z).and(zd).map_collect(|&s, &d| s * (1.0 - s) * d);
                    t.push(adot);
                }
                zdots.push(zdot.unwrap_or_else(|| Array2::zeros((0, 0))));
                acts.push(z);
            } else {
                value = z.column(0).to_owned();
                if let Some(zd) = zdot {
                    directional = zd.column(0).to_owned();
                }
            }
        }
        Ok(Tape { acts, tans, zdots, value, directional })
    }

    /// Reverse pass. Accumulates `d(sum_r y_bar_r NN(x_r) + s_bar_r w_r . grad NN(x_r))/d theta`
    /// into `grad` (no penalty) when given, and returns the input adjoint when `want_input`.
    pub fn backward(
        &self,
        tape: &Tape,
        y_bar: ArrayView1<f64>,
        s_bar: Option<ArrayView1<f64>>,
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let b = tape.value.len();
        let layers = self.spec.layers();
        let s_bar = if tape.tans.is_some() { s_bar } else { None };
        let mut zbar = y_bar.to_owned().into_shape_with_order((b, 1)).expect("column");
        let mut zdbar = s_bar.map(|s| s.to_owned().into_shape_with_order((b, 1)).expect("column"));
        for l in (0..layers).rev() {
            let w = self.weight(l);
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            if let Some(g) = grad.as_deref_mut() {
                let off = self.offsets[l];
                let (gw, gb) = g[off..off + fan_out * fan_in + fan_out].split_at_mut(fan_out * fan_in);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).expect("layout");
                general_mat_mul(1.0, &zbar.t(), &tape.acts[l], 1.0, &mut gw);
                if let (Some(zd), Some(t)) = (zdbar.as_ref(), tape.tans.as_ref()) {
                    general_mat_mul(1.0, &zd.t(), &t[l], 1.0, &mut gw);
                }
                for (gbj, col) in gb.iter_mut().zip(zbar.axis_iter(Axis(1))) {
                    *gbj += col.sum();
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut abar = Array2::zeros((b, fan_in));
            general_mat_mul(1.0, &zbar, &w, 0.0, &mut abar);
            let adbar = zdbar.as_ref().map(|zd| {
                let mut m = Array2::zeros((b, fan_in));
                general_mat_mul(1.0, zd, &w, 0.0, &mut m);
                m
            });
            if l == 0 {
                return Some(abar);
            }
            let s = &tape.acts[l];
            match adbar {
                None => {
                    zbar = ndarray::Zip::from(s).and(&abar).map_collect(|&s, &a| s * (1.0 - s) * a);
                }
                Some(adbar) => {
                    let zd = &tape.zdots[l];
                    zbar = ndarray::Zip::from(s).and(&abar).and(zd).and(&adbar).map_collect(|&s, &a, &zd, &ad| {
                        let sp = s * (1.0 - s);
                        sp * a + sp * (1.0 - 2.0 * s) * zd * ad
                    });
                    zdbar = Some(ndarray::Zip::from(s).and(&adbar).map_collect(|&s, &ad| s * (1.0 - s) * ad));
                }
            }
        }
        None
    }

    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>, NetError> {
        Ok(self.forward_tape(xs, None)?.value)
    }

    /// Values and input gradients of every row.
    pub fn value_and_grad_batch(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), NetError> {
        let tape = self.forward_tape(xs, None)?;
        let ones = Array1::ones(xs.nrows());
        let g = self.backward(&tape, ones.view(), None, None, true).expect("input adjoint");
        Ok((tape.value, g))
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, NetError> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward_batch(xs)?[0])
    }

    /// `d(upstream * NN(x))/d theta + lambda * W`.
    pub fn grad_params(&self, x: &[f64], upstream: f64) -> Result<Vec<f64>, NetError> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let tape = self.forward_tape(xs, None)?;
        let mut g = vec![0.0; self.num_params()];
        let seed = Array1::from_elem(1, upstream);
        self.backward(&tape, seed.view(), None, Some(&mut g), false);
        self.add_penalty_grad(&mut g);
        Ok(g)
    }

    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let (_, g) = self.value_and_grad_batch(xs)?;
        Ok(g.row(0).to_vec())
    }

    /// Hessian of `NN` at `x`, one tangent direction per coordinate axis.
    pub fn hessian_input(&self, x: &[f64]) -> Result<DMatrix<f64>, NetError> {
        let n = self.input_dim();
        if x.len() != n {
            return Err(NetError::DimensionMismatch { expected: n, got: x.len() });
        }
        let xs = Array2::from_shape_fn((n, n), |(_, j)| x[j]);
        let dirs = Array2::eye(n);
        let tape = self.forward_tape(xs.view(), Some(dirs.view()))?;
        let zeros = Array1::zeros(n);
        let ones = Array1::ones(n);
        let h = self.backward(&tape, zeros.view(), Some(ones.view()), None, true).expect("input adjoint");
        Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)])))
    }

    /// Unsymmetrised Hessian rows `H e_j`; used to check symmetry of the tape.
    pub fn hessian_rows(&self, x: &[f64]) -> Result<Array2<f64>, NetError> {
        let n = self.input_dim();
        let xs = Array2::from_shape_fn((n, n), |(_, j)| x[j]);
        let dirs = Array2::eye(n);
        let tape = self.forward_tape(xs.view(), Some(dirs.view()))?;
        let zeros = Array1::zeros(n);
        let ones = Array1::ones(n);
        Ok(self.backward(&tape, zeros.view(), Some(ones.view()), None, true).expect("input adjoint"))
    }

    /// `d(w . grad NN(x))/d theta`, without the penalty.
    pub fn grad_params_of_directional_input_grad(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, NetError> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        if w.len() != x.len() {
            return Err(NetError::DimensionMismatch { expected: x.len(), got: w.len() });
        }
        let ws = ArrayView2::from_shape((1, w.len()), w).expect("row");
        let tape = self.forward_tape(xs, Some(ws))?;
        let mut g = vec![0.0; self.num_params()];
        let zero = Array1::zeros(1);
        let one = Array1::ones(1);
        self.backward(&tape, zero.view(), Some(one.view()), Some(&mut g), false);
        Ok(g)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, adam: Option<&AdamState>) -> io::Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&NET_VERSION.to_le_bytes())?;
        w.write_all(&(self.spec.layers() as u32).to_le_bytes())?;
        for &width in &self.spec.widths {
            w.write_all(&(width as u64).to_le_bytes())?;
        }
        w.write_all(&self.spec.l2_lambda.to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        match adam {
            None => w.write_all(&[0u8])?,
            Some(a) => {
                w.write_all(&[1u8])?;
                w.write_all(&a.t.to_le_bytes())?;
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in a.m.iter().chain(&a.v) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, Option<AdamState>), NetError> {
        let bad = |m: &str| NetError::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(bad("magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != NET_VERSION {
            return Err(bad("version"));
        }
        r.read_exact(&mut b4)?;
        let layers = u32::from_le_bytes(b4) as usize;
        if layers == 0 || layers > 1024 {
            return Err(bad("layer count"));
        }
        let mut widths = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            widths.push(read_u64(&mut r)? as usize);
        }
        let l2_lambda = read_f64(&mut r)?;
        let spec = MlpSpec { widths, l2_lambda };
        spec.validate()?;
        let count = spec.num_params();
        let params = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let net = Mlp::from_flat(spec, params)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let t = read_u64(&mut r)?;
                let lr = read_f64(&mut r)?;
                let beta1 = read_f64(&mut r)?;
                let beta2 = read_f64(&mut r)?;
                let eps = read_f64(&mut r)?;
                let m = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
                let v = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamState { m, v, t, lr, beta1, beta2, eps })
            }
            _ => return Err(bad("optimizer flag")),
        };
        Ok((net, adam))
    }
}

const NET_MAGIC: &[u8; 8] = b"DWKBNET\0";
const NET_VERSION: u32 = 1;

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

impl ScalarField for Mlp {
    fn dim(&self) -> usize {
        self.input_dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x).expect("dimension")
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.grad_input(x).expect("dimension")
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.hessian_input(x).expect("dimension")
    }
    fn values(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        const CHUNK: usize = 1024;
        let n = self.input_dim();
        let mut out = Vec::with_capacity(xs.len());
        for lo in (0..xs.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (lo..(lo + CHUNK).min(xs.len())).collect();
            let batch = batch_from_points(xs, &idx, n);
            out.extend(self.forward_batch(batch.view()).expect("dimension"));
        }
        out
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected step. A gradient with non-finite entries leaves everything unchanged.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NetError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NetError::DimensionMismatch { expected: self.m.len(), got: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rows of `points` as a batch matrix.
pub fn batch_from_points(points: &[Vec<f64>], idx: &[usize], n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((idx.len(), n));
    for (r, &i) in idx.iter().enumerate() {
        m.slice_mut(s![r, ..]).assign(&ArrayView1::from(&points[i][..]));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(seed: u64) -> Mlp {
        let spec = MlpSpec { widths: vec![3, 7, 5, 4, 1], l2_lambda: 0.0 };
        let mut net = Mlp::init(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        // nonzero biases exercise every path
        for k in 0..net.num_params() {
            if !net.is_weight(k) {
                net.params_mut()[k] = rng.random_range(-0.5..0.5);
            }
        }
        net
    }

    /// Naive loops over the flat layout.
    fn reference_forward(net: &Mlp, x: &[f64]) -> f64 {
        let w = &net.spec.widths;
        let p = net.params();
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..w.len() - 1 {
            let (i, o) = (w[l], w[l + 1]);
            let mut z = vec![0.0; o];
            for r in 0..o {
                let mut acc = p[off + o * i + r];
                for c in 0..i {
                    acc += p[off + r * i + c] * a[c];
                }
                z[r] = if l + 2 < w.len() { 1.0 / (1.0 + (-acc).exp()) } else { acc };
            }
            off += o * i + o;
            a = z;
        }
        a[0]
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / b.abs().max(scale)
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let spec = MlpSpec::standard(2);
        let a = Mlp::init(spec.clone(), 1).unwrap();
        let b = Mlp::init(spec.clone(), 1).unwrap();
        let c = Mlp::init(spec, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let bound = (6.0f64 / 34.0).sqrt();
        assert!((bound - 0.4201).abs() < 1e-4);
        assert!(a.weight(0).iter().all(|w| w.abs() <= bound));
        assert!(a.bias(0).iter().all(|b| *b == 0.0));
        assert_eq!(a.num_params(), 2 * 32 + 32 + 32 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 64 + 64 + 64 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn trivial_networks() {
        let mut net = Mlp::zeros(MlpSpec::standard(2)).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0]).unwrap(), 0.0);
        let last = net.num_params() - 1;
        net.params_mut()[last] = 2.5;
        assert_eq!(net.forward(&[10.0, 4.0]).unwrap(), 2.5);
        assert!(net.grad_input(&[1.0, 1.0]).unwrap().iter().all(|g| *g == 0.0));
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let net = Mlp::init(MlpSpec::standard(3), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = random_x(&mut rng, 3);
            let a = net.forward(&x).unwrap();
            let b = reference_forward(&net, &x);
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn param_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let net = small(trial);
            let x = random_x(&mut rng, 3);
            let up = 1.3;
            let g = net.grad_params(&x, up).unwrap();
            let scale = 1e-3 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..net.num_params() {
                let h = 1e-5;
                let mut p = net.clone();
                p.params_mut()[k] += h;
                let fp = p.forward(&x).unwrap();
                p.params_mut()[k] -= 2.0 * h;
                let fm = p.forward(&x).unwrap();
                let fd = up * (fp - fm) / (2.0 * h);
                assert!(rel_err(g[k], fd, scale) < 1e-6, "k {k} {} {fd}", g[k]);
            }
        }
    }

    #[test]
    fn penalty_gradient() {
        let mut net = small(4);
        net.spec.l2_lambda = 0.1;
        let g = net.grad_params(&[0.1, 0.2, 0.3], 0.0).unwrap();
        for k in 0..net.num_params() {
            let expect = if net.is_weight(k) { 0.1 * net.params()[k] } else { 0.0 };
            assert_eq!(g[k], expect);
        }
        net.spec.l2_lambda = 0.0;
        assert!(net.grad_params(&[0.1, 0.2, 0.3], 0.0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_gradient_and_hessian_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let net = small(100 + trial);
            let x = random_x(&mut rng, 3);
            let g = net.grad_input(&x).unwrap();
            let h = net.hessian_input(&x).unwrap();
            let raw = net.hessian_rows(&x).unwrap();
            let hs = 1e-5;
            let gscale = 1e-3 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let hscale = 1e-3 * h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..3 {
                let mut xp = x.clone();
                xp[i] += hs;
                let mut xm = x.clone();
                xm[i] -= hs;
                let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * hs);
                assert!(rel_err(g[i], fd, gscale) < 1e-6);
                let gp = net.grad_input(&xp).unwrap();
                let gm = net.grad_input(&xm).unwrap();
                for j in 0..3 {
                    let fd = (gp[j] - gm[j]) / (2.0 * hs);
                    assert!(rel_err(h[(i, j)], fd, hscale) < 1e-5);
                    assert!((raw[(i, j)] - raw[(j, i)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn directional_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let net = small(200 + trial);
            let x = random_x(&mut rng, 3);
            let w = random_x(&mut rng, 3);
            let g = net.grad_params_of_directional_input_grad(&x, &w).unwrap();
            let scale = 1e-3 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let dir = |p: &Mlp| p.grad_input(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..net.num_params() {
                let h = 1e-5;
                let mut p = net.clone();
                p.params_mut()[k] += h;
                let fp = dir(&p);
                p.params_mut()[k] -= 2.0 * h;
                let fm = dir(&p);
                let fd = (fp - fm) / (2.0 * h);
                assert!(rel_err(g[k], fd, scale) < 1e-5, "k {k} {} {fd}", g[k]);
            }
        }
    }

    #[test]
    fn directional_gradient_is_linear_in_direction() {
        let net = small(7);
        let x = [0.3, -0.2, 0.9];
        let w1 = [1.0, 0.5, -2.0];
        let w2 = [-0.3, 2.0, 0.1];
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let g1 = net.grad_params_of_directional_input_grad(&x, &w1).unwrap();
        let g2 = net.grad_params_of_directional_input_grad(&x, &w2).unwrap();
        let gs = net.grad_params_of_directional_input_grad(&x, &sum).unwrap();
        for k in 0..g1.len() {
            assert!((g1[k] + g2[k] - gs[k]).abs() < 1e-12);
        }
        let g0 = net.grad_params_of_directional_input_grad(&x, &[0.0; 3]).unwrap();
        assert!(g0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_network() {
        // single hidden unit near the linear regime is not linear; use no hidden layer
        let spec = MlpSpec { widths: vec![2, 1], l2_lambda: 0.0 };
        let net = Mlp::from_flat(spec, vec![2.0, -3.0, 0.5]).unwrap();
        assert_eq!(net.grad_input(&[0.4, 0.1]).unwrap(), vec![2.0, -3.0]);
        assert!(net.hessian_input(&[0.4, 0.1]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_inputs_give_equal_gradients() {
        let mut net = small(8);
        // copy column 0 of the first weight matrix into column 1
        let (i, o) = (net.spec.widths[0], net.spec.widths[1]);
        for r in 0..o {
            let v = net.params()[r * i];
            net.params_mut()[r * i + 1] = v;
        }
        let g = net.grad_input(&[0.7, 0.7, -0.1]).unwrap();
        assert!((g[0] - g[1]).abs() < 1e-15);
    }

    #[test]
    fn local_quadratic_curvature() {
        let spec = MlpSpec { widths: vec![1, 6, 1], l2_lambda: 0.0 };
        let net = Mlp::init(spec, 12).unwrap();
        let x0 = 0.3;
        let h = 1e-3;
        let f = |x: f64| net.forward(&[x]).unwrap();
        let a = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h) / 2.0;
        let hess = net.hessian_input(&[x0]).unwrap()[(0, 0)];
        assert!((hess - 2.0 * a).abs() < 1e-5 * hess.abs().max(1e-3));
    }

    #[test]
    fn adam_first_step() {
        let mut params = vec![0.5; 4];
        let mut adam = AdamState::new(4, 1e-3);
        adam.step(&mut params, &[1.0; 4]).unwrap();
        for p in &params {
            assert!((p - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        }
        assert_eq!(adam.t, 1);
        let mut still = vec![0.5; 4];
        let mut fresh = AdamState::new(4, 1e-3);
        fresh.step(&mut still, &[0.0; 4]).unwrap();
        assert_eq!(still, vec![0.5; 4]);
        let before = adam.clone();
        assert!(matches!(adam.step(&mut params, &[f64::NAN, 0.0, 0.0, 0.0]), Err(NetError::NonFiniteGradient)));
        assert_eq!(adam, before);
    }

    #[test]
    fn alternating_optimizers_keep_separate_state() {
        let mut params = vec![0.0; 3];
        let mut a = AdamState::new(3, 1e-2);
        let mut b = AdamState::new(3, 1e-3);
        a.step(&mut params, &[1.0, 0.0, 0.0]).unwrap();
        b.step(&mut params, &[0.0, 1.0, 0.0]).unwrap();
        let g = 1.0 - 0.9;
        assert_eq!(a.m, vec![g, 0.0, 0.0]);
        assert_eq!(b.m, vec![0.0, g, 0.0]);
        assert_eq!((a.t, b.t), (1, 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small(9);
        let mut adam = AdamState::new(net.num_params(), 1e-3);
        let mut p = net.params().to_vec();
        adam.step(&mut p, &vec![0.3; net.num_params()]).unwrap();
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes, Some(&adam)).unwrap();
        let (back, back_adam) = Mlp::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, net);
        assert_eq!(back_adam, Some(adam));
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes, None).unwrap();
        assert_eq!(Mlp::read_checkpoint(&bytes[..]).unwrap().1, None);
        assert!(Mlp::read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let net = small(10);
        let pts = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]];
        let xs = batch_from_points(&pts, &[0, 1], 3);
        let (v, g) = net.value_and_grad_batch(xs.view()).unwrap();
        for r in 0..2 {
            assert_eq!(v[r], net.forward(&pts[r]).unwrap());
            let gi = net.grad_input(&pts[r]).unwrap();
            for j in 0..3 {
                assert!((g[(r, j)] - gi[j]).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn flat_round_trip(seed in 0u64..1000) {
            let net = small(seed);
            let back = Mlp::from_flat(net.spec.clone(), net.params().to_vec()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
