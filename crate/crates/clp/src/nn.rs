//! Small neural-network toolkit in f64: linear layers, batch norm, ReLU,
//! row L2 normalization, SGD with momentum, and numerical gradient checking.
//!
//! Everything is explicit: forward passes return caches, backward passes
//! consume them and hand back parameter gradients keyed by tensor name.
//! Double precision keeps the finite-difference checks meaningful and makes
//! checkpoints exact under JSON round-trips.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};

/// What a named tensor is, which decides who updates it.
///
/// The optimizer touches trainable kinds only; running statistics move during
/// forward passes in training mode; the EMA target update blends every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    NormGamma,
    NormBeta,
    NormMean,
    NormVar,
}

impl TensorKind {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, TensorKind::NormMean | TensorKind::NormVar)
    }

    /// Batch-norm tensors, the only ones a frozen-encoder probe may touch.
    pub fn is_norm(&self) -> bool {
        matches!(
            self,
            TensorKind::NormGamma | TensorKind::NormBeta | TensorKind::NormMean | TensorKind::NormVar
        )
    }
}

/// Parameter gradients keyed by tensor name, flattened row-major.
pub type Grads = BTreeMap<String, Vec<f64>>;

pub fn add_grad(grads: &mut Grads, name: &str, g: &[f64]) {
    match grads.get_mut(name) {
        Some(acc) => {
            assert_eq!(acc.len(), g.len(), "gradient shape changed for {name}");
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
}

/// Read visitor over (name, kind, shape, data) of each tensor in a module.
pub type Visitor<'a> = dyn FnMut(&str, TensorKind, &[usize], &[f64]) + 'a;
/// Mutating counterpart of [`Visitor`]; shapes stay fixed, values may change.
pub type VisitorMut<'a> = dyn FnMut(&str, TensorKind, &[usize], &mut [f64]) + 'a;

/// Uniform access to a network's named tensors.
pub trait Module {
    fn visit(&self, f: &mut Visitor);
    fn visit_mut(&mut self, f: &mut VisitorMut);
}

/// A named tensor snapshot, the unit of checkpoint state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn state_map(module: &dyn Module) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    module.visit(&mut |name, kind, shape, data| {
        out.insert(
            name.to_string(),
            Tensor {
                kind,
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    });
    out
}

/// Load tensors by name, insisting on an exact match of names and shapes.
pub fn load_state_map(module: &mut dyn Module, state: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = 0usize;
    let mut shape_err: Option<String> = None;
    module.visit_mut(&mut |name, _kind, shape, data| {
        match state.get(name) {
            Some(t) => {
                seen += 1;
                if t.shape != shape {
                    shape_err.get_or_insert_with(|| {
                        format!("tensor {name}: checkpoint shape {:?} vs model {:?}", t.shape, shape)
                    });
                } else {
                    data.copy_from_slice(&t.data);
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(ClpError::Contract(msg));
    }
    if !missing.is_empty() {
        return Err(ClpError::Contract(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if seen != state.len() {
        return Err(ClpError::Contract(format!(
            "checkpoint has {} tensors, model expects {seen}",
            state.len()
        )));
    }
    Ok(())
}

/// Exponential moving average: every target tensor becomes
/// `rho * target + (1 - rho) * online`. Running statistics are blended along
/// with the weights so the target normalizes consistently with what it sees.
pub fn ema_blend(target: &mut dyn Module, online: &dyn Module, rho: f64) -> Result<()> {
    let src = state_map(online);
    let mut missing: Option<String> = None;
    target.visit_mut(&mut |name, _kind, _shape, data| match src.get(name) {
        Some(t) => {
            for (d, s) in data.iter_mut().zip(&t.data) {
                *d = rho * *d + (1.0 - rho) * s;
            }
        }
        None => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    match missing {
        Some(name) => Err(ClpError::Contract(format!(
            "EMA source has no tensor named {name}"
        ))),
        None => Ok(()),
    }
}

pub fn count_params(module: &dyn Module, trainable_only: bool) -> usize {
    let mut n = 0;
    module.visit(&mut |_name, kind, _shape, data| {
        if !trainable_only || kind.is_trainable() {
            n += data.len();
        }
    });
    n
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// He-uniform weights, zero bias. Suits the ReLU blocks this feeds.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-limit..limit));
        Linear {
            name: name.to_string(),
            w,
            b: Array1::zeros(out_dim),
        }
    }

    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns dx and records dw, db into `grads`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        add_grad(grads, &format!("{}.weight", self.name), slice2(&dw));
        add_grad(grads, &format!("{}.bias", self.name), db.as_slice().unwrap());
        dy.dot(&self.w)
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut Visitor) {
        let (o, i) = self.w.dim();
        f(&self.weight_name(), TensorKind::Weight, &[o, i], slice2(&self.w));
        f(&self.bias_name(), TensorKind::Bias, &[o], self.b.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        let (o, i) = self.w.dim();
        let wname = self.weight_name();
        let bname = self.bias_name();
        f(&wname, TensorKind::Weight, &[o, i], slice2_mut(&mut self.w));
        f(&bname, TensorKind::Bias, &[o], self.b.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

const BN_EPS: f64 = 1e-5;
/// Running statistics move by this fraction of the batch statistic per step.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Everything the backward pass needs from one batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    train: bool,
    xhat: Array2<f64>,
    /// 1 / sqrt(var + eps) per feature, from whichever statistics were used.
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    /// In training mode normalizes by batch statistics (biased variance) and
    /// advances the running estimates (unbiased variance, when n > 1). In
    /// eval mode normalizes by the running estimates and mutates nothing.
    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> (Array2<f64>, BnCache) {
        let n = x.nrows() as f64;
        let (mean, var) = if train {
            let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
            let mut var = Array1::zeros(x.ncols());
            for row in x.rows() {
                for (v, (xi, mi)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                    *v += (xi - mi) * (xi - mi);
                }
            }
            var.mapv_inplace(|v| v / n);
            if x.nrows() > 1 {
                let unbias = n / (n - 1.0);
                for ((rm, rv), (m, v)) in self
                    .running_mean
                    .iter_mut()
                    .zip(self.running_var.iter_mut())
                    .zip(mean.iter().zip(var.iter()))
                {
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
                }
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for (v, (m, s)) in row.iter_mut().zip(mean.iter().zip(inv_std.iter())) {
                *v = (*v - m) * s;
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (v, (g, b)) in row.iter_mut().zip(self.gamma.iter().zip(self.beta.iter())) {
                *v = *v * g + b;
            }
        }
        (y, BnCache { train, xhat, inv_std })
    }

    pub fn backward(&self, cache: &BnCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let n = dy.nrows() as f64;
        let d = dy.ncols();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for (dy_row, xhat_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
            for (j, (dyv, xv)) in dy_row.iter().zip(xhat_row.iter()).enumerate() {
                dgamma[j] += dyv * xv;
                dbeta[j] += dyv;
            }
        }
        add_grad(grads, &format!("{}.gamma", self.name), &dgamma);
        add_grad(grads, &format!("{}.beta", self.name), &dbeta);

        let mut dx = Array2::zeros(dy.raw_dim());
        if cache.train {
            // dxhat = dy * gamma; dx folds in the dependence of the batch
            // statistics on every row.
            let mut sum_dxhat = vec![0.0; d];
            let mut sum_dxhat_xhat = vec![0.0; d];
            for (dy_row, xhat_row) in dy.rows().into_iter().zip(cache.xhat.rows()) {
                for (j, (dyv, xv)) in dy_row.iter().zip(xhat_row.iter()).enumerate() {
                    let dxhat = dyv * self.gamma[j];
                    sum_dxhat[j] += dxhat;
                    sum_dxhat_xhat[j] += dxhat * xv;
                }
            }
            for ((mut dx_row, dy_row), xhat_row) in dx
                .rows_mut()
                .into_iter()
                .zip(dy.rows())
                .zip(cache.xhat.rows())
            {
                for (j, ((dxv, dyv), xv)) in dx_row
                    .iter_mut()
                    .zip(dy_row.iter())
                    .zip(xhat_row.iter())
                    .enumerate()
                {
                    let dxhat = dyv * self.gamma[j];
                    *dxv = cache.inv_std[j] / n
                        * (n * dxhat - sum_dxhat[j] - xv * sum_dxhat_xhat[j]);
                }
            }
        } else {
            // Running statistics are constants here.
            for (mut dx_row, dy_row) in dx.rows_mut().into_iter().zip(dy.rows()) {
                for (j, (dxv, dyv)) in dx_row.iter_mut().zip(dy_row.iter()).enumerate() {
                    *dxv = dyv * self.gamma[j] * cache.inv_std[j];
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut Visitor) {
        let d = self.gamma.len();
        f(&format!("{}.gamma", self.name), TensorKind::NormGamma, &[d], self.gamma.as_slice().unwrap());
        f(&format!("{}.beta", self.name), TensorKind::NormBeta, &[d], self.beta.as_slice().unwrap());
        f(&format!("{}.running_mean", self.name), TensorKind::NormMean, &[d], self.running_mean.as_slice().unwrap());
        f(&format!("{}.running_var", self.name), TensorKind::NormVar, &[d], self.running_var.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        let d = self.gamma.len();
        f(&format!("{}.gamma", self.name), TensorKind::NormGamma, &[d], self.gamma.as_slice_mut().unwrap());
        f(&format!("{}.beta", self.name), TensorKind::NormBeta, &[d], self.beta.as_slice_mut().unwrap());
        f(&format!("{}.running_mean", self.name), TensorKind::NormMean, &[d], self.running_mean.as_slice_mut().unwrap());
        f(&format!("{}.running_var", self.name), TensorKind::NormVar, &[d], self.running_var.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Subgradient 0 at the origin.
pub fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (d, v) in dx.iter_mut().zip(x.iter()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

const NORM_FLOOR: f64 = 1e-12;

/// Row-wise x / ||x||. Rows shorter than the floor pass through scaled by
/// 1/floor, which training never produces.
pub fn l2_normalize(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.mapv_inplace(|v| v / norm);
    }
    y
}

/// Contract check for embedding batches: every row must sit on the unit
/// sphere within `tol`. A zero row here means a head emitted a degenerate
/// embedding (dead features under zero biases), which should stop a run
/// rather than silently feed the losses.
pub fn ensure_unit_rows(what: &str, x: &Array2<f64>, tol: f64) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ClpError::NonFinite {
                context: format!("{what} row {i}"),
                diagnostics: Some(format!("row norm {norm}")),
            });
        }
        if (norm - 1.0).abs() > tol {
            return Err(ClpError::Contract(format!(
                "{what} row {i} has norm {norm:.6}, expected 1 within {tol}"
            )));
        }
    }
    Ok(())
}

/// dx for y = x / ||x||: (dy - y (y . dy)) / ||x||, rows independent.
pub fn l2_normalize_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for ((x_row, dy_row), mut dx_row) in x.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let y: Vec<f64> = x_row.iter().map(|v| v / norm).collect();
        let dot: f64 = y.iter().zip(dy_row.iter()).map(|(yi, di)| yi * di).sum();
        for (k, dxv) in dx_row.iter_mut().enumerate() {
            *dxv = (dy_row[k] - y[k] * dot) / norm;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// v <- momentum v + g; w <- w - lr v. Tensors without a gradient, and
    /// non-trainable kinds, are left alone. `allow` filters by name; the
    /// probe uses it to restrict updates to batch-norm tensors.
    pub fn step_filtered(
        &mut self,
        module: &mut dyn Module,
        grads: &Grads,
        lr: f64,
        allow: &dyn Fn(&str, TensorKind) -> bool,
    ) {
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        module.visit_mut(&mut |name, kind, _shape, data| {
            if !kind.is_trainable() || !allow(name, kind) {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            assert_eq!(g.len(), data.len(), "gradient shape mismatch for {name}");
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            for ((w, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = momentum * *vi + gi;
                *w -= lr * *vi;
            }
        });
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Grads, lr: f64) {
        self.step_filtered(module, grads, lr, &|_, _| true);
    }
}

/// Cosine decay from `base_lr` to zero over `total` steps.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// Numerical gradient checking
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let plus = f(&xs);
        xs[i] = orig - h;
        let minus = f(&xs);
        xs[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Largest relative disagreement between two gradient vectors.
///
/// Components below the 1e-3 floor are compared against the floor itself,
/// which turns the check absolute there: central differences carry roundoff
/// near 1e-10, so demanding relative agreement on near-zero components would
/// measure that noise rather than the gradient code.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
