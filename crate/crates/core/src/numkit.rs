//! Dense numeric core: row-major 2-D tensors, activations, softmax,
//! first-order optimizers and a central-difference gradient checker.
//!
//! Everything is computed in `f64`. Public operations reject non-finite
//! input so that every tensor produced here stays finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs to `tanh`/`sigmoid` are clamped to this magnitude.
const ACTIVATION_CLAMP: f64 = 40.0;

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a tensor from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        check_finite(&data)?;
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor2D::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2D::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the selected rows, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2D {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2D {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut t = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor2D::from_vec(self.rows, self.cols, data)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor2D) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    check_finite(&out.data)?;
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: (b.cols, b.rows),
        });
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    check_finite(&out.data)?;
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    check_finite(v)?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(sum(exp(v)))`, stable for large inputs.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.clamp(-ACTIVATION_CLAMP, ACTIVATION_CLAMP).tanh()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-ACTIVATION_CLAMP, ACTIVATION_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation; shape is preserved.
pub fn activate(t: &Tensor2D, kind: Activation) -> Result<Tensor2D> {
    check_finite(&t.data)?;
    let f = match kind {
        Activation::Tanh => tanh,
        Activation::Sigmoid => sigmoid,
    };
    Ok(Tensor2D {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&x| f(x)).collect(),
    })
}

/// Multiplicative step decay: the learning rate is multiplied by `factor`
/// every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub period: usize,
}

/// Optimizer hyperparameters. A fresh [`OptimState`] is created per
/// parameter tensor from this spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimSpec {
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        decay: Option<StepDecay>,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimSpec::Sgd {
            learning_rate,
            momentum: 0.0,
            decay: None,
        }
    }

    /// SGD with the `×0.1 every 10 epochs` schedule.
    pub fn sgd_step_decay(learning_rate: f64) -> Self {
        OptimSpec::Sgd {
            learning_rate,
            momentum: 0.0,
            decay: Some(StepDecay {
                factor: 0.1,
                period: 10,
            }),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimSpec::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimSpec::Sgd { learning_rate, .. } | OptimSpec::Adam { learning_rate, .. } => {
                *learning_rate
            }
        }
    }

    /// Same optimizer with a different base learning rate.
    pub fn with_learning_rate(self, lr: f64) -> Self {
        match self {
            OptimSpec::Sgd { momentum, decay, .. } => OptimSpec::Sgd {
                learning_rate: lr,
                momentum,
                decay,
            },
            OptimSpec::Adam {
                beta1, beta2, epsilon, ..
            } => OptimSpec::Adam {
                learning_rate: lr,
                beta1,
                beta2,
                epsilon,
            },
        }
    }

    /// Effective learning rate at a 0-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self {
            OptimSpec::Sgd {
                learning_rate,
                decay: Some(d),
                ..
            } if d.period > 0 => learning_rate * d.factor.powi((epoch / d.period) as i32),
            _ => self.learning_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if let OptimSpec::Adam { beta1, beta2, epsilon, .. } = self {
            if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || *epsilon <= 0.0 {
                return Err(Error::InvalidArgument("bad Adam hyperparameters".into()));
            }
        }
        Ok(())
    }

    pub fn state_for(&self, shape: (usize, usize)) -> OptimState {
        let buffers = match self {
            OptimSpec::Sgd { .. } => Buffers::Sgd {
                velocity: Tensor2D::zeros(shape.0, shape.1),
            },
            OptimSpec::Adam { .. } => Buffers::Adam {
                m: Tensor2D::zeros(shape.0, shape.1),
                v: Tensor2D::zeros(shape.0, shape.1),
            },
        };
        OptimState {
            spec: self.clone(),
            buffers,
            steps: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Buffers {
    Sgd { velocity: Tensor2D },
    Adam { m: Tensor2D, v: Tensor2D },
}

/// Per-tensor optimizer state (momentum or moment buffers and step count).
#[derive(Debug, Clone)]
pub struct OptimState {
    spec: OptimSpec,
    buffers: Buffers,
    steps: u64,
    epoch: usize,
}

impl OptimState {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_lr(&self) -> f64 {
        self.spec.lr_at_epoch(self.epoch)
    }

    fn buffer_shape(&self) -> (usize, usize) {
        match &self.buffers {
            Buffers::Sgd { velocity } => velocity.shape(),
            Buffers::Adam { m, .. } => m.shape(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut Tensor2D, grads: &Tensor2D) -> Result<()> {
        if params.shape() != grads.shape() {
            return Err(Error::ShapeMismatch {
                left: params.shape(),
                right: grads.shape(),
            });
        }
        if self.buffer_shape() != params.shape() {
            return Err(Error::ShapeMismatch {
                left: self.buffer_shape(),
                right: params.shape(),
            });
        }
        check_finite(&grads.data)?;
        let lr = self.current_lr();
        self.steps += 1;
        match (&self.spec, &mut self.buffers) {
            (OptimSpec::Sgd { momentum, .. }, Buffers::Sgd { velocity }) => {
                for ((p, g), vel) in params
                    .data
                    .iter_mut()
                    .zip(&grads.data)
                    .zip(velocity.data.iter_mut())
                {
                    *vel = momentum * *vel + g;
                    *p -= lr * *vel;
                }
            }
            (
                OptimSpec::Adam {
                    beta1,
                    beta2,
                    epsilon,
                    ..
                },
                Buffers::Adam { m, v },
            ) => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), mi), vi) in params
                    .data
                    .iter_mut()
                    .zip(&grads.data)
                    .zip(m.data.iter_mut())
                    .zip(v.data.iter_mut())
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            _ => unreachable!("buffers always match the spec they were built from"),
        }
        check_finite(&params.data)
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor2D, eps: f64) -> Result<Tensor2D>
where
    F: Fn(&Tensor2D) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite);
        }
        grad.data[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Mixes a master seed with a path of indices into an independent stream
/// seed (splitmix64 finaliser), so work can be split across threads without
/// changing results.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x6a09_e667_f3bc_c909);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
