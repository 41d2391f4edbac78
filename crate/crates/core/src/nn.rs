//! Minimal dense building blocks with explicit backward passes.
//!
//! Every trainable structure implements [`Params`]; gradients are stored in
//! a value of the same type so that parameters and gradients can be walked in
//! lockstep by the optimizers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GenddError, Result};

pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(GenddError::Validation(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(0.0));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |_, t| acc += t.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, t| {
            hasher.update(name.as_bytes());
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Adds `scale * other` into `target`; both must share a layout.
pub fn accumulate<P: Params>(target: &mut P, other: &P, scale: f64) {
    let flat = other.flatten();
    let mut offset = 0;
    target.visit_mut(&mut |_, t| {
        let len = t.len();
        for (v, o) in t.iter_mut().zip(&flat[offset..offset + len]) {
            *v += scale * o;
        }
        offset += len;
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Array2::zeros((input, output)), bias: Array1::zeros(output) }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    /// He-normal weights for ReLU stacks.
    pub fn he<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            }),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("weight", self.weight.as_slice().expect("standard layout"));
        f("bias", self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", self.weight.as_slice_mut().expect("standard layout"));
        f("bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_array(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

/// `dy * silu'(x)`.
pub fn silu_backward(x: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    Zip::from(&mut out).and(x).and(dy).for_each(|o, &x, &d| *o = d * silu_grad(x));
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer normalization without affine parameters.
/// Returns the normalized rows and the per-row inverse standard deviation.
pub fn layer_norm(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in y.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let s = *inv_std;
        row.mapv_inplace(|v| v * s);
    }
    (y, inv)
}

pub fn layer_norm_backward(y: &Array2<f64>, inv_std: &Array1<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let width = y.ncols() as f64;
    let mut dx = Array2::zeros(y.dim());
    for r in 0..y.nrows() {
        let yr = y.row(r);
        let dr = dy.row(r);
        let mean_d = dr.sum() / width;
        let mean_dy = dr.dot(&yr) / width;
        let s = inv_std[r];
        Zip::from(dx.row_mut(r))
            .and(&dr)
            .and(&yr)
            .for_each(|o, &d, &yv| *o = s * (d - mean_d - yv * mean_dy));
    }
    dx
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax_row(&row.to_vec());
        row.assign(&Array1::from(p));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::Adamw),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(GenddError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// AdamW (decoupled weight decay) or SGD with momentum, with state kept per
/// named parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    groups: BTreeMap<String, GroupState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            momentum: 0.9,
            groups: BTreeMap::new(),
        }
    }

    pub fn step<P: Params>(&mut self, group: &str, params: &mut P, grads: &P, lr: f64) {
        let grad = grads.flatten();
        let state = self.groups.entry(group.to_string()).or_insert_with(|| GroupState {
            first: vec![0.0; grad.len()],
            second: Vec::new(),
            steps: 0,
        });
        state.steps += 1;
        let wd = self.weight_decay;
        let mut offset = 0;
        match self.kind {
            OptimizerKind::Adamw => {
                if state.second.len() != grad.len() {
                    state.second = vec![0.0; grad.len()];
                }
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let bc1 = 1.0 - b1.powi(state.steps as i32);
                let bc2 = 1.0 - b2.powi(state.steps as i32);
                let (first, second) = (&mut state.first, &mut state.second);
                params.visit_mut(&mut |_, t| {
                    for (i, p) in t.iter_mut().enumerate() {
                        let k = offset + i;
                        let g = grad[k];
                        first[k] = b1 * first[k] + (1.0 - b1) * g;
                        second[k] = b2 * second[k] + (1.0 - b2) * g * g;
                        let m_hat = first[k] / bc1;
                        let v_hat = second[k] / bc2;
                        *p -= lr * wd * *p;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += t.len();
                });
            }
            OptimizerKind::Sgd => {
                let mu = self.momentum;
                let buf = &mut state.first;
                params.visit_mut(&mut |_, t| {
                    for (i, p) in t.iter_mut().enumerate() {
                        let k = offset + i;
                        let g = grad[k] + wd * *p;
                        buf[k] = mu * buf[k] + g;
                        *p -= lr * buf[k];
                    }
                    offset += t.len();
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScheduleKind {
    #[default]
    Cosine,
    Step,
}

impl fmt::Display for LrScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrScheduleKind::Cosine => "cosine",
            LrScheduleKind::Step => "step",
        })
    }
}

impl FromStr for LrScheduleKind {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrScheduleKind::Cosine),
            "step" => Ok(LrScheduleKind::Step),
            other => Err(GenddError::Config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

/// Learning rate as a function of the optimizer step, with linear warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrScheduleKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Step indices at which the step schedule multiplies by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            LrScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrScheduleKind::Step => {
                let passed = self.milestones.iter().filter(|&&m| step >= m).count();
                self.base_lr * self.gamma.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn fd_check(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "index {idx}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::xavier(4, 3, &mut rng);
        let x = random(5, 4, &mut rng);
        let probe = random(5, 3, &mut rng);
        let loss = |x: &Array2<f64>| (layer.forward(x.view()) * &probe).sum();
        let mut grad = Linear::zeros(4, 3);
        let dx = layer.backward(x.view(), probe.view(), &mut grad);
        fd_check(&loss, &x, &dx);
        let wloss = |w: &Array2<f64>| {
            let l = Linear { weight: w.clone(), bias: layer.bias.clone() };
            (l.forward(x.view()) * &probe).sum()
        };
        fd_check(&wloss, &layer.weight, &grad.weight);
    }

    #[test]
    fn layer_norm_and_silu_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 6, &mut rng);
        let probe = random(3, 6, &mut rng);
        let (y, inv) = layer_norm(x.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
        let dx = layer_norm_backward(&y, &inv, probe.view());
        fd_check(&|x| (layer_norm(x.view()).0 * &probe).sum(), &x, &dx);
        let ds = silu_backward(&x, probe.view());
        fd_check(&|x| (silu_array(x) * &probe).sum(), &x, &ds);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax_row(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let lp = log_softmax_row(&[0.0, 0.0, 0.0, 0.0]);
        assert!((lp[0] + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Adamw, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.0);
            let mut layer = Linear::zeros(2, 1);
            layer.weight[[0, 0]] = 3.0;
            layer.bias[0] = -2.0;
            let start = layer.sq_norm();
            for _ in 0..200 {
                let mut grad = layer.clone();
                grad.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v *= 2.0));
                opt.step("g", &mut layer, &grad, 0.01);
            }
            assert!(layer.sq_norm() < 0.5 * start, "{kind} failed to descend");
        }
    }

    #[test]
    fn lr_schedules() {
        let cos = LrSchedule {
            kind: LrScheduleKind::Cosine,
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            milestones: vec![],
            gamma: 0.1,
        };
        assert!((cos.lr(0) - 0.1).abs() < 1e-15);
        assert!((cos.lr(9) - 1.0).abs() < 1e-15);
        assert!((cos.lr(10) - 1.0).abs() < 1e-15);
        assert!((cos.lr(60) - 0.5).abs() < 1e-12);
        assert!(cos.lr(110).abs() < 1e-15);
        let step = LrSchedule { kind: LrScheduleKind::Step, milestones: vec![50, 80], warmup_steps: 0, ..cos };
        assert_eq!(step.lr(49), 1.0);
        assert!((step.lr(50) - 0.1).abs() < 1e-15);
        assert!((step.lr(99) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn checksum_tracks_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Linear::xavier(3, 3, &mut rng);
        let before = layer.checksum();
        assert_eq!(before, layer.clone().checksum());
        layer.bias[1] += 1e-12;
        assert_ne!(before, layer.checksum());
        let flat = layer.flatten();
        let mut other = Linear::zeros(3, 3);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, layer);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
