//! Training objectives: the token-wise noise-prediction loss on contracted
//! targets, and the CE + temperature-scaled KL logit baseline.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};

use crate::contraction::ContractionSpec;
use crate::error::{ensure, GenddError, Result};
use crate::head::{DenoiserHead, HeadInput, HeadParams, NoisePredictor};
use crate::nn::{log_softmax_row, softmax_row};
use crate::schedule::NoiseSchedule;
use crate::tokenizer::TokenBatch;

pub const DEFAULT_CFG_DROP_RATE: f64 = 0.1;

/// Random draws shared by one evaluation of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatchPlan {
    /// One step per token row (`B * n`), uniform over `1..=M`.
    pub steps: Vec<usize>,
    /// `(B * n) x d_tok` standard normal noise.
    pub noise: Array2<f64>,
    /// Per-sample classifier-free guidance dropout.
    pub drop_condition: Vec<bool>,
}

impl LossBatchPlan {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        num_tokens: usize,
        token_dim: usize,
        max_step: usize,
        drop_rate: f64,
    ) -> Result<Self> {
        ensure!(max_step >= 1, "max step must be >= 1");
        ensure!((0.0..=1.0).contains(&drop_rate), "drop rate must lie in [0, 1], got {drop_rate}");
        let rows = batch * num_tokens;
        let step_dist = Uniform::new_inclusive(1, max_step).expect("non-empty step range");
        let steps = (0..rows).map(|_| step_dist.sample(rng)).collect();
        let noise = Array2::from_shape_simple_fn((rows, token_dim), || {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        let drop = Bernoulli::new(drop_rate).expect("validated probability");
        let drop_condition = (0..batch).map(|_| drop.sample(rng)).collect();
        Ok(LossBatchPlan { steps, noise, drop_condition })
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }
}

/// Noised contracted targets plus the row metadata fed to the head.
pub struct PreparedBatch {
    pub noisy: Array2<f64>,
    pub positions: Vec<usize>,
    pub samples: Vec<usize>,
    pub null_mask: Vec<bool>,
}

impl PreparedBatch {
    pub fn input<'a>(&'a self, plan: &'a LossBatchPlan, conditions: ArrayView2<'a, f64>) -> HeadInput<'a> {
        HeadInput {
            tokens: self.noisy.view(),
            steps: &plan.steps,
            positions: &self.positions,
            samples: &self.samples,
            conditions,
            null_mask: &self.null_mask,
        }
    }
}

/// Contracts, noises and lays out a token batch according to `plan`.
pub fn prepare(
    schedule: &NoiseSchedule,
    batch: &TokenBatch,
    spec: &ContractionSpec,
    plan: &LossBatchPlan,
) -> Result<PreparedBatch> {
    let (b, n, d) = batch.tokens.dim();
    ensure!(
        plan.rows() == b * n && plan.noise.dim() == (b * n, d),
        "plan covers {} rows of dimension {}, batch has {} of dimension {d}",
        plan.rows(),
        plan.noise.ncols(),
        b * n
    );
    ensure!(plan.drop_condition.len() == b, "plan has {} dropout flags for {b} samples", plan.drop_condition.len());
    let targets = spec.contract_tokens(batch)?;
    let targets = targets.into_shape_with_order((b * n, d)).expect("contiguous tokens");
    let noisy = schedule.forward_noise_rows(targets.view(), &plan.steps, plan.noise.view())?;
    Ok(PreparedBatch {
        noisy,
        positions: (0..b * n).map(|r| batch.position_ids[r % n]).collect(),
        samples: (0..b * n).map(|r| r / n).collect(),
        null_mask: (0..b * n).map(|r| plan.drop_condition[r / n]).collect(),
    })
}

fn squared_error(pred: &Array2<f64>, noise: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let diff = pred - noise;
    let rows = diff.nrows().max(1) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / rows;
    if !loss.is_finite() {
        let bad = diff.iter().filter(|v| !v.is_finite()).count();
        return Err(GenddError::NonFinite(format!(
            "training loss is {loss} ({bad} non-finite residual entries over {} rows)",
            diff.nrows()
        )));
    }
    Ok((loss, diff))
}

/// Mean over rows of `||eps - eps_pred||^2` for any predictor.
pub fn evaluate_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    batch: &TokenBatch,
    spec: &ContractionSpec,
    plan: &LossBatchPlan,
) -> Result<f64> {
    let prepared = prepare(schedule, batch, spec, plan)?;
    let pred = predictor.predict_eps(&prepared.input(plan, batch.condition.view()))?;
    Ok(squared_error(&pred, &plan.noise)?.0)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub head_grads: HeadParams,
    /// Gradient with respect to the student features, `B x d_s`.
    pub condition_grads: Array2<f64>,
}

/// Token-wise noise-prediction loss and its gradients.
pub fn training_loss(
    head: &DenoiserHead,
    schedule: &NoiseSchedule,
    batch: &TokenBatch,
    spec: &ContractionSpec,
    plan: &LossBatchPlan,
) -> Result<LossOutput> {
    let prepared = prepare(schedule, batch, spec, plan)?;
    let (pred, cache) = head.forward(&prepared.input(plan, batch.condition.view()))?;
    let (loss, diff) = squared_error(&pred, &plan.noise)?;
    let d_out = diff * (2.0 / plan.rows().max(1) as f64);
    let (head_grads, condition_grads) = head.backward(&cache, d_out.view());
    Ok(LossOutput { loss, head_grads, condition_grads })
}

/// Weights of the logit-distillation baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlWeights {
    pub temperature: f64,
    pub w_kl: f64,
    pub w_ce: f64,
}

impl Default for KlWeights {
    fn default() -> Self {
        KlWeights { temperature: 1.0, w_kl: 0.5, w_ce: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct KlLossOutput {
    pub loss: f64,
    pub kl: f64,
    pub ce: f64,
    /// Gradient with respect to the student logits.
    pub grad: Array2<f64>,
}

/// `w_ce * CE(student, y) + w_kl * T^2 * KL(softmax(t/T) || softmax(s/T))`,
/// averaged over the batch.
pub fn kl_baseline_loss(
    teacher_logits: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    labels: Option<&[usize]>,
    weights: KlWeights,
) -> Result<KlLossOutput> {
    ensure!(
        teacher_logits.dim() == student_logits.dim(),
        "teacher logits {:?} vs student logits {:?}",
        teacher_logits.dim(),
        student_logits.dim()
    );
    ensure!(weights.temperature > 0.0, "temperature must be positive");
    if weights.w_ce > 0.0 {
        let labels = labels.ok_or_else(|| {
            GenddError::Validation("labels are required when w_ce > 0".into())
        })?;
        ensure!(labels.len() == student_logits.nrows(), "{} labels for {} rows", labels.len(), student_logits.nrows());
    }
    let (batch, classes) = student_logits.dim();
    let t = weights.temperature;
    let mut grad = Array2::zeros((batch, classes));
    let (mut kl_sum, mut ce_sum) = (0.0, 0.0);
    for r in 0..batch {
        let tl: Vec<f64> = teacher_logits.row(r).iter().map(|v| v / t).collect();
        let sl: Vec<f64> = student_logits.row(r).iter().map(|v| v / t).collect();
        let (tlog, slog) = (log_softmax_row(&tl), log_softmax_row(&sl));
        let (tp, sp) = (softmax_row(&tl), softmax_row(&sl));
        let kl: f64 = tp
            .iter()
            .zip(tlog.iter().zip(&slog))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, (lt, ls))| p * (lt - ls))
            .sum();
        kl_sum += kl;
        for c in 0..classes {
            grad[[r, c]] += weights.w_kl * t * (sp[c] - tp[c]);
        }
        if weights.w_ce > 0.0 {
            let y = labels.expect("checked above")[r];
            ensure!(y < classes, "label {y} out of range for {classes} classes");
            let raw: Vec<f64> = student_logits.row(r).to_vec();
            let (lp, p) = (log_softmax_row(&raw), softmax_row(&raw));
            ce_sum -= lp[y];
            for c in 0..classes {
                let onehot = if c == y { 1.0 } else { 0.0 };
                grad[[r, c]] += weights.w_ce * (p[c] - onehot);
            }
        }
    }
    let scale = 1.0 / batch.max(1) as f64;
    let kl = kl_sum * scale;
    let ce = ce_sum * scale;
    grad *= scale;
    Ok(KlLossOutput { loss: weights.w_ce * ce + weights.w_kl * t * t * kl, kl, ce, grad })
}
