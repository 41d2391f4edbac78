//! Reverse-process generation of teacher-like features with respacing and
//! classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::head::{HeadInput, NoisePredictor};
use crate::models::LinearClassifier;
use crate::nn::softmax;
use crate::schedule::{NoiseSchedule, RespacedSchedule};
use crate::tokenizer::{self, FeatureStats};

pub const DEFAULT_SAMPLING_STEPS: usize = 64;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// sigma^2 = posterior variance of the respaced transition.
    #[default]
    Posterior,
    /// Deterministic updates.
    Zero,
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMode::Posterior => "posterior",
            VarianceMode::Zero => "zero",
        })
    }
}

impl FromStr for VarianceMode {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(VarianceMode::Posterior),
            "zero" => Ok(VarianceMode::Zero),
            other => Err(GenddError::Config(format!("unknown variance mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub variance: VarianceMode,
    pub seed: u64,
    /// Bound on the implied clean estimate at every step; 0 disables it.
    /// Without a bound the first step at very small alpha-bar multiplies any
    /// prediction error by `1 / sqrt(alpha)`.
    pub clip_x0: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_SAMPLING_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            variance: VarianceMode::Posterior,
            seed: 0,
            clip_x0: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "sampling steps must be >= 1");
        ensure!(
            self.guidance_scale >= 0.0 && self.guidance_scale.is_finite(),
            "guidance scale must be finite and >= 0, got {}",
            self.guidance_scale
        );
        ensure!(self.clip_x0 >= 0.0 && self.clip_x0.is_finite(), "clip_x0 must be finite and >= 0, got {}", self.clip_x0);
        Ok(())
    }
}

/// Conditioning shared by every row of a reverse step.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub positions: &'a [usize],
    pub samples: &'a [usize],
    pub conditions: ArrayView2<'a, f64>,
}

/// `eps_u + s * (eps_c - eps_u)`; a scale of exactly 1 (or 0) evaluates only
/// the conditional (or unconditional) branch.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: ArrayView2<f64>,
    m: usize,
    ctx: &RowContext<'_>,
    scale: f64,
) -> Result<Array2<f64>> {
    let rows = x.nrows();
    let steps = vec![m; rows];
    let branch = |null: bool| {
        let mask = vec![null; rows];
        predictor.predict_eps(&HeadInput {
            tokens: x,
            steps: &steps,
            positions: ctx.positions,
            samples: ctx.samples,
            conditions: ctx.conditions,
            null_mask: &mask,
        })
    };
    if scale == 1.0 {
        return branch(false);
    }
    if scale == 0.0 {
        return branch(true);
    }
    let cond = branch(false)?;
    let mut out = branch(true)?;
    Zip::from(&mut out).and(&cond).for_each(|u, &c| *u += scale * (c - *u));
    Ok(out)
}

/// One update `x_m -> x_prev` at base step `m`, which must be kept by `view`.
///
/// `noise` supplies the standard normal draw for the stochastic term; it is
/// ignored on the final step and in zero-variance mode.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    view: &RespacedSchedule,
    x: ArrayView2<f64>,
    m: usize,
    ctx: &RowContext<'_>,
    config: &SamplerConfig,
    noise: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let k = view
        .position_of(m)
        .ok_or_else(|| GenddError::Validation(format!("step {m} is not part of the respaced view")))?;
    let eps = guided_eps(predictor, x, m, ctx, config.guidance_scale)?;
    let alpha = view.alpha(k);
    let ab = view.alpha_bar(k);
    let mut out = Array2::zeros(x.dim());
    if config.clip_x0 > 0.0 && ab > 0.0 {
        // posterior mean written in terms of the clamped clean estimate
        let c = config.clip_x0;
        let ab_prev = view.prev_alpha_bar(k);
        let c0 = ab_prev.sqrt() * view.beta(k) / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(&mut out).and(x).and(&eps).for_each(|o, &xv, &e| {
            let x0 = ((xv - sb * e) / sa).clamp(-c, c);
            *o = c0 * x0 + ct * xv;
        });
    } else {
        let coef = view.beta(k) / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        Zip::from(&mut out)
            .and(x)
            .and(&eps)
            .for_each(|o, &xv, &e| *o = inv_sqrt_alpha * (xv - coef * e));
    }
    if k > 0 && config.variance == VarianceMode::Posterior {
        let sigma = view.posterior_variance(k).sqrt();
        let noise = noise.ok_or_else(|| {
            GenddError::Validation("stochastic reverse step needs a noise draw".into())
        })?;
        ensure!(noise.dim() == out.dim(), "noise shape {:?} != state shape {:?}", noise.dim(), out.dim());
        out.scaled_add(sigma, &noise);
    }
    if let Some(idx) = out.iter().position(|v| !v.is_finite()) {
        return Err(GenddError::NonFinite(format!(
            "reverse step at m={m} (position {k} of {}) produced a non-finite value in row {}",
            view.len(),
            idx / out.ncols().max(1)
        )));
    }
    Ok(out)
}

/// Layout of generated features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub feature_dim: usize,
    pub token_dim: usize,
}

impl FeatureLayout {
    pub fn num_tokens(&self) -> usize {
        tokenizer::num_tokens(self.feature_dim, self.token_dim)
    }
}

/// Per-row random streams: row `(b, i)` of global sample `offset + b` draws
/// from stream `(offset + b) * n + i` of a generator seeded with `seed`.
fn row_streams(seed: u64, sample_offset: usize, batch: usize, num_tokens: usize) -> Vec<ChaCha8Rng> {
    (0..batch * num_tokens)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((sample_offset + r / num_tokens) * num_tokens + r % num_tokens) as u64);
            rng
        })
        .collect()
}

fn draw_rows(streams: &mut [ChaCha8Rng], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((streams.len(), width));
    for (mut row, rng) in out.axis_iter_mut(Axis(0)).zip(streams.iter_mut()) {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }
    out
}

/// Samples all tokens of every condition row in parallel, assembles them and
/// maps them back through `stats` when given.
pub fn generate_feature<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    conditions: ArrayView2<f64>,
    layout: FeatureLayout,
    stats: Option<&FeatureStats>,
    config: &SamplerConfig,
    sample_offset: usize,
) -> Result<Array2<f64>> {
    config.validate()?;
    ensure!(
        predictor.token_dim() == layout.token_dim,
        "predictor emits tokens of dimension {}, layout expects {}",
        predictor.token_dim(),
        layout.token_dim
    );
    let view = schedule.respace(config.steps)?;
    let batch = conditions.nrows();
    let n = layout.num_tokens();
    let positions: Vec<usize> = (0..batch * n).map(|r| r % n).collect();
    let samples: Vec<usize> = (0..batch * n).map(|r| r / n).collect();
    let ctx = RowContext { positions: &positions, samples: &samples, conditions };

    let mut streams = row_streams(config.seed, sample_offset, batch, n);
    let mut x = draw_rows(&mut streams, layout.token_dim);
    for k in (0..view.len()).rev() {
        let noise = (k > 0 && config.variance == VarianceMode::Posterior)
            .then(|| draw_rows(&mut streams, layout.token_dim));
        x = reverse_step(predictor, &view, x.view(), view.step(k), &ctx, config, noise.as_ref().map(|a| a.view()))?;
    }
    let tokens = Array3::from_shape_vec((batch, n, layout.token_dim), x.into_raw_vec_and_offset().0)
        .expect("row count is batch * n");
    let features = tokenizer::assemble(tokens.view(), layout.feature_dim)?;
    match stats {
        Some(stats) => stats.invert(features.view()),
        None => Ok(features),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    pub probabilities: Array2<f64>,
}

/// Argmax of the frozen classifier, with softmax probabilities.
pub fn classify(classifier: &LinearClassifier, features: ArrayView2<f64>) -> Result<Classification> {
    let logits = classifier.logits(features)?;
    let probabilities = softmax(logits.view());
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    Ok(Classification { labels, probabilities })
}
