//! Conditional noise-prediction head `eps(y_m, m, id, c)`.
//!
//! The default body is a stack of residual blocks with adaptive layer
//! normalization: every block normalizes its input, modulates it with a
//! shift/scale derived from the conditioning vector, applies
//! linear-SiLU-linear and adds the result back through a learned gate. The
//! conditioning vector is the sum of a timestep embedding, a learned
//! position embedding and the projected student feature (or the learned null
//! embedding for the unconditional branch of classifier-free guidance).

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::nn::{self, layer_norm, layer_norm_backward, silu_array, silu_backward, Linear, Params};

pub const HEAD_VERSION: u32 = 1;
const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArchitecture {
    /// Residual blocks with adaptive layer normalization.
    #[default]
    Residual,
    /// Three plain linear layers with the condition added after the first.
    Flat,
}

impl fmt::Display for HeadArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadArchitecture::Residual => "residual",
            HeadArchitecture::Flat => "flat",
        })
    }
}

impl FromStr for HeadArchitecture {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(HeadArchitecture::Residual),
            "flat" => Ok(HeadArchitecture::Flat),
            other => Err(GenddError::Config(format!("unknown head architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub token_dim: usize,
    pub cond_dim: usize,
    pub num_positions: usize,
    pub hidden_width: usize,
    pub num_blocks: usize,
    /// Width of the sinusoidal timestep features (even).
    pub freq_dim: usize,
    pub architecture: HeadArchitecture,
}

impl HeadConfig {
    pub fn new(token_dim: usize, cond_dim: usize, num_positions: usize, hidden_width: usize) -> Self {
        HeadConfig {
            token_dim,
            cond_dim,
            num_positions,
            hidden_width,
            num_blocks: 3,
            freq_dim: 64,
            architecture: HeadArchitecture::Residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.token_dim >= 1, "token_dim must be positive");
        ensure!(self.cond_dim >= 1, "cond_dim must be positive");
        ensure!(self.num_positions >= 1, "num_positions must be positive");
        ensure!(self.hidden_width >= 1, "hidden_width must be positive");
        ensure!(self.num_blocks >= 1, "num_blocks must be positive");
        ensure!(
            self.freq_dim >= 2 && self.freq_dim % 2 == 0,
            "freq_dim must be even and >= 2, got {}",
            self.freq_dim
        );
        Ok(())
    }
}

/// Interleaved `(sin, cos)` features over geometrically spaced frequencies.
pub fn timestep_embedding(m: usize, dim: usize) -> Result<Vec<f64>> {
    ensure!(dim >= 2 && dim % 2 == 0, "timestep embedding dimension must be even, got {dim}");
    let mut out = vec![0.0; dim];
    fill_timestep_embedding(m as f64, &mut out);
    Ok(out)
}

fn fill_timestep_embedding(m: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (sin, cos) = (m * freq).sin_cos();
        out[2 * k] = sin;
        out[2 * k + 1] = cos;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    /// Condition to `(shift, scale, gate)`.
    pub modulation: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadBody {
    Residual { blocks: Vec<ResBlock>, final_modulation: Linear },
    Flat { hidden: Linear },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub input_proj: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub cond_proj: Linear,
    /// `num_positions x hidden`.
    pub position: Array2<f64>,
    pub null_condition: Array1<f64>,
    pub body: HeadBody,
    pub output_proj: Linear,
}

impl Params for HeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let linear = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &[f64])| {
            l.visit(&mut |part, t| f(&format!("{name}.{part}"), t));
        };
        linear("input_proj", &self.input_proj, f);
        linear("time_in", &self.time_in, f);
        linear("time_out", &self.time_out, f);
        linear("cond_proj", &self.cond_proj, f);
        f("position", self.position.as_slice().expect("standard layout"));
        f("null_condition", self.null_condition.as_slice().expect("standard layout"));
        match &self.body {
            HeadBody::Residual { blocks, final_modulation } => {
                for (i, b) in blocks.iter().enumerate() {
                    linear(&format!("blocks.{i}.modulation"), &b.modulation, f);
                    linear(&format!("blocks.{i}.fc1"), &b.fc1, f);
                    linear(&format!("blocks.{i}.fc2"), &b.fc2, f);
                }
                linear("final_modulation", final_modulation, f);
            }
            HeadBody::Flat { hidden } => linear("hidden", hidden, f),
        }
        linear("output_proj", &self.output_proj, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let linear = |name: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut [f64])| {
            l.visit_mut(&mut |part, t| f(&format!("{name}.{part}"), t));
        };
        linear("input_proj", &mut self.input_proj, f);
        linear("time_in", &mut self.time_in, f);
        linear("time_out", &mut self.time_out, f);
        linear("cond_proj", &mut self.cond_proj, f);
        f("position", self.position.as_slice_mut().expect("standard layout"));
        f("null_condition", self.null_condition.as_slice_mut().expect("standard layout"));
        match &mut self.body {
            HeadBody::Residual { blocks, final_modulation } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    linear(&format!("blocks.{i}.modulation"), &mut b.modulation, f);
                    linear(&format!("blocks.{i}.fc1"), &mut b.fc1, f);
                    linear(&format!("blocks.{i}.fc2"), &mut b.fc2, f);
                }
                linear("final_modulation", final_modulation, f);
            }
            HeadBody::Flat { hidden } => linear("hidden", hidden, f),
        }
        linear("output_proj", &mut self.output_proj, f);
    }
}

impl HeadParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// Rows to denoise plus everything needed to condition them.
#[derive(Debug, Clone, Copy)]
pub struct HeadInput<'a> {
    /// `R x d_tok` noisy tokens.
    pub tokens: ArrayView2<'a, f64>,
    pub steps: &'a [usize],
    pub positions: &'a [usize],
    /// Row to condition-row mapping.
    pub samples: &'a [usize],
    /// `B x d_s` student features.
    pub conditions: ArrayView2<'a, f64>,
    /// Rows routed to the learned null condition.
    pub null_mask: &'a [bool],
}

impl HeadInput<'_> {
    pub fn rows(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Anything that predicts the noise of a batch of token rows.
pub trait NoisePredictor {
    fn token_dim(&self) -> usize;
    fn predict_eps(&self, input: &HeadInput<'_>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserHead {
    pub version: u32,
    pub config: HeadConfig,
    pub params: HeadParams,
}

struct BlockCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    modulation: Array2<f64>,
    modulated: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    update: Array2<f64>,
}

enum BodyCache {
    Residual {
        blocks: Vec<BlockCache>,
        final_normed: Array2<f64>,
        final_inv_std: Array1<f64>,
        final_modulation: Array2<f64>,
        final_modulated: Array2<f64>,
        cond_act: Array2<f64>,
    },
    Flat {
        pre1: Array2<f64>,
        act1: Array2<f64>,
        pre2: Array2<f64>,
        act2: Array2<f64>,
    },
}

/// Intermediate values retained for the backward pass.
pub struct HeadCache {
    tokens: Array2<f64>,
    time_freq: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    conditions: Array2<f64>,
    cond: Array2<f64>,
    samples: Vec<usize>,
    positions: Vec<usize>,
    null_mask: Vec<bool>,
    body: BodyCache,
}

impl DenoiserHead {
    /// Deterministic initialization; the output projection starts at zero so
    /// a fresh head predicts zero noise everywhere.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_width;
        let input_proj = Linear::xavier(config.token_dim, h, &mut rng);
        let time_in = Linear::xavier(config.freq_dim, h, &mut rng);
        let time_out = Linear::xavier(h, h, &mut rng);
        let cond_proj = Linear::xavier(config.cond_dim, h, &mut rng);
        let position = Array2::from_shape_simple_fn((config.num_positions, h), || {
            EMBEDDING_INIT_STD * { let z: f64 = StandardNormal.sample(&mut rng); z }
        });
        let null_condition = Array1::from_shape_simple_fn(h, || {
            EMBEDDING_INIT_STD * { let z: f64 = StandardNormal.sample(&mut rng); z }
        });
        let body = match config.architecture {
            HeadArchitecture::Residual => HeadBody::Residual {
                blocks: (0..config.num_blocks)
                    .map(|_| ResBlock {
                        modulation: Linear::xavier(h, 3 * h, &mut rng),
                        fc1: Linear::xavier(h, h, &mut rng),
                        fc2: Linear::xavier(h, h, &mut rng),
                    })
                    .collect(),
                final_modulation: Linear::xavier(h, 2 * h, &mut rng),
            },
            HeadArchitecture::Flat => HeadBody::Flat { hidden: Linear::xavier(h, h, &mut rng) },
        };
        let output_proj = Linear::zeros(h, config.token_dim);
        Ok(DenoiserHead {
            version: HEAD_VERSION,
            config,
            params: HeadParams {
                input_proj,
                time_in,
                time_out,
                cond_proj,
                position,
                null_condition,
                body,
                output_proj,
            },
        })
    }

    fn validate_input(&self, input: &HeadInput<'_>) -> Result<()> {
        let r = input.rows();
        let cfg = &self.config;
        ensure!(
            input.tokens.ncols() == cfg.token_dim,
            "tokens have dimension {}, head expects {}",
            input.tokens.ncols(),
            cfg.token_dim
        );
        ensure!(
            input.steps.len() == r
                && input.positions.len() == r
                && input.samples.len() == r
                && input.null_mask.len() == r,
            "per-row metadata must have {r} entries"
        );
        ensure!(
            input.conditions.ncols() == cfg.cond_dim,
            "conditions have dimension {}, head expects {}",
            input.conditions.ncols(),
            cfg.cond_dim
        );
        if let Some(&id) = input.positions.iter().find(|&&id| id >= cfg.num_positions) {
            return Err(GenddError::Validation(format!(
                "position id {id} out of range for {} positions",
                cfg.num_positions
            )));
        }
        for (&b, &null) in input.samples.iter().zip(input.null_mask) {
            ensure!(
                null || b < input.conditions.nrows(),
                "condition row {b} out of range for {} conditions",
                input.conditions.nrows()
            );
        }
        Ok(())
    }

    pub fn predict(&self, input: &HeadInput<'_>) -> Result<Array2<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// Forward pass retaining the intermediates needed by [`Self::backward`].
    pub fn forward(&self, input: &HeadInput<'_>) -> Result<(Array2<f64>, HeadCache)> {
        self.validate_input(input)?;
        let p = &self.params;
        let rows = input.rows();
        let h = self.config.hidden_width;

        let mut time_freq = Array2::zeros((rows, self.config.freq_dim));
        for (mut row, &m) in time_freq.axis_iter_mut(Axis(0)).zip(input.steps) {
            fill_timestep_embedding(m as f64, row.as_slice_mut().expect("standard layout"));
        }
        let time_pre = p.time_in.forward(time_freq.view());
        let time_act = silu_array(&time_pre);
        let mut cond = p.time_out.forward(time_act.view());

        let projected = p.cond_proj.forward(input.conditions);
        for r in 0..rows {
            let mut row = cond.row_mut(r);
            row += &p.position.row(input.positions[r]);
            if input.null_mask[r] {
                row += &p.null_condition;
            } else {
                row += &projected.row(input.samples[r]);
            }
        }

        let tokens = input.tokens.to_owned();
        let mut hidden = p.input_proj.forward(tokens.view());
        let (out, body) = match &p.body {
            HeadBody::Residual { blocks, final_modulation } => {
                let cond_act = silu_array(&cond);
                let mut caches = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let modulation = block.modulation.forward(cond_act.view());
                    let (normed, inv_std) = layer_norm(hidden.view());
                    let modulated = modulate(&normed, &modulation, h);
                    let pre_act = block.fc1.forward(modulated.view());
                    let act = silu_array(&pre_act);
                    let update = block.fc2.forward(act.view());
                    let gate = modulation.slice(s![.., 2 * h..3 * h]);
                    hidden += &(&update * &gate);
                    caches.push(BlockCache { normed, inv_std, modulation, modulated, pre_act, act, update });
                }
                let fmod = final_modulation.forward(cond_act.view());
                let (final_normed, final_inv_std) = layer_norm(hidden.view());
                let final_modulated = modulate(&final_normed, &fmod, h);
                let out = p.output_proj.forward(final_modulated.view());
                (
                    out,
                    BodyCache::Residual {
                        blocks: caches,
                        final_normed,
                        final_inv_std,
                        final_modulation: fmod,
                        final_modulated,
                        cond_act,
                    },
                )
            }
            HeadBody::Flat { hidden: layer } => {
                let pre1 = hidden + &cond;
                let act1 = silu_array(&pre1);
                let pre2 = layer.forward(act1.view());
                let act2 = silu_array(&pre2);
                let out = p.output_proj.forward(act2.view());
                (out, BodyCache::Flat { pre1, act1, pre2, act2 })
            }
        };
        Ok((
            out,
            HeadCache {
                tokens,
                time_freq,
                time_pre,
                time_act,
                conditions: input.conditions.to_owned(),
                cond,
                samples: input.samples.to_vec(),
                positions: input.positions.to_vec(),
                null_mask: input.null_mask.to_vec(),
                body,
            },
        ))
    }

    /// Gradients of `sum(d_out * output)` with respect to every parameter and
    /// to the condition rows.
    pub fn backward(&self, cache: &HeadCache, d_out: ArrayView2<f64>) -> (HeadParams, Array2<f64>) {
        let p = &self.params;
        let h = self.config.hidden_width;
        let mut grads = p.zeros_like();

        let (d_hidden, d_cond) = match (&p.body, &cache.body, &mut grads.body) {
            (
                HeadBody::Residual { blocks, final_modulation },
                BodyCache::Residual {
                    blocks: caches,
                    final_normed,
                    final_inv_std,
                    final_modulation: fmod,
                    final_modulated,
                    cond_act,
                },
                HeadBody::Residual { blocks: gblocks, final_modulation: gfinal },
            ) => {
                let d_mod_in = p.output_proj.backward(final_modulated.view(), d_out, &mut grads.output_proj);
                let (d_normed, d_fmod) = modulate_backward(final_normed, fmod, d_mod_in.view(), h, false);
                let mut d_cond_act = final_modulation.backward(cond_act.view(), d_fmod.view(), gfinal);
                let mut d_hidden = layer_norm_backward(final_normed, final_inv_std, d_normed.view());

                for ((block, bc), gb) in blocks.iter().zip(caches).zip(gblocks.iter_mut()).rev() {
                    let gate = bc.modulation.slice(s![.., 2 * h..3 * h]);
                    let d_update = &d_hidden * &gate;
                    let d_gate = &d_hidden * &bc.update;
                    let d_act = block.fc2.backward(bc.act.view(), d_update.view(), &mut gb.fc2);
                    let d_pre = silu_backward(&bc.pre_act, d_act.view());
                    let d_modulated = block.fc1.backward(bc.modulated.view(), d_pre.view(), &mut gb.fc1);
                    let (d_normed, mut d_mod) =
                        modulate_backward(&bc.normed, &bc.modulation, d_modulated.view(), h, true);
                    d_mod.slice_mut(s![.., 2 * h..3 * h]).assign(&d_gate);
                    d_cond_act += &block.modulation.backward(cond_act.view(), d_mod.view(), &mut gb.modulation);
                    d_hidden += &layer_norm_backward(&bc.normed, &bc.inv_std, d_normed.view());
                }
                let d_cond = silu_backward(&cache.cond, d_cond_act.view());
                (d_hidden, d_cond)
            }
            (
                HeadBody::Flat { hidden },
                BodyCache::Flat { pre1, act1, pre2, act2 },
                HeadBody::Flat { hidden: ghidden },
            ) => {
                let d_act2 = p.output_proj.backward(act2.view(), d_out, &mut grads.output_proj);
                let d_pre2 = silu_backward(pre2, d_act2.view());
                let d_act1 = hidden.backward(act1.view(), d_pre2.view(), ghidden);
                let d_pre1 = silu_backward(pre1, d_act1.view());
                (d_pre1.clone(), d_pre1)
            }
            _ => unreachable!("cache and parameters come from the same head"),
        };

        p.input_proj.backward_params(cache.tokens.view(), d_hidden.view(), &mut grads.input_proj);

        let d_time_act = p.time_out.backward(cache.time_act.view(), d_cond.view(), &mut grads.time_out);
        let d_time_pre = silu_backward(&cache.time_pre, d_time_act.view());
        p.time_in.backward_params(cache.time_freq.view(), d_time_pre.view(), &mut grads.time_in);

        let mut d_projected = Array2::<f64>::zeros((cache.conditions.nrows(), h));
        for r in 0..d_cond.nrows() {
            let row = d_cond.row(r);
            let mut pos = grads.position.row_mut(cache.positions[r]);
            pos += &row;
            if cache.null_mask[r] {
                grads.null_condition += &row;
            } else {
                let mut target = d_projected.row_mut(cache.samples[r]);
                target += &row;
            }
        }
        let d_conditions = p.cond_proj.backward(cache.conditions.view(), d_projected.view(), &mut grads.cond_proj);
        (grads, d_conditions)
    }
}

/// `normed * (1 + scale) + shift` with `(shift, scale)` taken from the first
/// two `width`-wide slices of `modulation`.
fn modulate(normed: &Array2<f64>, modulation: &Array2<f64>, width: usize) -> Array2<f64> {
    let shift = modulation.slice(s![.., 0..width]);
    let scale = modulation.slice(s![.., width..2 * width]);
    let mut out = normed * &scale.mapv(|v| 1.0 + v);
    out += &shift;
    out
}

/// Returns `(d_normed, d_modulation)`; the gate slice is left at zero when
/// `with_gate` is set so the caller can fill it.
fn modulate_backward(
    normed: &Array2<f64>,
    modulation: &Array2<f64>,
    d_out: ArrayView2<f64>,
    width: usize,
    with_gate: bool,
) -> (Array2<f64>, Array2<f64>) {
    let scale = modulation.slice(s![.., width..2 * width]);
    let d_normed = &d_out * &scale.mapv(|v| 1.0 + v);
    let d_scale = &d_out * normed;
    let mut parts = vec![d_out.to_owned(), d_scale];
    if with_gate {
        parts.push(Array2::zeros(d_out.dim()));
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    let d_mod = concatenate(Axis(1), &views).expect("matching row counts");
    (d_normed, d_mod)
}

impl NoisePredictor for DenoiserHead {
    fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    fn predict_eps(&self, input: &HeadInput<'_>) -> Result<Array2<f64>> {
        self.predict(input)
    }
}

/// Returns `true` when every parameter of the head is finite.
pub fn head_is_finite(head: &DenoiserHead) -> bool {
    nn::Params::all_finite(&head.params)
}
