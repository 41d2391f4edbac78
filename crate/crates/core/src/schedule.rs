//! Forward-diffusion variance schedules and respaced sampling views.
//!
//! Steps are 1-based: `beta(m)` and `alpha(m)` are defined for `1..=M`, and
//! `alpha_bar(m)` for `0..=M` with `alpha_bar(0) == 1`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};

/// Upper clip applied to every beta of the cosine construction.
pub const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Built from caller-provided betas; cannot be rebuilt from `(kind, M)`.
    Custom,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Custom => "custom",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(GenddError::Config(format!("unsupported schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a named schedule with `max_step` diffusion steps.
    pub fn build(kind: ScheduleKind, max_step: usize) -> Result<Self> {
        ensure!(max_step >= 1, "max diffusion step must be >= 1, got {max_step}");
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(max_step),
            ScheduleKind::Cosine => cosine_betas(max_step),
            ScheduleKind::Custom => {
                return Err(GenddError::Config(
                    "custom schedules must be built with NoiseSchedule::from_betas".into(),
                ))
            }
        };
        let schedule = Self::assemble(kind, betas);
        debug_assert!(schedule.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        Ok(schedule)
    }

    /// Builds a schedule from explicit betas for steps `1..=betas.len()`.
    ///
    /// Zero betas are accepted so that degenerate identity schedules can be
    /// expressed; named schedules always have betas strictly inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), "schedule needs at least one step");
        for (i, &b) in betas.iter().enumerate() {
            ensure!(
                b.is_finite() && (0.0..1.0).contains(&b),
                "beta at step {} must lie in [0, 1), got {b}",
                i + 1
            );
        }
        Ok(Self::assemble(ScheduleKind::Custom, betas))
    }

    fn assemble(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule { kind, betas, alphas, alpha_bars }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn max_step(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, m: usize) -> f64 {
        self.betas[m - 1]
    }

    pub fn alpha(&self, m: usize) -> f64 {
        self.alphas[m - 1]
    }

    pub fn alpha_bar(&self, m: usize) -> f64 {
        self.alpha_bars[m]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, indexed `0..=M`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, m: usize) -> Result<()> {
        ensure!(
            (1..=self.max_step()).contains(&m),
            "step {m} outside [1, {}]",
            self.max_step()
        );
        Ok(())
    }

    /// `sqrt(alpha_bar[m]) * x0 + sqrt(1 - alpha_bar[m]) * eps`.
    pub fn forward_noise(&self, x0: &[f64], m: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(m)?;
        ensure!(
            x0.len() == eps.len(),
            "x0 has {} entries but eps has {}",
            x0.len(),
            eps.len()
        );
        let (sa, sn) = self.noise_coefficients(m);
        Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
    }

    /// Row-wise forward noising with one step per row.
    pub fn forward_noise_rows(
        &self,
        x0: ArrayView2<f64>,
        steps: &[usize],
        eps: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        ensure!(x0.dim() == eps.dim(), "x0 shape {:?} != eps shape {:?}", x0.dim(), eps.dim());
        ensure!(steps.len() == x0.nrows(), "{} steps for {} rows", steps.len(), x0.nrows());
        for &m in steps {
            self.check_step(m)?;
        }
        let mut out = Array2::zeros(x0.dim());
        for (r, &m) in steps.iter().enumerate() {
            let (sa, sn) = self.noise_coefficients(m);
            Zip::from(out.row_mut(r))
                .and(x0.row(r))
                .and(eps.row(r))
                .for_each(|o, &x, &e| *o = sa * x + sn * e);
        }
        Ok(out)
    }

    /// `(sqrt(alpha_bar[m]), sqrt(1 - alpha_bar[m]))`.
    pub fn noise_coefficients(&self, m: usize) -> (f64, f64) {
        let ab = self.alpha_bars[m];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Uniform-stride view over `num_steps` of the base steps, always ending at M.
    pub fn respace(&self, num_steps: usize) -> Result<RespacedSchedule> {
        let max = self.max_step();
        ensure!(
            (1..=max).contains(&num_steps),
            "respaced step count {num_steps} outside [1, {max}]"
        );
        let steps: Vec<usize> = (1..=num_steps)
            .map(|k| (2 * k * max + num_steps) / (2 * num_steps))
            .collect();
        Ok(RespacedSchedule::from_steps(self.clone(), steps))
    }
}

fn linear_betas(max_step: usize) -> Vec<f64> {
    // Endpoints rescaled so that any M reproduces the 1000-step DDPM range.
    let scale = 1000.0 / max_step as f64;
    let start = scale * 1e-4;
    let end = scale * 0.02;
    if max_step == 1 {
        return vec![start.min(MAX_BETA)];
    }
    (0..max_step)
        .map(|i| {
            let b = start + (end - start) * i as f64 / (max_step - 1) as f64;
            b.min(MAX_BETA)
        })
        .collect()
}

fn cosine_betas(max_step: usize) -> Vec<f64> {
    let f = |t: f64| {
        let phase = (t / max_step as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        phase.cos().powi(2)
    };
    (0..max_step)
        .map(|i| {
            let b = 1.0 - f((i + 1) as f64) / f(i as f64);
            b.min(MAX_BETA)
        })
        .collect()
}

/// Subsequence of base steps with recomputed per-transition coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    steps: Vec<usize>,
    alpha_bars: Vec<f64>,
    prev_alpha_bars: Vec<f64>,
}

impl RespacedSchedule {
    fn from_steps(base: NoiseSchedule, steps: Vec<usize>) -> Self {
        let alpha_bars: Vec<f64> = steps.iter().map(|&m| base.alpha_bar(m)).collect();
        let prev_alpha_bars = std::iter::once(1.0)
            .chain(alpha_bars.iter().copied())
            .take(steps.len())
            .collect();
        RespacedSchedule { base, steps, alpha_bars, prev_alpha_bars }
    }

    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Base step of the k-th kept position (0-based).
    pub fn step(&self, k: usize) -> usize {
        self.steps[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Cumulative alpha of the preceding kept step, 1 before the first.
    pub fn prev_alpha_bar(&self, k: usize) -> f64 {
        self.prev_alpha_bars[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha_bars[k] / self.prev_alpha_bars[k]
    }

    pub fn beta(&self, k: usize) -> f64 {
        1.0 - self.alpha(k)
    }

    /// Variance of q(x_prev | x_k, x_0) over the respaced transition.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        let ab = self.alpha_bars[k];
        if ab >= 1.0 {
            return 0.0;
        }
        (1.0 - self.prev_alpha_bars[k]) / (1.0 - ab) * self.beta(k)
    }

    /// Position of a base step within the view.
    pub fn position_of(&self, m: usize) -> Option<usize> {
        self.steps.binary_search(&m).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cosine_thousand_steps_is_valid() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        for m in 1..=1000 {
            assert!(s.alpha_bar(m) < s.alpha_bar(m - 1));
            let rel = (s.alpha_bar(m) - s.alpha_bar(m - 1) * s.alpha(m)).abs();
            assert!(rel <= 1e-12);
        }
    }

    #[test]
    fn linear_single_step() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1).unwrap();
        let b = s.beta(1);
        assert_eq!(s.alpha_bar(1), 1.0 - b);
    }

    #[test]
    fn linear_thousand_steps_matches_ddpm_endpoints() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn cosine_ten_steps_matches_direct_product() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        for m in 1..=10 {
            let direct: f64 = s.betas()[..m].iter().map(|b| 1.0 - b).product();
            assert!((direct - s.alpha_bar(m)).abs() <= 1e-12 * direct.max(1e-300));
        }
    }

    #[test]
    fn zero_steps_and_custom_kind_rejected() {
        assert!(matches!(
            NoiseSchedule::build(ScheduleKind::Cosine, 0),
            Err(GenddError::Validation(_))
        ));
        assert!(matches!(
            NoiseSchedule::build(ScheduleKind::Custom, 10),
            Err(GenddError::Config(_))
        ));
        assert!(matches!("sigmoid".parse::<ScheduleKind>(), Err(GenddError::Config(_))));
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let x0 = [1.0, -2.0, 0.5];
        let out = s.forward_noise(&x0, 40, &[0.0; 3]).unwrap();
        let sa = s.alpha_bar(40).sqrt();
        for (o, x) in out.iter().zip(x0) {
            assert_eq!(*o, sa * x);
        }
        let identity = NoiseSchedule::from_betas(vec![0.0; 5]).unwrap();
        assert_eq!(identity.forward_noise(&x0, 3, &[0.7, 0.1, -4.0]).unwrap(), x0.to_vec());

        assert!(s.forward_noise(&x0, 0, &[0.0; 3]).is_err());
        assert!(s.forward_noise(&x0, 101, &[0.0; 3]).is_err());
        assert!(s.forward_noise(&x0, 5, &[0.0; 2]).is_err());
    }

    #[test]
    fn forward_noise_is_homogeneous() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let x0 = [0.3, -1.2];
        let eps = [1.5, 0.25];
        let a = 2.5;
        let scaled = s
            .forward_noise(&[a * x0[0], a * x0[1]], 17, &[a * eps[0], a * eps[1]])
            .unwrap();
        let base = s.forward_noise(&x0, 17, &eps).unwrap();
        for (l, r) in scaled.iter().zip(&base) {
            assert!((l - a * r).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_monte_carlo_moments() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = 100_000;
        let mut sum = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        for _ in 0..n {
            let eps: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = s.forward_noise(&x0, 500, &eps).unwrap();
            for j in 0..4 {
                sum[j] += y[j];
                sq[j] += y[j] * y[j];
            }
        }
        let ab = s.alpha_bar(500);
        for j in 0..4 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let se = ((1.0 - ab) / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[j]).abs() < 4.0 * se);
            assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn respace_full_is_identity() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        let r = s.respace(1000).unwrap();
        assert_eq!(r.steps(), (1..=1000).collect::<Vec<_>>().as_slice());
        for k in 0..1000 {
            assert_eq!(r.alpha_bar(k), s.alpha_bar(k + 1));
            assert!((r.beta(k) - s.beta(k + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn respace_sixty_four_steps() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        let r = s.respace(64).unwrap();
        assert_eq!(r.len(), 64);
        assert_eq!(*r.steps().last().unwrap(), 1000);
        assert!(r.steps().windows(2).all(|w| w[0] < w[1]));
        assert!(r.steps()[0] >= 1);
    }

    #[test]
    fn respace_keeps_base_alpha_bar() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        let r = s.respace(2).unwrap();
        assert_eq!(r.steps(), &[5, 10]);
        assert_eq!(r.alpha_bar(0), s.alpha_bar(5));
        assert_eq!(r.alpha_bar(1), s.alpha_bar(10));
        assert_eq!(r.prev_alpha_bar(0), 1.0);
        assert_eq!(r.position_of(10), Some(1));
        assert_eq!(r.position_of(7), None);
        assert!(s.respace(0).is_err());
        assert!(s.respace(11).is_err());
    }

    proptest::proptest! {
        #[test]
        fn respaced_views_are_exact_lookups(max in 1usize..400, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::build(ScheduleKind::Cosine, max).unwrap();
            let count = 1 + ((max - 1) as f64 * frac) as usize;
            let r = s.respace(count).unwrap();
            proptest::prop_assert_eq!(r.len(), count);
            proptest::prop_assert_eq!(*r.steps().last().unwrap(), max);
            proptest::prop_assert!(r.steps().windows(2).all(|w| w[0] < w[1]));
            for k in 0..count {
                proptest::prop_assert_eq!(r.alpha_bar(k), s.alpha_bar(r.step(k)));
            }
        }
    }
}
