//! Closed-form gradients of the single-step GenDD loss and the cross-entropy
//! loss, and the surrogate check relating them.
//!
//! With `a = 2 ab / (1 - ab)` the GenDD gradient at the single-step estimate
//! `x'` is `g1 = a (x' - x0) + (1 - lambda) a (x0 - c_y)`. The multi-task
//! reference replaces the contraction term by the cross-entropy direction:
//! `g2 = gamma0 a (x' - x0) + gamma1 (x'' - c_y)` with `x'' = sum_i p_i W_i`,
//! `gamma0 = 1` and `gamma1 = (1 - lambda) a`. Hence `g1 - g2 = gamma1 (x0 - x'')`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::softmax_row;
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const RESIDUAL_THRESHOLD: f64 = 0.05;
pub const COSINE_THRESHOLD: f64 = 0.999;
pub const HIGH_CONFIDENCE: f64 = 0.99;
pub const MAX_RELATIVE_PERTURBATION: f64 = 0.01;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `2 ab / (1 - ab)`.
pub fn gendd_coefficient(alpha_bar: f64) -> f64 {
    2.0 * alpha_bar / (1.0 - alpha_bar)
}

/// `(gamma0, gamma1)` from matching the two gradients term by term.
pub fn surrogate_constants(lambda: f64, alpha_bar: f64) -> (f64, f64) {
    (1.0, (1.0 - lambda) * gendd_coefficient(alpha_bar))
}

/// Recovers `x0` from `x_m` and a noise prediction in one step.
pub fn single_step_x0(x_m: &[f64], m: usize, eps_pred: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    ensure!(m <= schedule.max_step(), "step {m} beyond M = {}", schedule.max_step());
    ensure!(x_m.len() == eps_pred.len(), "x_m has {} entries, eps_pred {}", x_m.len(), eps_pred.len());
    let ab = schedule.alpha_bar(m);
    ensure!(ab > 0.0, "alpha_bar at step {m} is zero; x0 is not recoverable");
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_m.iter().zip(eps_pred).map(|(x, e)| (x - sn * e) / sa).collect())
}

/// Gradient of the single-step GenDD loss with respect to `x'`.
pub fn grad_gendd_closed_form(x0_est: &[f64], x0: &[f64], center: &[f64], lambda: f64, alpha_bar: f64) -> Vec<f64> {
    let a = gendd_coefficient(alpha_bar);
    x0_est
        .iter()
        .zip(x0)
        .zip(center)
        .map(|((xe, x), c)| a * (xe - x) + (1.0 - lambda) * a * (x - c))
        .collect()
}

/// `p(. | x)` under logits `W x` (bias ignored).
pub fn class_probabilities(x: &[f64], weights: ArrayView2<f64>) -> Vec<f64> {
    let logits: Vec<f64> = weights.rows().into_iter().map(|w| dot(w.as_slice().expect("row-major"), x)).collect();
    softmax_row(&logits)
}

/// `sum_i p_i W_i`.
pub fn expected_center(probs: &[f64], weights: ArrayView2<f64>) -> Vec<f64> {
    let p = Array1::from(probs.to_vec());
    p.dot(&weights).to_vec()
}

/// Gradient of `-log softmax(W x)_y` with respect to `x`.
pub fn grad_ce_closed_form(x0_est: &[f64], weights: ArrayView2<f64>, label: usize) -> Vec<f64> {
    let p = class_probabilities(x0_est, weights);
    let mut g = expected_center(&p, weights);
    for (gi, w) in g.iter_mut().zip(weights.row(label)) {
        *gi -= w;
    }
    g
}

/// Multi-task reference gradient `g2`.
pub fn grad_multitask(x0_est: &[f64], x0: &[f64], weights: ArrayView2<f64>, label: usize, lambda: f64, alpha_bar: f64) -> Vec<f64> {
    let a = gendd_coefficient(alpha_bar);
    let (g0, g1) = surrogate_constants(lambda, alpha_bar);
    let p = class_probabilities(x0_est, weights);
    let x2 = expected_center(&p, weights);
    x0_est
        .iter()
        .zip(x0)
        .zip(x2.iter().zip(weights.row(label)))
        .map(|((xe, x), (xx, c))| g0 * a * (xe - x) + g1 * (xx - c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateScenario {
    /// `C x d`; the center of class `y` is `W_y`.
    pub weights: Array2<f64>,
    pub x0: Vec<f64>,
    pub label: usize,
    pub lambda: f64,
    pub step: usize,
    pub schedule_kind: ScheduleKind,
    pub max_step: usize,
    pub noise: Vec<f64>,
    /// Predicted noise; the single-step estimate is derived from it.
    pub eps_pred: Vec<f64>,
}

impl SurrogateScenario {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_kind, self.max_step)
    }

    pub fn contracted_target(&self) -> Vec<f64> {
        self.x0
            .iter()
            .zip(self.weights.row(self.label))
            .map(|(x, c)| self.lambda * x + (1.0 - self.lambda) * c)
            .collect()
    }

    pub fn noisy_state(&self, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        schedule.forward_noise(&self.contracted_target(), self.step, &self.noise)
    }

    pub fn estimate(&self) -> Result<Vec<f64>> {
        let schedule = self.schedule()?;
        let x_m = self.noisy_state(&schedule)?;
        single_step_x0(&x_m, self.step, &self.eps_pred, &schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    /// `|g1 - g2| / |g1|`.
    pub residual: f64,
    pub cosine: f64,
    /// `p(y | x')`.
    pub confidence: f64,
    /// `|x' - x0| / |x0|`.
    pub relative_error: f64,
    /// Set when `g1` vanishes and the ratio is undefined.
    pub degenerate: bool,
}

pub fn surrogate_residual(scenario: &SurrogateScenario) -> Result<SurrogateReport> {
    let d = scenario.x0.len();
    ensure!(scenario.weights.ncols() == d, "weights have {} columns for {d}-dim features", scenario.weights.ncols());
    ensure!(scenario.label < scenario.weights.nrows(), "label {} out of range", scenario.label);
    ensure!((0.0..=1.0).contains(&scenario.lambda), "lambda {} outside [0, 1]", scenario.lambda);
    let schedule = scenario.schedule()?;
    let x_est = scenario.estimate()?;
    let ab = schedule.alpha_bar(scenario.step);
    let center = scenario.weights.row(scenario.label).to_vec();
    let g1 = grad_gendd_closed_form(&x_est, &scenario.x0, &center, scenario.lambda, ab);
    let g2 = grad_multitask(&x_est, &scenario.x0, scenario.weights.view(), scenario.label, scenario.lambda, ab);
    let n1 = norm(&g1);
    let n2 = norm(&g2);
    let diff: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
    let confidence = class_probabilities(&x_est, scenario.weights.view())[scenario.label];
    let dx: Vec<f64> = x_est.iter().zip(&scenario.x0).map(|(a, b)| a - b).collect();
    let relative_error = norm(&dx) / norm(&scenario.x0).max(f64::MIN_POSITIVE);
    let scale = gendd_coefficient(ab) * norm(&scenario.x0).max(1.0);
    let degenerate = n1 <= 1e-14 * scale;
    let (residual, cosine) = if degenerate {
        (f64::NAN, f64::NAN)
    } else {
        (norm(&diff) / n1, dot(&g1, &g2) / (n1 * n2.max(f64::MIN_POSITIVE)))
    };
    Ok(SurrogateReport { residual, cosine, confidence, relative_error, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Lower edges of the confidence buckets.
    pub buckets: Vec<f64>,
    pub scenarios_per_bucket: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub lambda: f64,
    pub max_step: usize,
    pub schedule: ScheduleKind,
    /// Range of `|x' - x0| / |x0|`.
    pub perturbation: (f64, f64),
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            buckets: vec![0.5, 0.9, 0.99, 0.999],
            scenarios_per_bucket: 1000,
            feature_dim: 64,
            num_classes: 10,
            lambda: crate::contraction::DEFAULT_LAMBDA,
            max_step: 1000,
            schedule: ScheduleKind::Cosine,
            perturbation: (0.005, 0.01),
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.buckets.is_empty(), "at least one confidence bucket is required");
        ensure!(
            self.buckets.windows(2).all(|w| w[0] < w[1]) && self.buckets.iter().all(|&b| b > 0.0 && b < 1.0),
            "bucket edges must be strictly increasing inside (0, 1)"
        );
        ensure!(self.scenarios_per_bucket >= 1, "need at least one scenario per bucket");
        ensure!(self.num_classes >= 2 && self.feature_dim >= 2, "need C >= 2 and d >= 2");
        ensure!(self.buckets[0] > 1.0 / self.num_classes as f64, "lowest bucket must exceed chance 1/C");
        ensure!(
            0.0 < self.perturbation.0 && self.perturbation.0 <= self.perturbation.1,
            "perturbation range must be positive and ordered"
        );
        ensure!((0.0..=1.0).contains(&self.lambda), "lambda {} outside [0, 1]", self.lambda);
        Ok(())
    }

    /// `[lo, hi)` of bucket `k`; the last one stops a decade short of 1.
    pub fn bucket_range(&self, k: usize) -> (f64, f64) {
        let lo = self.buckets[k];
        let hi = self.buckets.get(k + 1).copied().unwrap_or(1.0 - (1.0 - lo) / 10.0);
        (lo, hi)
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds one scenario with `x0 = c_y = W_y`, a single-step estimate at the
/// requested relative distance from `x0`, and `W` scaled until
/// `p(y | x')` hits `target`. Returns `None` if the target is unreachable for
/// the drawn geometry.
pub fn generate_scenario(config: &SweepConfig, target: f64, rng: &mut ChaCha8Rng, schedule: &NoiseSchedule) -> Option<SurrogateScenario> {
    let (d, c) = (config.feature_dim, config.num_classes);
    let base = Array2::from_shape_fn((c, d), |_| 0.0);
    let mut base = base;
    for mut row in base.rows_mut() {
        let u = unit_vector(d, rng);
        row.assign(&Array1::from(u));
    }
    let label = rng.random_range(0..c);
    let eta = rng.random_range(config.perturbation.0..=config.perturbation.1);
    let dir = unit_vector(d, rng);
    let probe = |scale: f64| -> (Array2<f64>, Vec<f64>, f64) {
        let w = &base * scale;
        let x0 = w.row(label).to_vec();
        let n0 = norm(&x0);
        let x_est: Vec<f64> = x0.iter().zip(&dir).map(|(x, u)| x + eta * n0 * u).collect();
        let p = class_probabilities(&x_est, w.view())[label];
        (w, x_est, p)
    };
    // p(y | x') is monotone in the scale once y has the largest logit
    let (mut lo, mut hi) = (0.0, 1.0);
    while probe(hi).2 < target {
        hi *= 2.0;
        if hi > 1e6 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if probe(mid).2 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (weights, x_est, _) = probe(hi);
    let x0 = weights.row(label).to_vec();
    let step = rng.random_range(1..=config.max_step);
    let noise: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    let mut scenario = SurrogateScenario {
        weights,
        x0,
        label,
        lambda: config.lambda,
        step,
        schedule_kind: config.schedule,
        max_step: config.max_step,
        noise,
        eps_pred: Vec::new(),
    };
    // the predicted noise that maps x_m to x' in one step
    let x_m = scenario.noisy_state(schedule).ok()?;
    let (sa, sn) = schedule.noise_coefficients(step);
    scenario.eps_pred = x_m.iter().zip(&x_est).map(|(xm, xe)| (xm - sa * xe) / sn).collect();
    Some(scenario)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub confidence_bucket: f64,
    pub upper: f64,
    pub count: usize,
    pub degenerate: usize,
    pub median_residual: f64,
    pub median_cosine: f64,
    pub median_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub buckets: Vec<BucketSummary>,
    /// Scenarios with `p >= 0.99` and `|x' - x0| <= 0.01 |x0|`.
    pub high_confidence_count: usize,
    pub high_confidence_median_residual: f64,
    pub high_confidence_median_cosine: f64,
    pub monotone: bool,
    pub skipped: usize,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.high_confidence_count > 0
            && self.high_confidence_median_residual <= RESIDUAL_THRESHOLD
            && self.high_confidence_median_cosine >= COSINE_THRESHOLD
            && self.monotone
    }
}

pub fn confidence_sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let schedule = NoiseSchedule::build(config.schedule, config.max_step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buckets = Vec::with_capacity(config.buckets.len());
    let (mut hc_res, mut hc_cos) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for k in 0..config.buckets.len() {
        let (lo, hi) = config.bucket_range(k);
        let (mut res, mut cos, mut conf) = (Vec::new(), Vec::new(), Vec::new());
        let mut degenerate = 0;
        let mut attempts = 0;
        while res.len() + degenerate < config.scenarios_per_bucket {
            attempts += 1;
            ensure!(
                attempts <= 20 * config.scenarios_per_bucket,
                "could not reach confidence bucket [{lo}, {hi}) for this geometry"
            );
            let target = rng.random_range(lo..hi);
            let Some(scenario) = generate_scenario(config, target, &mut rng, &schedule) else {
                skipped += 1;
                continue;
            };
            let report = surrogate_residual(&scenario)?;
            if report.degenerate {
                degenerate += 1;
                continue;
            }
            if report.confidence >= HIGH_CONFIDENCE && report.relative_error <= MAX_RELATIVE_PERTURBATION {
                hc_res.push(report.residual);
                hc_cos.push(report.cosine);
            }
            res.push(report.residual);
            cos.push(report.cosine);
            conf.push(report.confidence);
        }
        buckets.push(BucketSummary {
            confidence_bucket: lo,
            upper: hi,
            count: res.len(),
            degenerate,
            median_residual: median(&mut res),
            median_cosine: median(&mut cos),
            median_confidence: median(&mut conf),
        });
    }
    let monotone = buckets.windows(2).all(|w| w[1].median_residual < w[0].median_residual);
    Ok(SweepReport {
        high_confidence_count: hc_res.len(),
        high_confidence_median_residual: median(&mut hc_res),
        high_confidence_median_cosine: median(&mut hc_cos),
        buckets,
        monotone,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap()
    }

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(b).max(1e-300)
    }

    #[test]
    fn single_step_inverts_forward_noise() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_vec(8, &mut rng);
        let eps = random_vec(8, &mut rng);
        for m in [1, 250, 500, 999] {
            let xm = s.forward_noise(&x0, m, &eps).unwrap();
            let back = single_step_x0(&xm, m, &eps, &s).unwrap();
            assert!(rel_err(&back, &x0) < 1e-10, "m={m}");
            // two-term expansion: x0 + sqrt(1 - ab)/sqrt(ab) * (eps - eps')
            let eps_pred = random_vec(8, &mut rng);
            let est = single_step_x0(&xm, m, &eps_pred, &s).unwrap();
            let ab = s.alpha_bar(m);
            let k = ((1.0 - ab) / ab).sqrt();
            for j in 0..8 {
                assert!((est[j] - (x0[j] + k * (eps[j] - eps_pred[j]))).abs() < 1e-9 * (1.0 + est[j].abs()));
            }
        }
        assert_eq!(single_step_x0(&[1.5, -2.0], 0, &[9.0, 9.0], &s).unwrap(), vec![1.5, -2.0]);
        let zero = NoiseSchedule::from_betas(vec![0.5, 0.0]).unwrap();
        assert!(single_step_x0(&[1.0], 1, &[0.0; 2], &zero).is_err());
    }

    #[test]
    fn closed_forms_hand_cases() {
        let g = grad_gendd_closed_form(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 0.3, 0.5);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = grad_gendd_closed_form(&[3.0, 0.0], &[1.0, 0.0], &[7.0, 7.0], 1.0, 0.5);
        assert_eq!(g, vec![4.0, 0.0]);
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let g = grad_ce_closed_form(&[0.0, 0.0], w.view(), 0);
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        let w = array![[50.0, 0.0], [0.0, 1.0]];
        let g = grad_ce_closed_form(&[30.0, 0.0], w.view(), 0);
        assert!(norm(&g) < 1e-300);
        assert_eq!(surrogate_constants(0.9, 0.5).0, 1.0);
        assert!((surrogate_constants(0.9, 0.5).1 - 0.2).abs() < 1e-15);
    }

    #[test]
    fn coefficient_identity_holds_symbolically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = 6;
            let c = 4;
            let w = Array2::from_shape_simple_fn((c, d), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let y = rng.random_range(0..c);
            let x0 = random_vec(d, &mut rng);
            let xe = random_vec(d, &mut rng);
            let lambda = rng.random_range(0.0..1.0);
            let ab = rng.random_range(0.01..0.99);
            let g1 = grad_gendd_closed_form(&xe, &x0, w.row(y).as_slice().unwrap(), lambda, ab);
            let g2 = grad_multitask(&xe, &x0, w.view(), y, lambda, ab);
            let x2 = expected_center(&class_probabilities(&xe, w.view()), w.view());
            let (_, gamma1) = surrogate_constants(lambda, ab);
            for j in 0..d {
                let expect = gamma1 * (x0[j] - x2[j]);
                assert!((g1[j] - g2[j] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
            }
            // replacing x'' by x0 removes the difference entirely
            let a = gendd_coefficient(ab);
            for j in 0..d {
                let g2_exact = a * (xe[j] - x0[j]) + gamma1 * (x0[j] - w[[y, j]]);
                assert!((g1[j] - g2_exact).abs() < 1e-9 * (1.0 + g1[j].abs()));
            }
        }
    }

    #[test]
    fn exact_regime_and_unsupervised_case() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SweepConfig { lambda: 0.9, ..Default::default() };
        // saturated confidence with x0 = c_y
        let mut sc = generate_scenario(&cfg, 0.5, &mut rng, &s).unwrap();
        sc.weights *= 40.0;
        sc.x0 = sc.weights.row(sc.label).to_vec();
        let xe: Vec<f64> = sc.x0.iter().enumerate().map(|(j, x)| x * (1.0 + 0.01 * ((j % 3) as f64 - 1.0))).collect();
        let x_m = sc.noisy_state(&s).unwrap();
        let (sa, sn) = s.noise_coefficients(sc.step);
        sc.eps_pred = x_m.iter().zip(&xe).map(|(xm, x)| (xm - sa * x) / sn).collect();
        let r = surrogate_residual(&sc).unwrap();
        assert!(r.confidence > 1.0 - 1e-12);
        assert!(r.residual <= 1e-6, "{r:?}");

        let mut unsup = sc.clone();
        unsup.lambda = 1.0;
        let x_m = unsup.noisy_state(&s).unwrap();
        unsup.eps_pred = x_m.iter().zip(&xe).map(|(xm, x)| (xm - sa * x) / sn).collect();
        assert_eq!(surrogate_residual(&unsup).unwrap().residual, 0.0);

        // x' == x0 == c_y leaves nothing to compare
        let mut flat = sc.clone();
        flat.eps_pred = flat.noise.clone();
        assert!(surrogate_residual(&flat).unwrap().degenerate);
    }

    #[test]
    fn closed_forms_match_central_differences() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..60 {
            let d = [4, 16, 64][trial % 3];
            let c = 5;
            let w = Array2::from_shape_simple_fn((c, d), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (d as f64).sqrt()
            });
            let y = rng.random_range(0..c);
            let x0 = random_vec(d, &mut rng);
            let eps = random_vec(d, &mut rng);
            let lambda = rng.random_range(0.0..=1.0);
            let m = rng.random_range(1..=990);
            let ab = s.alpha_bar(m);
            let (sa, sn) = s.noise_coefficients(m);
            let target: Vec<f64> = x0.iter().zip(w.row(y)).map(|(x, cy)| lambda * x + (1.0 - lambda) * cy).collect();
            let x_m: Vec<f64> = target.iter().zip(&eps).map(|(t, e)| sa * t + sn * e).collect();
            // |eps - eps_theta|^2 with eps_theta implied by the estimate
            let loss = |xe: &[f64]| -> f64 {
                xe.iter()
                    .zip(&x_m)
                    .zip(&eps)
                    .map(|((x, xm), e)| {
                        let pred = (xm - sa * x) / sn;
                        (e - pred).powi(2)
                    })
                    .sum()
            };
            let ce = |xe: &[f64]| -> f64 {
                let logits: Vec<f64> = w.rows().into_iter().map(|r| dot(r.as_slice().unwrap(), xe)).collect();
                -crate::nn::log_softmax_row(&logits)[y]
            };
            let xe = random_vec(d, &mut rng);
            let fd = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
                (0..d)
                    .map(|j| {
                        let h = 1e-5 * (1.0 + xe[j].abs());
                        let mut p = xe.clone();
                        p[j] += h;
                        let mut q = xe.clone();
                        q[j] -= h;
                        (f(&p) - f(&q)) / (2.0 * h)
                    })
                    .collect()
            };
            let g = grad_gendd_closed_form(&xe, &x0, w.row(y).as_slice().unwrap(), lambda, ab);
            assert!(rel_err(&fd(&loss), &g) < 1e-6, "gendd trial {trial}");
            let g = grad_ce_closed_form(&xe, w.view(), y);
            assert!(rel_err(&fd(&ce), &g) < 1e-6, "ce trial {trial}");
        }
    }

    #[test]
    fn small_sweep_trends_down() {
        let cfg = SweepConfig { scenarios_per_bucket: 60, seed: 11, ..Default::default() };
        let report = confidence_sweep(&cfg).unwrap();
        assert_eq!(report.buckets.len(), 4);
        assert!(report.monotone, "{report:?}");
        for b in &report.buckets {
            assert_eq!(b.count + b.degenerate, 60);
            assert!(b.median_confidence >= b.confidence_bucket - 1e-9 && b.median_confidence < b.upper + 1e-9);
        }
    }
}
