use gendd::contraction::{CenterSource, ContractionSpec};
use gendd::schedule::{NoiseSchedule, ScheduleKind};
use gendd::theorem;
use gendd::tokenizer::FeatureStats;
use ndarray::Array2;
use proptest::prelude::*;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #[test]
    fn contraction_moves_toward_the_center(
        (x, c) in (1usize..32).prop_flat_map(|d| (vec_of(d), vec_of(d))),
        lambda in 0.0f64..=1.0,
    ) {
        let spec = ContractionSpec::new(lambda, Array2::from_shape_vec((1, c.len()), c.clone()).unwrap(), CenterSource::ClassifierWeights).unwrap();
        let out = spec.contract(&x, Some(0)).unwrap();
        let dist = |a: &[f64]| a.iter().zip(&c).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!((dist(&out) - lambda * dist(&x)).abs() <= 1e-9 * (1.0 + dist(&x)));
    }

    #[test]
    fn surrogate_difference_is_the_gamma1_term(
        (x_est, x0, w) in (2usize..16, 2usize..6).prop_flat_map(|(d, k)| (vec_of(d), vec_of(d), vec_of(d * k))),
        lambda in 0.0f64..=1.0,
        m in 1usize..1000,
    ) {
        let d = x0.len();
        let weights = Array2::from_shape_vec((w.len() / d, d), w).unwrap();
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        let ab = schedule.alpha_bar(m);
        let g1 = theorem::grad_gendd_closed_form(&x_est, &x0, &weights.row(0).to_vec(), lambda, ab);
        let g2 = theorem::grad_multitask(&x_est, &x0, weights.view(), 0, lambda, ab);
        let (_, gamma1) = theorem::surrogate_constants(lambda, ab);
        let p = theorem::class_probabilities(&x_est, weights.view());
        let x2 = theorem::expected_center(&p, weights.view());
        for i in 0..d {
            let expected = gamma1 * (x0[i] - x2[i]);
            prop_assert!((g1[i] - g2[i] - expected).abs() <= 1e-9 * (1.0 + g1[i].abs() + g2[i].abs()));
        }
    }

    #[test]
    fn single_step_estimate_inverts_forward_noise(
        (x0, eps) in (1usize..32).prop_flat_map(|d| (vec_of(d), vec_of(d))),
        m in 1usize..=900,
    ) {
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 1000).unwrap();
        let x_m = schedule.forward_noise(&x0, m, &eps).unwrap();
        let back = theorem::single_step_x0(&x_m, m, &eps, &schedule).unwrap();
        let scale = 1.0 / schedule.alpha_bar(m).sqrt();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() <= 1e-12 * scale * 10.0);
        }
    }

    #[test]
    fn standardization_round_trips(
        rows in (2usize..12, 1usize..8).prop_flat_map(|(n, d)| prop::collection::vec(vec_of(d), n)),
    ) {
        let d = rows[0].len();
        let f = Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
        let stats = FeatureStats::fit_rows(f.view()).unwrap();
        let back = stats.invert(stats.apply(f.view()).unwrap().view()).unwrap();
        for (a, b) in back.iter().zip(&f) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
