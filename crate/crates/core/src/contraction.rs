//! Distribution contraction: pulls diffusion targets toward class centers.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::tokenizer::{self, FeatureStats, TokenBatch};

pub const DEFAULT_LAMBDA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    #[default]
    ClassifierWeights,
    EmpiricalMeans,
}

impl fmt::Display for CenterSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CenterSource::ClassifierWeights => "classifier_weights",
            CenterSource::EmpiricalMeans => "empirical_means",
        })
    }
}

impl FromStr for CenterSource {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier_weights" => Ok(CenterSource::ClassifierWeights),
            "empirical_means" => Ok(CenterSource::EmpiricalMeans),
            other => Err(GenddError::Config(format!("unknown center source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionSpec {
    lambda: f64,
    centers: Array2<f64>,
    source: CenterSource,
}

impl ContractionSpec {
    pub fn new(lambda: f64, centers: Array2<f64>, source: CenterSource) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1], got {lambda}");
        ensure!(centers.nrows() >= 1, "at least one class center is required");
        ensure!(centers.iter().all(|v| v.is_finite()), "class centers must be finite");
        Ok(ContractionSpec { lambda, centers, source })
    }

    /// Unsupervised spec: `lambda = 1`, centers unused.
    pub fn unsupervised(feature_dim: usize) -> Self {
        ContractionSpec {
            lambda: 1.0,
            centers: Array2::zeros((1, feature_dim)),
            source: CenterSource::ClassifierWeights,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn source(&self) -> CenterSource {
        self.source
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn requires_labels(&self) -> bool {
        self.lambda < 1.0
    }

    /// `lambda * x0 + (1 - lambda) * centers[y]`.
    pub fn contract(&self, x0: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
        ensure!(
            x0.len() == self.centers.ncols(),
            "feature of dimension {} against centers of dimension {}",
            x0.len(),
            self.centers.ncols()
        );
        if !self.requires_labels() {
            return Ok(x0.to_vec());
        }
        let y = self.check_label(label)?;
        let lambda = self.lambda;
        Ok(x0
            .iter()
            .zip(self.centers.row(y))
            .map(|(x, c)| lambda * x + (1.0 - lambda) * c)
            .collect())
    }

    /// Contracts every token of a batch toward the tokenized center of its label.
    pub fn contract_tokens(&self, batch: &TokenBatch) -> Result<Array3<f64>> {
        ensure!(
            batch.feature_dim == self.centers.ncols(),
            "token batch covers {} features, centers have {}",
            batch.feature_dim,
            self.centers.ncols()
        );
        if !self.requires_labels() {
            return Ok(batch.tokens.clone());
        }
        let labels = batch.labels.as_deref().ok_or_else(|| {
            GenddError::Validation("labels are required when lambda < 1".into())
        })?;
        let center_tokens = tokenizer::split(
            self.centers.view(),
            batch.token_dim(),
            Array2::<f64>::zeros((self.centers.nrows(), 0)).view(),
            None,
        )?
        .tokens;
        let lambda = self.lambda;
        let mut out = batch.tokens.clone();
        for (mut sample, &y) in out.axis_iter_mut(Axis(0)).zip(labels) {
            self.check_label(Some(y))?;
            let center = center_tokens.index_axis(Axis(0), y);
            sample.zip_mut_with(&center, |x, &c| *x = lambda * *x + (1.0 - lambda) * c);
        }
        Ok(out)
    }

    fn check_label(&self, label: Option<usize>) -> Result<usize> {
        let y = label.ok_or_else(|| {
            GenddError::Validation("a label is required when lambda < 1".into())
        })?;
        ensure!(y < self.num_classes(), "label {y} out of range for {} classes", self.num_classes());
        Ok(y)
    }
}

/// Class centers taken verbatim from the rows of a frozen linear classifier.
///
/// With standardization active the rows are mapped into the standardized
/// feature space: `(W[y] - mean) / std`.
pub fn centers_from_classifier(
    weights: ArrayView2<f64>,
    stats: Option<&FeatureStats>,
) -> Result<Array2<f64>> {
    ensure!(weights.nrows() >= 1, "classifier has no rows");
    match stats {
        Some(stats) => stats.apply(weights),
        None => Ok(weights.to_owned()),
    }
}

/// Per-class means of (already standardized, if applicable) features.
pub fn centers_from_means(
    features: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Array2<f64>> {
    ensure!(features.nrows() == labels.len(), "{} labels for {} rows", labels.len(), features.nrows());
    let mut sums = Array2::<f64>::zeros((num_classes, features.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        ensure!(y < num_classes, "label {y} out of range for {num_classes} classes");
        sums.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    for (y, &c) in counts.iter().enumerate() {
        ensure!(c > 0, "class {y} has no samples to average");
        sums.row_mut(y).mapv_inplace(|v| v / c as f64);
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_classifier_centers_are_basis_vectors() {
        let w = Array2::<f64>::eye(4);
        let centers = centers_from_classifier(w.view(), None).unwrap();
        for y in 0..4 {
            for j in 0..4 {
                assert_eq!(centers[[y, j]], if y == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn centers_copy_weight_rows_bit_exactly() {
        let w = random(5, 7, 1);
        let centers = centers_from_classifier(w.view(), None).unwrap();
        assert!(centers.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn standardized_contraction_commutes_with_destandardize() {
        let w = random(3, 6, 2);
        let feats = random(40, 6, 3).mapv(|v| 2.0 * v + 1.0);
        let stats = FeatureStats::fit_rows(feats.view()).unwrap();
        let centers = centers_from_classifier(w.view(), Some(&stats)).unwrap();
        for y in 0..3 {
            for j in 0..6 {
                let expect = (w[[y, j]] - stats.mean[j]) / stats.std[j];
                assert!((centers[[y, j]] - expect).abs() < 1e-12);
            }
        }
        let spec = ContractionSpec::new(0.7, centers, CenterSource::ClassifierWeights).unwrap();
        let raw = ContractionSpec::new(0.7, w.clone(), CenterSource::ClassifierWeights).unwrap();
        let x = feats.row(4).to_owned();
        let z = stats.apply(x.view().insert_axis(Axis(0))).unwrap();
        let contracted = spec.contract(z.row(0).as_slice().unwrap(), Some(1)).unwrap();
        let back = stats
            .invert(Array2::from_shape_vec((1, 6), contracted).unwrap().view())
            .unwrap();
        let direct = raw.contract(x.as_slice().unwrap(), Some(1)).unwrap();
        for (a, b) in back.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn contraction_endpoints_and_hand_example() {
        let centers = array![[0.0, 2.0], [5.0, 5.0]];
        let x = [1.0, 1.0];
        let full = ContractionSpec::new(1.0, centers.clone(), CenterSource::ClassifierWeights).unwrap();
        assert_eq!(full.contract(&x, Some(0)).unwrap(), x.to_vec());
        assert_eq!(full.contract(&x, None).unwrap(), x.to_vec());
        let collapse = ContractionSpec::new(0.0, centers.clone(), CenterSource::ClassifierWeights).unwrap();
        assert_eq!(collapse.contract(&x, Some(1)).unwrap(), vec![5.0, 5.0]);
        let mild = ContractionSpec::new(0.9, centers, CenterSource::ClassifierWeights).unwrap();
        let out = mild.contract(&x, Some(0)).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15 && (out[1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn contraction_errors() {
        let centers = array![[0.0, 2.0]];
        assert!(ContractionSpec::new(1.5, centers.clone(), CenterSource::ClassifierWeights).is_err());
        assert!(ContractionSpec::new(-0.1, centers.clone(), CenterSource::ClassifierWeights).is_err());
        let spec = ContractionSpec::new(0.5, centers, CenterSource::ClassifierWeights).unwrap();
        assert!(spec.contract(&[1.0, 1.0], None).is_err());
        assert!(spec.contract(&[1.0, 1.0], Some(1)).is_err());
        assert!(spec.contract(&[1.0], Some(0)).is_err());
    }

    #[test]
    fn token_contraction_matches_feature_contraction() {
        let centers = random(3, 10, 4);
        let feats = random(4, 10, 5);
        let labels = [0, 2, 1, 2];
        let spec = ContractionSpec::new(0.6, centers, CenterSource::ClassifierWeights).unwrap();
        let batch =
            tokenizer::split(feats.view(), 4, Array2::zeros((4, 1)).view(), Some(&labels)).unwrap();
        let contracted = spec.contract_tokens(&batch).unwrap();
        let assembled = tokenizer::assemble(contracted.view(), 10).unwrap();
        for (b, &y) in labels.iter().enumerate() {
            let direct = spec.contract(feats.row(b).as_slice().unwrap(), Some(y)).unwrap();
            for (a, d) in assembled.row(b).iter().zip(&direct) {
                assert!((a - d).abs() < 1e-15);
            }
        }
        // padded tail stays zero
        assert_eq!(contracted[[0, 2, 2]], 0.0);
        assert_eq!(contracted[[0, 2, 3]], 0.0);

        let unlabeled = tokenizer::split(feats.view(), 4, Array2::zeros((4, 1)).view(), None).unwrap();
        assert!(spec.contract_tokens(&unlabeled).is_err());
    }

    #[test]
    fn empirical_means() {
        let feats = array![[1.0, 0.0], [3.0, 2.0], [10.0, 10.0]];
        let centers = centers_from_means(feats.view(), &[0, 0, 1], 2).unwrap();
        assert_eq!(centers, array![[2.0, 1.0], [10.0, 10.0]]);
        assert!(centers_from_means(feats.view(), &[0, 0, 0], 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn contraction_lies_on_segment(lambda in 0.0f64..=1.0, seed in 0u64..500) {
            let centers = random(2, 5, seed);
            let x = random(1, 5, seed + 1000);
            let spec = ContractionSpec::new(lambda, centers.clone(), CenterSource::ClassifierWeights).unwrap();
            let out = spec.contract(x.row(0).as_slice().unwrap(), Some(1)).unwrap();
            let moved: f64 = out.iter().zip(x.row(0)).map(|(o, v)| (o - v).powi(2)).sum::<f64>().sqrt();
            let span: f64 = centers.row(1).iter().zip(x.row(0)).map(|(c, v)| (c - v).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assert!((moved - (1.0 - lambda) * span).abs() <= 1e-12 * (1.0 + span));
        }

        #[test]
        fn contraction_is_affine(lambda in 0.0f64..=1.0, a in -3.0f64..3.0, seed in 0u64..500) {
            let centers = random(1, 4, seed);
            let x = random(2, 4, seed + 7);
            let spec = ContractionSpec::new(lambda, centers, CenterSource::ClassifierWeights).unwrap();
            let b = 1.0 - a;
            let mix: Vec<f64> = x.row(0).iter().zip(x.row(1)).map(|(p, q)| a * p + b * q).collect();
            let lhs = spec.contract(&mix, Some(0)).unwrap();
            let p = spec.contract(x.row(0).as_slice().unwrap(), Some(0)).unwrap();
            let q = spec.contract(x.row(1).as_slice().unwrap(), Some(0)).unwrap();
            for j in 0..4 {
                proptest::prop_assert!((lhs[j] - (a * p[j] + b * q[j])).abs() < 1e-10);
            }
        }
    }
}
