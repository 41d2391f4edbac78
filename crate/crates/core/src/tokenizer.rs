//! Split tokenization of teacher features and per-dimension standardization.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
pub const FEATURE_STATS_VERSION: u32 = 1;

/// Teacher-feature tokens for a batch, with the shared student conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `B x n x d_tok`; the tail of the last token is zero when `d_t % d_tok != 0`.
    pub tokens: Array3<f64>,
    pub position_ids: Vec<usize>,
    /// `B x d_s` student features.
    pub condition: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub feature_dim: usize,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.dim().1
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.dim().2
    }

    /// Tokens flattened to `(B * n) x d_tok`, sample-major.
    pub fn rows(&self) -> ArrayView2<'_, f64> {
        let (b, n, d) = self.tokens.dim();
        self.tokens
            .view()
            .into_shape_with_order((b * n, d))
            .expect("token storage is contiguous")
    }
}

pub fn num_tokens(feature_dim: usize, token_dim: usize) -> usize {
    feature_dim.div_ceil(token_dim)
}

/// Cuts each feature row into `ceil(d_t / d_tok)` consecutive tokens.
pub fn split(
    features: ArrayView2<f64>,
    token_dim: usize,
    condition: ArrayView2<f64>,
    labels: Option<&[usize]>,
) -> Result<TokenBatch> {
    ensure!(token_dim >= 1, "token dimension must be >= 1");
    let (batch, feature_dim) = features.dim();
    ensure!(feature_dim >= 1, "feature dimension must be >= 1");
    ensure!(
        condition.nrows() == batch,
        "{} condition rows for {batch} feature rows",
        condition.nrows()
    );
    if let Some(labels) = labels {
        ensure!(labels.len() == batch, "{} labels for {batch} feature rows", labels.len());
    }
    if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
        return Err(GenddError::Validation(format!(
            "non-finite teacher feature at row {}, column {}",
            bad / feature_dim,
            bad % feature_dim
        )));
    }
    let n = num_tokens(feature_dim, token_dim);
    let mut tokens = Array3::zeros((batch, n, token_dim));
    {
        let mut flat = tokens
            .view_mut()
            .into_shape_with_order((batch, n * token_dim))
            .expect("fresh array is contiguous");
        flat.slice_mut(s![.., ..feature_dim]).assign(&features);
    }
    Ok(TokenBatch {
        tokens,
        position_ids: (0..n).collect(),
        condition: condition.to_owned(),
        labels: labels.map(<[usize]>::to_vec),
        feature_dim,
    })
}

/// Concatenates tokens in position order and truncates to `feature_dim`.
pub fn assemble(tokens: ArrayView3<f64>, feature_dim: usize) -> Result<Array2<f64>> {
    let (batch, n, d) = tokens.dim();
    ensure!(
        n * d >= feature_dim,
        "{n} tokens of dimension {d} cannot hold {feature_dim} features"
    );
    let flat = tokens.as_standard_layout().into_owned();
    let flat = flat
        .into_shape_with_order((batch, n * d))
        .expect("standard layout");
    Ok(flat.slice(s![.., ..feature_dim]).to_owned())
}

/// Per-dimension mean and (unbiased) standard deviation of teacher features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub version: u32,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            version: FEATURE_STATS_VERSION,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Welford accumulation over a stream of feature rows.
    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut iter = rows.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| GenddError::Validation("cannot fit stats on an empty stream".into()))?;
        let dim = first.len();
        let mut mean = first.to_vec();
        let mut m2 = vec![0.0; dim];
        let mut count = 1usize;
        for row in iter {
            ensure!(row.len() == dim, "row of length {} in a stream of dimension {dim}", row.len());
            count += 1;
            for j in 0..dim {
                let delta = row[j] - mean[j];
                mean[j] += delta / count as f64;
                m2[j] += delta * (row[j] - mean[j]);
            }
        }
        ensure!(count >= 2, "at least 2 samples are required, got {count}");
        let std = m2
            .iter()
            .map(|v| (v / (count - 1) as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(FeatureStats { version: FEATURE_STATS_VERSION, mean, std, sample_count: count })
    }

    pub fn fit_rows(features: ArrayView2<f64>) -> Result<Self> {
        let owned = features.as_standard_layout();
        Self::fit(owned.rows().into_iter().map(|r| r.to_slice().expect("standard layout")))
    }

    fn check(&self, features: &ArrayView2<f64>) -> Result<()> {
        ensure!(
            features.ncols() == self.dim(),
            "features have {} columns, stats cover {}",
            features.ncols(),
            self.dim()
        );
        Ok(())
    }

    /// `(f - mean) / std`, row-wise.
    pub fn apply(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&features)?;
        let mut out = features.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// `f * std + mean`, row-wise.
    pub fn invert(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&features)?;
        let mut out = features.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn large_scale_token_count() {
        let f = random(2, 2048, 1);
        let batch = split(f.view(), 64, Array2::zeros((2, 3)).view(), None).unwrap();
        assert_eq!(batch.num_tokens(), 32);
        assert_eq!(batch.position_ids, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn single_token_when_dims_match() {
        let f = random(3, 16, 2);
        let batch = split(f.view(), 16, Array2::zeros((3, 1)).view(), None).unwrap();
        assert_eq!(batch.num_tokens(), 1);
        for b in 0..3 {
            assert_eq!(batch.tokens.slice(s![b, 0, ..]), f.row(b));
        }
    }

    #[test]
    fn indivisible_split_pads_last_token() {
        let f = Array2::from_shape_fn((1, 10), |(_, j)| j as f64 + 1.0);
        let batch = split(f.view(), 4, Array2::zeros((1, 2)).view(), Some(&[3])).unwrap();
        assert_eq!(batch.num_tokens(), 3);
        assert_eq!(batch.tokens.slice(s![0, 2, ..]), array![9.0, 10.0, 0.0, 0.0]);
        assert_eq!(batch.labels, Some(vec![3]));
        let back = assemble(batch.tokens.view(), 10).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn assemble_truncates_single_token() {
        let tokens = Array3::from_shape_vec((1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(assemble(tokens.view(), 3).unwrap(), array![[1.0, 2.0, 3.0]]);
        assert!(assemble(tokens.view(), 5).is_err());
    }

    #[test]
    fn split_rejects_non_finite_and_shape_errors() {
        let mut f = random(2, 5, 3);
        f[[1, 2]] = f64::NAN;
        assert!(split(f.view(), 2, Array2::zeros((2, 1)).view(), None).is_err());
        let f = random(2, 5, 3);
        assert!(split(f.view(), 0, Array2::zeros((2, 1)).view(), None).is_err());
        assert!(split(f.view(), 2, Array2::zeros((3, 1)).view(), None).is_err());
    }

    #[test]
    fn constant_stream_floors_std() {
        let rows = vec![vec![2.5, -1.0]; 5];
        let stats = FeatureStats::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(stats.mean, vec![2.5, -1.0]);
        assert_eq!(stats.std, vec![STD_FLOOR, STD_FLOOR]);
        assert_eq!(stats.sample_count, 5);
    }

    #[test]
    fn two_point_stats_use_unbiased_estimator() {
        let rows = [vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 2.0]];
        let stats = FeatureStats::fit(rows.iter().map(Vec::as_slice)).unwrap();
        for j in 0..3 {
            assert_eq!(stats.mean[j], 1.0);
            assert!((stats.std[j] - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_needs_two_samples() {
        let empty: Vec<&[f64]> = vec![];
        assert!(FeatureStats::fit(empty).is_err());
        assert!(FeatureStats::fit([[1.0].as_slice()]).is_err());
    }

    #[test]
    fn standardized_features_have_unit_moments() {
        let mut f = random(10_000, 6, 4);
        for (j, mut col) in f.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| 3.0 * (j as f64 + 1.0) * v - 5.0);
        }
        let stats = FeatureStats::fit_rows(f.view()).unwrap();
        let z = stats.apply(f.view()).unwrap();
        let mean: Array1<f64> = z.mean_axis(Axis(0)).unwrap();
        let std = z.std_axis(Axis(0), 1.0);
        for j in 0..6 {
            assert!(mean[j].abs() < 1e-9);
            assert!((std[j] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_gaussian_features_stay_unit_scale() {
        let train = random(10_000, 8, 5);
        let fresh = random(10_000, 8, 6);
        let stats = FeatureStats::fit_rows(train.view()).unwrap();
        let z = stats.apply(fresh.view()).unwrap();
        for s in z.std_axis(Axis(0), 1.0) {
            assert!((0.95..=1.05).contains(&s));
        }
    }

    #[test]
    fn apply_invert_round_trip() {
        let f = random(50, 7, 7);
        let stats = FeatureStats::fit_rows(random(30, 7, 8).view()).unwrap();
        let back = stats.invert(stats.apply(f.view()).unwrap().view()).unwrap();
        for (a, b) in back.iter().zip(f.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
        let identity = FeatureStats::identity(7);
        assert_eq!(identity.apply(f.view()).unwrap(), f);
        assert!(stats.apply(random(2, 6, 9).view()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_assemble_is_bit_exact(
            d_t in 1usize..300,
            d_tok in 1usize..80,
            batch in 1usize..4,
            seed in 0u64..1000,
        ) {
            let f = random(batch, d_t, seed);
            let tb = split(f.view(), d_tok, Array2::zeros((batch, 1)).view(), None).unwrap();
            proptest::prop_assert_eq!(tb.num_tokens(), d_t.div_ceil(d_tok));
            let tail = tb.num_tokens() * d_tok - d_t;
            let flat = tb.rows().to_owned().into_shape_with_order((batch, tb.num_tokens() * d_tok)).unwrap();
            proptest::prop_assert!(flat.slice(s![.., d_t..]).iter().all(|&v| v == 0.0));
            proptest::prop_assert!(tail < d_tok);
            let back = assemble(tb.tokens.view(), d_t).unwrap();
            proptest::prop_assert!(back.iter().zip(f.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
