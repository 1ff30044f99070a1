//! Embedding vectors, description pooling and fusion strategies.
//!
//! Everything here is a pure function over immutable inputs. Vectors are held
//! as `f64` in memory; the on-disk store narrows them to `f32`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding must have at least one dimension")]
    EmptyVector,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("description list is empty")]
    NoDescriptions,
    #[error("strategy {strategy} requires the {operand} embedding")]
    MissingOperand {
        strategy: FusionStrategy,
        operand: &'static str,
    },
    #[error("unknown fusion strategy `{0}`")]
    UnknownStrategy(String),
}

/// A finite, non-empty real vector produced by one of the frozen encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyVector);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index, value });
        }
        Ok(Self { values })
    }

    /// Widens encoder output. Every `f32` is exactly representable as `f64`,
    /// so `to_f32` recovers the input bit-for-bit.
    pub fn from_f32(values: &[f32]) -> Result<Self, EmbeddingError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }

    /// Unit-L2 copy. A zero vector is returned unchanged.
    pub fn l2_normalized(&self) -> Self {
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Self {
            values: self.values.iter().map(|v| v / norm).collect(),
        }
    }
}

/// The `K` text embeddings of one sample's descriptions, in description order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionEmbeddings {
    sample_id: String,
    vectors: Vec<EmbeddingVector>,
}

impl DescriptionEmbeddings {
    pub fn new(
        sample_id: impl Into<String>,
        vectors: Vec<EmbeddingVector>,
    ) -> Result<Self, EmbeddingError> {
        let first = vectors.first().ok_or(EmbeddingError::NoDescriptions)?;
        check_same_dim(first.dim(), &vectors)?;
        Ok(Self {
            sample_id: sample_id.into(),
            vectors,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    /// Number of descriptions.
    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }
}

fn check_same_dim(dim: usize, vectors: &[EmbeddingVector]) -> Result<(), EmbeddingError> {
    match vectors.iter().find(|v| v.dim() != dim) {
        Some(v) => Err(EmbeddingError::DimMismatch {
            expected: dim,
            actual: v.dim(),
        }),
        None => Ok(()),
    }
}

/// How image and pooled text embeddings are turned into classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionStrategy {
    ImageOnly,
    TextOnly,
    Concat,
    Mean,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::ImageOnly,
        FusionStrategy::TextOnly,
        FusionStrategy::Concat,
        FusionStrategy::Mean,
    ];

    pub fn output_dim(self, d: usize) -> usize {
        match self {
            FusionStrategy::Concat => 2 * d,
            _ => d,
        }
    }

    pub fn needs_image(self) -> bool {
        !matches!(self, FusionStrategy::TextOnly)
    }

    pub fn needs_text(self) -> bool {
        !matches!(self, FusionStrategy::ImageOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::ImageOnly => "IMAGE_ONLY",
            FusionStrategy::TextOnly => "TEXT_ONLY",
            FusionStrategy::Concat => "CONCAT",
            FusionStrategy::Mean => "MEAN",
        }
    }

    /// Row label used in report tables.
    pub fn method_label(self) -> &'static str {
        match self {
            FusionStrategy::ImageOnly => "CLIP (image)",
            FusionStrategy::TextOnly => "CLIP (descriptions)",
            FusionStrategy::Concat => "CLIP (image & descriptions - CONCAT)",
            FusionStrategy::Mean => "CLIP (image & descriptions - MEAN)",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "image_only" | "image" => Ok(FusionStrategy::ImageOnly),
            "text_only" | "text" => Ok(FusionStrategy::TextOnly),
            "concat" => Ok(FusionStrategy::Concat),
            "mean" => Ok(FusionStrategy::Mean),
            _ => Err(EmbeddingError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Classifier input for one sample under one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub sample_id: String,
    pub values: EmbeddingVector,
    pub strategy: FusionStrategy,
}

/// Elementwise arithmetic mean of the description embeddings.
///
/// Each coordinate is summed in sorted order, which makes the result
/// bit-identical under any permutation of the descriptions.
pub fn pool_descriptions(embs: &DescriptionEmbeddings) -> EmbeddingVector {
    pool_sorted(embs.vectors())
}

/// Same as [`pool_descriptions`] over a loose list of vectors.
pub fn pool_vectors(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, EmbeddingError> {
    let first = vectors.first().ok_or(EmbeddingError::NoDescriptions)?;
    check_same_dim(first.dim(), vectors)?;
    Ok(pool_sorted(vectors))
}

fn pool_sorted(vectors: &[EmbeddingVector]) -> EmbeddingVector {
    let dim = vectors[0].dim();
    let k = vectors.len() as f64;
    let mut column = Vec::with_capacity(vectors.len());
    let values = (0..dim)
        .map(|i| {
            column.clear();
            column.extend(vectors.iter().map(|v| v.values[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / k
        })
        .collect();
    // Means of finite values stay finite barring overflow near f64::MAX.
    EmbeddingVector { values }
}

/// Combines an image embedding with the pooled text embedding.
///
/// `CONCAT` places the image values first. Operands a strategy does not use
/// may be `None`.
pub fn fuse(
    sample_id: impl Into<String>,
    image: Option<&EmbeddingVector>,
    text: Option<&EmbeddingVector>,
    strategy: FusionStrategy,
) -> Result<FusedFeature, EmbeddingError> {
    let need = |v: Option<&EmbeddingVector>, operand| {
        v.cloned()
            .ok_or(EmbeddingError::MissingOperand { strategy, operand })
    };
    let values = match strategy {
        FusionStrategy::ImageOnly => need(image, "image")?,
        FusionStrategy::TextOnly => need(text, "text")?,
        FusionStrategy::Concat | FusionStrategy::Mean => {
            let y = need(image, "image")?;
            let t = need(text, "text")?;
            if y.dim() != t.dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: y.dim(),
                    actual: t.dim(),
                });
            }
            if strategy == FusionStrategy::Concat {
                let mut values = y.values;
                values.extend_from_slice(&t.values);
                EmbeddingVector { values }
            } else {
                EmbeddingVector::new(
                    y.values
                        .iter()
                        .zip(&t.values)
                        .map(|(a, b)| (a + b) * 0.5)
                        .collect(),
                )?
            }
        }
    };
    Ok(FusedFeature {
        sample_id: sample_id.into(),
        values,
        strategy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert_eq!(EmbeddingVector::new(vec![]), Err(EmbeddingError::EmptyVector));
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f64::NAN]),
            Err(EmbeddingError::NonFinite { index: 1, .. })
        ));
        assert!(EmbeddingVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let raw = [0.1f32, -3.5e-7, 12345.678, f32::MIN_POSITIVE];
        let e = EmbeddingVector::from_f32(&raw).unwrap();
        let back = e.to_f32();
        assert_eq!(
            raw.map(f32::to_bits).to_vec(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pooling_identical_vectors_returns_the_vector() {
        let x = v(&[0.3, -1.7, 2.0]);
        let embs = DescriptionEmbeddings::new("s", vec![x.clone(); 10]).unwrap();
        let pooled = pool_descriptions(&embs);
        for (a, b) in pooled.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_symmetric_pair_is_zero() {
        let embs = DescriptionEmbeddings::new("s", vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])]).unwrap();
        assert_eq!(pool_descriptions(&embs).values(), &[0.0, 0.0]);
    }

    #[test]
    fn pooling_matches_accumulate_then_divide_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(768);
        let vectors: Vec<EmbeddingVector> = (0..10)
            .map(|_| v(&(0..768).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();

        // Oracle: running sum in list order, one division at the end.
        let mut acc = vec![0.0f64; 768];
        for vec in &vectors {
            for (a, x) in acc.iter_mut().zip(vec.values()) {
                *a += x;
            }
        }
        let oracle: Vec<f64> = acc.iter().map(|a| a / 10.0).collect();

        let embs = DescriptionEmbeddings::new("s", vectors).unwrap();
        let pooled = pool_descriptions(&embs);
        let max_diff = pooled
            .values()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn description_embeddings_validate_dims() {
        assert_eq!(
            DescriptionEmbeddings::new("s", vec![]),
            Err(EmbeddingError::NoDescriptions)
        );
        assert_eq!(
            DescriptionEmbeddings::new("s", vec![v(&[1.0, 2.0]), v(&[1.0])]),
            Err(EmbeddingError::DimMismatch {
                expected: 2,
                actual: 1
            })
        );
        assert!(pool_vectors(&[]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let y = v(&[1.0, 2.0]);
        let t = v(&[3.0, 4.0]);
        let c = fuse("a", Some(&y), Some(&t), FusionStrategy::Concat).unwrap();
        assert_eq!(c.values.values(), &[1.0, 2.0, 3.0, 4.0]);
        let m = fuse("a", Some(&y), Some(&t), FusionStrategy::Mean).unwrap();
        assert_eq!(m.values.values(), &[2.0, 3.0]);
        let i = fuse("a", Some(&y), None, FusionStrategy::ImageOnly).unwrap();
        assert_eq!(i.values, y);
        let tt = fuse("a", None, Some(&t), FusionStrategy::TextOnly).unwrap();
        assert_eq!(tt.values, t);
    }

    #[test]
    fn fuse_vit_l_14_dims() {
        let y = v(&[0.5; 768]);
        let t = v(&[0.25; 768]);
        let c = fuse("a", Some(&y), Some(&t), FusionStrategy::Concat).unwrap();
        assert_eq!(c.values.dim(), 1536);
    }

    #[test]
    fn fuse_errors() {
        let y = v(&[1.0, 2.0]);
        let t = v(&[3.0]);
        assert!(matches!(
            fuse("a", Some(&y), Some(&t), FusionStrategy::Concat),
            Err(EmbeddingError::DimMismatch { .. })
        ));
        assert!(matches!(
            fuse("a", Some(&y), None, FusionStrategy::Mean),
            Err(EmbeddingError::MissingOperand { operand: "text", .. })
        ));
        assert!(matches!(
            fuse("a", None, Some(&t), FusionStrategy::ImageOnly),
            Err(EmbeddingError::MissingOperand { operand: "image", .. })
        ));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("concat".parse::<FusionStrategy>().unwrap(), FusionStrategy::Concat);
        assert_eq!("IMAGE_ONLY".parse::<FusionStrategy>().unwrap(), FusionStrategy::ImageOnly);
        assert_eq!("text-only".parse::<FusionStrategy>().unwrap(), FusionStrategy::TextOnly);
        assert!("max".parse::<FusionStrategy>().is_err());
        for s in FusionStrategy::ALL {
            assert_eq!(s.as_str().parse::<FusionStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn normalization_handles_zero() {
        let z = v(&[0.0, 0.0]);
        assert_eq!(z.l2_normalized(), z);
        let n = v(&[3.0, 4.0]).l2_normalized();
        assert_eq!(n.values(), &[0.6, 0.8]);
    }

    fn vectors(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..12, k).prop_flat_map(|(dim, k)| {
            prop::collection::vec(prop::collection::vec(-1e3f64..1e3, dim), k)
        })
    }

    proptest! {
        #[test]
        fn pool_is_permutation_invariant(raw in vectors(1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let vs: Vec<_> = raw.iter().map(|x| v(x)).collect();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = pool_descriptions(&DescriptionEmbeddings::new("s", vs).unwrap());
            let b = pool_descriptions(&DescriptionEmbeddings::new("s", shuffled).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pool_is_homogeneous(raw in vectors(1..12), c in -10.0f64..10.0) {
            let vs: Vec<_> = raw.iter().map(|x| v(x)).collect();
            let scaled: Vec<_> = vs.iter().map(|x| x.scaled(c).unwrap()).collect();
            let a = pool_vectors(&scaled).unwrap();
            let b = pool_vectors(&vs).unwrap().scaled(c).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn concat_projection_recovers_operands(
            pair in (1usize..64).prop_flat_map(|d| (
                prop::collection::vec(-1e6f64..1e6, d),
                prop::collection::vec(-1e6f64..1e6, d),
            ))
        ) {
            let (y, t) = (v(&pair.0), v(&pair.1));
            let d = y.dim();
            let c = fuse("s", Some(&y), Some(&t), FusionStrategy::Concat).unwrap();
            prop_assert_eq!(c.values.dim(), FusionStrategy::Concat.output_dim(d));
            prop_assert_eq!(&c.values.values()[..d], y.values());
            prop_assert_eq!(&c.values.values()[d..], t.values());
        }

        #[test]
        fn mean_of_equal_operands_is_identity(raw in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let y = v(&raw);
            let m = fuse("s", Some(&y), Some(&y), FusionStrategy::Mean).unwrap();
            prop_assert_eq!(m.values, y);
        }

        #[test]
        fn output_dims_follow_strategy(d in 1usize..128) {
            let y = v(&vec![1.0; d]);
            let t = v(&vec![2.0; d]);
            for s in FusionStrategy::ALL {
                let f = fuse("s", Some(&y), Some(&t), s).unwrap();
                prop_assert_eq!(f.values.dim(), s.output_dim(d));
                let expected = if s == FusionStrategy::Concat { 2 * d } else { d };
                prop_assert_eq!(f.values.dim(), expected);
            }
        }
    }
}
