//! Fixed feature extractors.
//!
//! The pseudo-condition extractor is a seeded linear map on the predicate
//! block followed by L2 normalization. It only ever sees a feature vector,
//! never labels or identities. The identity extractor projects onto the
//! identity block and feeds the re-identification filter.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::world::WorldSpec;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    PseudoCondition,
    Identity,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::PseudoCondition => "pseudo_condition",
            ExtractorKind::Identity => "identity",
        })
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_condition" => Ok(ExtractorKind::PseudoCondition),
            "identity" => Ok(ExtractorKind::Identity),
            other => Err(Error::config(format!("unknown extractor kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Dense Gaussian map drawn from the spec seed.
    Seeded,
    /// Keeps the first `out_dim` coordinates of the block.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub block_start: usize,
    pub block_len: usize,
    pub projection: Projection,
    pub seed: u64,
}

impl ExtractorSpec {
    /// The default pseudo-condition extractor of a world.
    pub fn pseudo_condition(world: &WorldSpec) -> Self {
        let block = world.predicate_block();
        ExtractorSpec {
            kind: ExtractorKind::PseudoCondition,
            in_dim: world.dim,
            out_dim: world.condition_dim,
            block_start: block.start,
            block_len: block.len(),
            projection: Projection::Seeded,
            seed: seed::derive(world.seed, "pseudo_condition_extractor", 0),
        }
    }

    /// The default identity extractor of a world.
    pub fn identity(world: &WorldSpec) -> Self {
        let block = world.identity_block();
        ExtractorSpec {
            kind: ExtractorKind::Identity,
            in_dim: world.dim,
            out_dim: block.len(),
            block_start: block.start,
            block_len: block.len(),
            projection: Projection::Identity,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.out_dim > self.in_dim {
            return Err(Error::config("extractor out_dim must lie in [1, in_dim]"));
        }
        if self.block_len == 0 || self.block_start + self.block_len > self.in_dim {
            return Err(Error::config("extractor block lies outside the input"));
        }
        if self.projection == Projection::Identity && self.out_dim > self.block_len {
            return Err(Error::config("identity projection cannot widen its block"));
        }
        Ok(())
    }

    fn matrix(&self) -> Vec<f64> {
        let (rows, cols) = (self.out_dim, self.block_len);
        match self.projection {
            Projection::Identity => {
                let mut m = vec![0.0; rows * cols];
                for r in 0..rows {
                    m[r * cols + r] = 1.0;
                }
                m
            }
            Projection::Seeded => {
                let mut rng = seed::rng(self.seed);
                let scale = 1.0 / (cols as f64).sqrt();
                (0..rows * cols)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
struct LinearMap {
    spec: ExtractorSpec,
    matrix: Vec<f64>,
}

impl LinearMap {
    fn new(spec: ExtractorSpec) -> Result<Self> {
        spec.validate()?;
        let matrix = spec.matrix();
        Ok(LinearMap { spec, matrix })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let block = &x[self.spec.block_start..self.spec.block_start + self.spec.block_len];
        self.matrix
            .chunks_exact(self.spec.block_len)
            .map(|row| row.iter().zip(block).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Operator norm bound: the Frobenius norm of the map.
    fn frobenius(&self) -> f64 {
        self.matrix.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Output of the pseudo-condition extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCondition {
    pub values: Vec<f64>,
    /// The projection was zero, so no normalization took place.
    pub degenerate: bool,
}

/// The label-blind extractor that produces `c_s`.
#[derive(Debug, Clone)]
pub struct PseudoConditionExtractor {
    map: LinearMap,
}

impl PseudoConditionExtractor {
    pub fn new(spec: ExtractorSpec) -> Result<Self> {
        if spec.kind != ExtractorKind::PseudoCondition {
            return Err(Error::config("expected a pseudo_condition extractor spec"));
        }
        Ok(PseudoConditionExtractor {
            map: LinearMap::new(spec)?,
        })
    }

    pub fn for_world(world: &WorldSpec) -> Result<Self> {
        Self::new(ExtractorSpec::pseudo_condition(world))
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.map.spec
    }

    pub fn map_norm(&self) -> f64 {
        self.map.frobenius()
    }

    pub fn extract(&self, x: &[f64]) -> PseudoCondition {
        let mut values = self.map.apply(x);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
            PseudoCondition {
                values,
                degenerate: false,
            }
        } else {
            PseudoCondition {
                values,
                degenerate: true,
            }
        }
    }
}

/// Convenience wrapper around [`PseudoConditionExtractor::extract`].
pub fn pseudo_condition(x: &[f64], extractor: &PseudoConditionExtractor) -> PseudoCondition {
    extractor.extract(x)
}

/// Projection onto the identity block, used by the privacy filter only.
#[derive(Debug, Clone)]
pub struct IdentityExtractor {
    map: LinearMap,
}

impl IdentityExtractor {
    pub fn new(spec: ExtractorSpec) -> Result<Self> {
        if spec.kind != ExtractorKind::Identity {
            return Err(Error::config("expected an identity extractor spec"));
        }
        Ok(IdentityExtractor {
            map: LinearMap::new(spec)?,
        })
    }

    pub fn for_world(world: &WorldSpec) -> Result<Self> {
        Self::new(ExtractorSpec::identity(world))
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.map.spec
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.map.apply(x)
    }
}

pub fn identity_embedding(x: &[f64], extractor: &IdentityExtractor) -> Vec<f64> {
    extractor.embed(x)
}

/// Anything that turns a feature vector into a conditioning vector.
pub trait ConditionExtractor {
    fn condition(&self, x: &[f64]) -> Vec<f64>;

    /// `(A, b)` when the condition is `normalize(A·x + b)`, with `A` stored
    /// row-major as `out_dim × in_dim`.
    fn affine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

impl ConditionExtractor for PseudoConditionExtractor {
    fn condition(&self, x: &[f64]) -> Vec<f64> {
        self.extract(x).values
    }

    fn affine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let spec = &self.map.spec;
        let mut a = vec![0.0; spec.out_dim * spec.in_dim];
        for (r, row) in self.map.matrix.chunks_exact(spec.block_len).enumerate() {
            a[r * spec.in_dim + spec.block_start..r * spec.in_dim + spec.block_start + spec.block_len]
                .copy_from_slice(row);
        }
        Some((a, vec![0.0; spec.out_dim]))
    }
}

/// Uses the downstream classifier's normalized logits as the condition.
///
/// Kept for comparison against the generic extractor; it is not the default.
pub struct ClassifierCondition<'a>(pub &'a Classifier);

impl ConditionExtractor for ClassifierCondition<'_> {
    fn condition(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.0.logits(x);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            z.iter_mut().for_each(|v| *v /= norm);
        }
        z
    }

    fn affine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.0.weights().to_vec(), self.0.bias().to_vec()))
    }
}

/// Which extractor produces the pseudo-condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditionSource {
    #[default]
    PseudoCondition,
    Classifier,
}

impl FromStr for ConditionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_condition" | "swav" => Ok(ConditionSource::PseudoCondition),
            "classifier" => Ok(ConditionSource::Classifier),
            other => Err(Error::config(format!("unknown extractor `{other}`"))),
        }
    }
}

/// Cached embeddings of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub record_ids: Vec<u64>,
    pub values: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn from_fn(ds: &crate::world::Dataset, dim: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Embeddings {
            dim,
            record_ids: ds.records.iter().map(|r| r.record_id).collect(),
            values: ds.records.iter().map(|r| f(&r.x)).collect(),
        }
    }
}
