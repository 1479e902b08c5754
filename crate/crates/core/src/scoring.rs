//! Score matrices built from learner and reference losses, and the on-disk
//! cache of reference embeddings.

use std::path::Path;

use crate::contrastive::{ContrastiveParams, EmbeddingBatch, LossKind, LossMatrix};
use crate::envelope::{self, Envelope};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default multiplier applied to every score matrix.
pub const DEFAULT_GAIN: f64 = 100.0;

/// How a batch is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoringMethod {
    /// Learner loss minus reference loss.
    Learnability,
    /// Negated reference loss.
    EasyRef,
    /// Learner loss.
    HardLearner,
}

impl ScoringMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMethod::Learnability => "learnability",
            ScoringMethod::EasyRef => "easy_ref",
            ScoringMethod::HardLearner => "hard_learner",
        }
    }
}

impl std::str::FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnability" => Ok(ScoringMethod::Learnability),
            "easy_ref" => Ok(ScoringMethod::EasyRef),
            "hard_learner" => Ok(ScoringMethod::HardLearner),
            other => Err(Error::InvalidArgument(format!(
                "unknown scoring method `{other}`"
            ))),
        }
    }
}

/// Per-pair scores of a super-batch. Sums over sub-matrices give joint scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Matrix,
    method: ScoringMethod,
    gain: f64,
}

impl ScoreMatrix {
    /// Wraps an arbitrary square matrix, e.g. a synthetic one.
    pub fn new(values: Matrix, method: ScoringMethod, gain: f64) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Shape(format!(
                "score matrix must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if values.rows() == 0 {
            return Err(Error::Shape("score matrix is empty".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("score matrix"));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gain must be positive, got {gain}"
            )));
        }
        Ok(ScoreMatrix {
            values,
            method,
            gain,
        })
    }

    /// Raw matrix with gain 1, handy for synthetic experiments.
    pub fn raw(values: Matrix) -> Result<Self> {
        Self::new(values, ScoringMethod::Learnability, 1.0)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn method(&self) -> ScoringMethod {
        self.method
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }
}

/// Combines learner and reference loss matrices into gain-scaled scores.
pub fn build_scores(
    learner: &LossMatrix,
    reference: &LossMatrix,
    method: ScoringMethod,
    gain: f64,
) -> Result<ScoreMatrix> {
    if learner.values.shape() != reference.values.shape() {
        return Err(Error::Shape(format!(
            "learner losses are {:?} but reference losses are {:?}",
            learner.values.shape(),
            reference.values.shape()
        )));
    }
    if learner.kind != reference.kind {
        return Err(Error::InvalidArgument(format!(
            "cannot mix {} and {} losses",
            learner.kind.as_str(),
            reference.kind.as_str()
        )));
    }
    let (n, m) = learner.values.shape();
    let l = learner.values.as_slice();
    let r = reference.values.as_slice();
    let data = match method {
        ScoringMethod::Learnability => l.iter().zip(r).map(|(a, b)| gain * (a - b)).collect(),
        ScoringMethod::EasyRef => r.iter().map(|b| gain * -b).collect(),
        ScoringMethod::HardLearner => l.iter().map(|a| gain * a).collect(),
    };
    ScoreMatrix::new(Matrix::from_vec(n, m, data)?, method, gain)
}

const CACHE_MAGIC: &[u8; 8] = b"JESTREF1";

/// Reference-model embeddings for a dataset, stored instead of scores because
/// the composition of each super-batch is not known ahead of training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCache {
    n: usize,
    d: usize,
    image: Vec<f32>,
    text: Vec<f32>,
    params: ContrastiveParams,
}

impl ReferenceCache {
    pub fn new(
        n: usize,
        d: usize,
        image: Vec<f32>,
        text: Vec<f32>,
        params: ContrastiveParams,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "reference cache needs n >= 1 and d >= 1, got {n}x{d}"
            )));
        }
        if image.len() != n * d || text.len() != n * d {
            return Err(Error::Shape(format!(
                "expected {} values per modality, got {} and {}",
                n * d,
                image.len(),
                text.len()
            )));
        }
        params.validate()?;
        Ok(ReferenceCache {
            n,
            d,
            image,
            text,
            params,
        })
    }

    /// Stores an embedding batch at 32-bit precision.
    pub fn from_batch(batch: &EmbeddingBatch, params: ContrastiveParams) -> Result<Self> {
        let to_f32 = |m: &Matrix| m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(
            batch.n(),
            batch.dim(),
            to_f32(batch.image()),
            to_f32(batch.text()),
            params,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &ContrastiveParams {
        &self.params
    }

    pub fn image(&self) -> &[f32] {
        &self.image
    }

    pub fn text(&self) -> &[f32] {
        &self.text
    }

    /// Embeddings of the given dataset rows, in order.
    pub fn batch(&self, ids: &[usize]) -> Result<EmbeddingBatch> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.n) {
            return Err(Error::InvalidArgument(format!(
                "id {bad} is not covered by a reference cache of {} rows",
                self.n
            )));
        }
        let gather = |src: &[f32]| {
            let mut data = Vec::with_capacity(ids.len() * self.d);
            for &i in ids {
                data.extend(src[i * self.d..(i + 1) * self.d].iter().map(|&v| v as f64));
            }
            Matrix::from_vec(ids.len(), self.d, data)
        };
        EmbeddingBatch::new(gather(&self.image)?, gather(&self.text)?)
    }

    /// Recomputes the reference loss matrix for the given rows.
    pub fn loss_matrix(&self, ids: &[usize], kind: LossKind) -> Result<LossMatrix> {
        let batch = self.batch(ids)?;
        Ok(match kind {
            LossKind::Sigmoid => crate::contrastive::sigmoid_nll(&self.params, &batch)?.matrix,
            LossKind::Softmax => {
                crate::contrastive::softmax_nll(&self.params, &batch, None)?.neg_logits_matrix
            }
        })
    }

    fn envelope(&self) -> Envelope {
        Envelope {
            n: self.n,
            d: self.d,
            first: self.image.clone(),
            second: self.text.clone(),
            params: [self.params.alpha, self.params.beta, self.params.t],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        envelope::encode(CACHE_MAGIC, &self.envelope())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let env = envelope::decode(CACHE_MAGIC, bytes)?;
        from_envelope(env, bytes.len())
    }
}

fn from_envelope(env: Envelope, len: usize) -> Result<ReferenceCache> {
    let [alpha, beta, t] = env.params;
    let params = ContrastiveParams::new(alpha, beta, t).map_err(|e| Error::Format {
        offset: len as u64 - envelope::PARAMS_LEN,
        reason: e.to_string(),
    })?;
    ReferenceCache::new(env.n, env.d, env.first, env.second, params)
}

pub fn write_reference_cache(cache: &ReferenceCache, path: impl AsRef<Path>) -> Result<()> {
    envelope::write_file(path.as_ref(), CACHE_MAGIC, &cache.envelope())
}

pub fn read_reference_cache(path: impl AsRef<Path>) -> Result<ReferenceCache> {
    let path = path.as_ref();
    let env = envelope::read_file(path, CACHE_MAGIC)?;
    let len = envelope::encoded_len(env.n, env.d) as usize;
    from_envelope(env, len)
}
