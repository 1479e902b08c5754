//! Synthetic score matrices for exercising the samplers without training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::contrastive::{sigmoid_nll, ContrastiveParams, EmbeddingBatch};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::scoring::{build_scores, ScoreMatrix, ScoringMethod};

/// Learnability scores of a super-batch of `n` pairs in `dim` dimensions.
///
/// The reference embeds a pair's two sides close together when the pair is
/// clean and far apart when it is noisy (`noise_rate` of the pairs); the
/// learner is a weakly aligned version of the same embeddings. Scores use the
/// sigmoid loss with `params` and `gain`.
pub fn learnability_scores<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    noise_rate: f64,
    learner_alignment: f64,
    params: &ContrastiveParams,
    gain: f64,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let base = Matrix::from_fn(n, dim, |_, _| normal());
    let other = Matrix::from_fn(n, dim, |_, _| normal());
    let jitter = Matrix::from_fn(n, dim, |_, _| 0.3 * normal());
    let learner_noise = Matrix::from_fn(n, dim, |_, _| normal());
    let noisy: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < noise_rate).collect();

    let ref_text = Matrix::from_fn(n, dim, |i, k| {
        if noisy[i] {
            other.get(i, k)
        } else {
            base.get(i, k) + jitter.get(i, k)
        }
    });
    let reference = EmbeddingBatch::new(base.clone(), ref_text.clone())?;
    let a = learner_alignment;
    let learner_text = Matrix::from_fn(n, dim, |i, k| {
        a * ref_text.get(i, k) + (1.0 - a) * learner_noise.get(i, k)
    });
    let learner = EmbeddingBatch::new(base, learner_text)?;
    let l = sigmoid_nll(params, &learner)?.matrix;
    let r = sigmoid_nll(params, &reference)?.matrix;
    build_scores(&l, &r, ScoringMethod::Learnability, gain)
}

/// `scale * U Vᵀ / sqrt(rank)` with Gaussian factors.
pub fn low_rank_scores<R: Rng + ?Sized>(
    n: usize,
    rank: usize,
    scale: f64,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let u = Matrix::from_fn(n, rank, |_, _| normal());
    let v = Matrix::from_fn(n, rank, |_, _| normal());
    let s = scale / (rank as f64).sqrt();
    ScoreMatrix::raw(u.matmul_transposed(&v)?.map(|x| s * x))
}

/// Items are split into `n_blocks` contiguous blocks; entries within a block
/// are `within`, across blocks `between`, and the diagonal is `diagonal`.
pub fn block_scores(
    n: usize,
    n_blocks: usize,
    within: f64,
    between: f64,
    diagonal: f64,
) -> Result<ScoreMatrix> {
    let block = |i: usize| i * n_blocks / n;
    ScoreMatrix::raw(Matrix::from_fn(n, n, |i, j| {
        if i == j {
            diagonal
        } else if block(i) == block(j) {
            within
        } else {
            between
        }
    }))
}

/// Block-structured scores with a random permutation of item positions and
/// Gaussian jitter on the off-diagonal, diagonal fixed at zero.
pub fn shuffled_block_scores<R: Rng + ?Sized>(
    n: usize,
    n_blocks: usize,
    within: f64,
    jitter: f64,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_blocks)).collect();
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let m = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let base = if labels[i] == labels[j] { within } else { 0.0 };
            base + jitter * normal()
        }
    });
    ScoreMatrix::raw(m)
}
