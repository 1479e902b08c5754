//! Sub-batch selection.
//!
//! The joint samplers approximate sampling a sub-batch `S` of a super-batch
//! with probability proportional to `exp(Σ_{i,j ∈ S} scores(i, j))`. They
//! build `S` in `n_chunks` chunks: the first from the diagonal scores alone,
//! each later one conditioned on everything drawn so far. Items within a chunk
//! are drawn without replacement by sequential, renormalized categorical
//! draws.
//!
//! The baselines (independent and uniform) and two oracles (a single-swap
//! Metropolis chain and exact enumeration for tiny super-batches) are used to
//! validate the chunked samplers.

use rand::seq::index;
use rand::Rng;

use crate::contrastive::{
    logits_raw, softmax_from_logits, ContrastiveParams, EmbeddingBatch, LossKind, MASK_PENALTY,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scoring::{ScoreMatrix, ScoringMethod, DEFAULT_GAIN};

/// Largest number of subsets [`enumerate_exact`] will visit.
pub const MAX_ENUMERATION: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub n_chunks: usize,
    /// Fraction of the super-batch discarded, `1 - b/B`.
    pub filter_ratio: f64,
    pub method: ScoringMethod,
    pub gain: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n_chunks: 16,
            filter_ratio: 0.8,
            method: ScoringMethod::Learnability,
            gain: DEFAULT_GAIN,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chunks == 0 {
            return Err(Error::InvalidArgument("n_chunks must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.filter_ratio) {
            return Err(Error::InvalidArgument(format!(
                "filter ratio must lie in [0, 1), got {}",
                self.filter_ratio
            )));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gain must be positive, got {}",
                self.gain
            )));
        }
        Ok(())
    }

    /// Items drawn per chunk for a super-batch of `super_batch` items.
    ///
    /// The nominal sub-batch size is `round(B * (1 - f))`; it is truncated to
    /// a multiple of `n_chunks`, and a chunk size of zero is an error.
    pub fn chunk_size(&self, super_batch: usize) -> Result<usize> {
        self.validate()?;
        let nominal = (super_batch as f64 * (1.0 - self.filter_ratio)).round() as usize;
        let chunk = nominal / self.n_chunks;
        if chunk == 0 {
            return Err(Error::InvalidArgument(format!(
                "a super-batch of {super_batch} at filter ratio {} keeps {nominal} items, \
                 fewer than the {} chunks",
                self.filter_ratio, self.n_chunks
            )));
        }
        Ok(chunk)
    }

    /// Sub-batch size `b` for a super-batch of `super_batch` items.
    pub fn sub_batch_size(&self, super_batch: usize) -> Result<usize> {
        Ok(self.chunk_size(super_batch)? * self.n_chunks)
    }
}

/// Indices selected from a super-batch and their joint score.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBatchSelection {
    pub indices: Vec<usize>,
    pub joint_score: f64,
}

impl SubBatchSelection {
    pub fn from_indices(scores: &ScoreMatrix, indices: Vec<usize>) -> Result<Self> {
        let joint_score = joint_score(scores, &indices)?;
        Ok(SubBatchSelection {
            indices,
            joint_score,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_indices(n: usize, indices: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for a super-batch of {n}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

fn submatrix_sum(scores: &Matrix, indices: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in indices {
        let row = scores.row(i);
        for &j in indices {
            total += row[j];
        }
    }
    total
}

/// `(1/b) Σ_{i,j ∈ indices} scores(i, j)`.
pub fn joint_score(scores: &ScoreMatrix, indices: &[usize]) -> Result<f64> {
    check_indices(scores.n(), indices)?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty index set".into()));
    }
    Ok(submatrix_sum(scores.values(), indices) / indices.len() as f64)
}

/// Draws `count` distinct items with probability proportional to
/// `exp(logits)`, renormalizing after every draw. Drawn items receive the
/// `-MASK_PENALTY` treatment in `logits`.
fn draw_chunk<R: Rng + ?Sized>(
    logits: &mut [f64],
    count: usize,
    rng: &mut R,
    out: &mut Vec<usize>,
) {
    let mut weights = vec![0.0; logits.len()];
    let mut fresh = true;
    for _ in 0..count {
        let mut total: f64 = 0.0;
        if !fresh {
            for &w in &weights {
                total += w;
            }
        }
        // Re-derive the weights in the log domain when the remaining mass has
        // underflowed (or on the first draw of the chunk).
        if fresh || !(total.is_normal()) {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            total = 0.0;
            for (w, &l) in weights.iter_mut().zip(logits.iter()) {
                *w = (l - max).exp();
                total += *w;
            }
            fresh = false;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("at least one item with positive weight");
        out.push(pick);
        logits[pick] -= MASK_PENALTY;
        weights[pick] = 0.0;
    }
}

fn check_scores(scores: &ScoreMatrix) -> Result<()> {
    if !scores.values().is_finite() {
        return Err(Error::NonFinite("score matrix"));
    }
    Ok(())
}

/// One chunk of a joint sample: the items drawn and the conditional logit of
/// each at the time it was drawn (diagonal plus interactions with earlier
/// chunks, before masking).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTrace {
    pub indices: Vec<usize>,
    pub conditional: Vec<f64>,
}

/// Joint example selection for the sigmoid loss.
pub fn jointly_sample_sigmoid<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    Ok(jointly_sample_sigmoid_traced(scores, cfg, rng)?.0)
}

/// [`jointly_sample_sigmoid`] that also reports per-chunk conditional logits.
pub fn jointly_sample_sigmoid_traced<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<(SubBatchSelection, Vec<ChunkTrace>)> {
    check_scores(scores)?;
    let n = scores.n();
    let chunk = cfg.chunk_size(n)?;
    let b = chunk * cfg.n_chunks;
    if b > n {
        return Err(Error::InvalidArgument(format!(
            "sub-batch of {b} exceeds the super-batch of {n}"
        )));
    }
    if b == n {
        let all: Vec<usize> = (0..n).collect();
        let trace = ChunkTrace {
            indices: all.clone(),
            conditional: scores.values().diag(),
        };
        return Ok((SubBatchSelection::from_indices(scores, all)?, vec![trace]));
    }

    let m = scores.values();
    let diag = m.diag();
    // cross[c] = Σ_{s sampled} m(s, c) + m(c, s)
    let mut cross = vec![0.0; n];
    let mut sampled = vec![false; n];
    let mut indices = Vec::with_capacity(b);
    let mut traces = Vec::with_capacity(cfg.n_chunks);
    let mut logits = vec![0.0; n];

    for _ in 0..cfg.n_chunks {
        for c in 0..n {
            let conditional = diag[c] + cross[c];
            logits[c] = if sampled[c] {
                conditional - MASK_PENALTY
            } else {
                conditional
            };
        }
        let start = indices.len();
        draw_chunk(&mut logits, chunk, rng, &mut indices);
        let new = &indices[start..];
        traces.push(ChunkTrace {
            indices: new.to_vec(),
            conditional: new.iter().map(|&c| diag[c] + cross[c]).collect(),
        });
        for &s in new {
            sampled[s] = true;
            let row = m.row(s);
            for c in 0..n {
                cross[c] += row[c] + m.get(c, s);
            }
        }
    }
    Ok((SubBatchSelection::from_indices(scores, indices)?, traces))
}

/// Joint example selection for the softmax loss. The conditional scores are
/// recomputed for every chunk with the log-sum-exp restricted to the items
/// already drawn.
pub fn jointly_sample_softmax<R: Rng + ?Sized>(
    learner: &EmbeddingBatch,
    reference: &EmbeddingBatch,
    learner_params: &ContrastiveParams,
    reference_params: &ContrastiveParams,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    if cfg.method != ScoringMethod::Learnability {
        return Err(Error::InvalidArgument(format!(
            "softmax joint selection only supports learnability scoring, got {}",
            cfg.method.as_str()
        )));
    }
    if learner.n() != reference.n() {
        return Err(Error::Shape(format!(
            "learner batch has {} rows, reference batch has {}",
            learner.n(),
            reference.n()
        )));
    }
    let n = learner.n();
    let chunk = cfg.chunk_size(n)?;
    let b = chunk * cfg.n_chunks;
    let learner_logits = logits_raw(
        learner.image(),
        learner.text(),
        learner_params,
        LossKind::Softmax,
    )?;
    let reference_logits = logits_raw(
        reference.image(),
        reference.text(),
        reference_params,
        LossKind::Softmax,
    )?;
    let gain = cfg.gain;
    let pair_scores = Matrix::from_fn(n, n, |i, j| {
        gain * (-learner_logits.get(i, j) + reference_logits.get(i, j))
    });
    let scores = ScoreMatrix::new(pair_scores, ScoringMethod::Learnability, gain)?;
    if b > n {
        return Err(Error::InvalidArgument(format!(
            "sub-batch of {b} exceeds the super-batch of {n}"
        )));
    }
    if b == n {
        return SubBatchSelection::from_indices(&scores, (0..n).collect());
    }

    let diag = scores.values().diag();
    let mut sampled = vec![false; n];
    let mut indices = Vec::with_capacity(b);
    let mut logits = diag.clone();
    draw_chunk(&mut logits, chunk, rng, &mut indices);
    for _ in 1..cfg.n_chunks {
        for &i in &indices {
            sampled[i] = true;
        }
        let learner_neg = softmax_from_logits(&learner_logits, Some(&sampled))?.neg_logits;
        let reference_neg = softmax_from_logits(&reference_logits, Some(&sampled))?.neg_logits;
        for c in 0..n {
            let rho = gain * (learner_neg[c] - reference_neg[c]);
            logits[c] = diag[c] + rho - if sampled[c] { MASK_PENALTY } else { 0.0 };
        }
        draw_chunk(&mut logits, chunk, rng, &mut indices);
    }
    SubBatchSelection::from_indices(&scores, indices)
}

/// Baseline: `b` items drawn without replacement with probability
/// proportional to `exp(diagonal score)`, ignoring interactions.
pub fn independent_sample<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    check_scores(scores)?;
    let n = scores.n();
    let b = cfg.sub_batch_size(n)?;
    if b > n {
        return Err(Error::InvalidArgument(format!(
            "sub-batch of {b} exceeds the super-batch of {n}"
        )));
    }
    if b == n {
        return SubBatchSelection::from_indices(scores, (0..n).collect());
    }
    let mut logits = scores.values().diag();
    let mut indices = Vec::with_capacity(b);
    draw_chunk(&mut logits, b, rng, &mut indices);
    SubBatchSelection::from_indices(scores, indices)
}

/// `b` distinct indices drawn uniformly from `0..super_batch`. When
/// `b == super_batch` the identity ordering is returned without touching the
/// generator.
pub fn uniform_sample<R: Rng + ?Sized>(
    super_batch: usize,
    b: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if b > super_batch {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {b} items from {super_batch}"
        )));
    }
    if b == super_batch {
        return Ok((0..super_batch).collect());
    }
    Ok(index::sample(rng, super_batch, b).into_vec())
}

/// [`uniform_sample`] scored against `scores`, with `b` taken from `cfg`.
pub fn uniform_select<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    let b = cfg.sub_batch_size(scores.n())?;
    let indices = uniform_sample(scores.n(), b, rng)?;
    SubBatchSelection::from_indices(scores, indices)
}

/// Metropolis chain over `b`-subsets whose stationary distribution is
/// `p(S) ∝ exp(Σ_{i,j ∈ S} scores(i, j))`.
///
/// Starts from a uniform subset. Each proposal swaps a uniformly chosen member
/// for a uniformly chosen non-member; one sweep is `b` proposals.
pub fn gibbs_oracle<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    b: usize,
    n_sweeps: usize,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    check_scores(scores)?;
    let n = scores.n();
    if b == 0 || b > n {
        return Err(Error::InvalidArgument(format!(
            "sub-batch size {b} must lie in 1..={n}"
        )));
    }
    if n_sweeps == 0 {
        return Err(Error::InvalidArgument("n_sweeps must be at least 1".into()));
    }
    let mut members = uniform_sample(n, b, rng)?;
    if b == n {
        return SubBatchSelection::from_indices(scores, members);
    }
    let m = scores.values();
    let mut in_set = vec![false; n];
    for &i in &members {
        in_set[i] = true;
    }
    let mut outsiders: Vec<usize> = (0..n).filter(|&i| !in_set[i]).collect();
    let mut cross = vec![0.0; n];
    for &s in &members {
        let row = m.row(s);
        for c in 0..n {
            cross[c] += row[c] + m.get(c, s);
        }
    }

    for _ in 0..n_sweeps {
        for _ in 0..b {
            let p = rng.random_range(0..b);
            let q = rng.random_range(0..outsiders.len());
            let (out, inn) = (members[p], outsiders[q]);
            let delta =
                -cross[out] + m.get(out, out) + cross[inn] - m.get(out, inn) - m.get(inn, out)
                    + m.get(inn, inn);
            let accept = delta >= 0.0 || rng.random::<f64>() < delta.exp();
            if accept {
                members[p] = inn;
                outsiders[q] = out;
                let row_in = m.row(inn);
                let row_out = m.row(out);
                for c in 0..n {
                    cross[c] += row_in[c] + m.get(c, inn) - row_out[c] - m.get(c, out);
                }
            }
        }
    }
    SubBatchSelection::from_indices(scores, members)
}

/// Exact probability of one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetProbability {
    pub indices: Vec<usize>,
    pub probability: f64,
}

fn binomial(n: usize, k: usize) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u64)? / (i as u64 + 1);
    }
    Some(acc)
}

/// Every `b`-subset of the super-batch with its probability under
/// `p(S) ∝ exp(Σ_{i,j ∈ S} scores(i, j))`, in lexicographic order.
pub fn enumerate_exact(scores: &ScoreMatrix, b: usize) -> Result<Vec<SubsetProbability>> {
    check_scores(scores)?;
    let n = scores.n();
    if b == 0 || b > n {
        return Err(Error::InvalidArgument(format!(
            "sub-batch size {b} must lie in 1..={n}"
        )));
    }
    match binomial(n, b) {
        Some(count) if count <= MAX_ENUMERATION => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "C({n}, {b}) exceeds the enumeration limit of {MAX_ENUMERATION}"
            )))
        }
    }
    let mut subsets = Vec::new();
    let mut log_weights = Vec::new();
    let mut combo: Vec<usize> = (0..b).collect();
    loop {
        log_weights.push(submatrix_sum(scores.values(), &combo));
        subsets.push(combo.clone());
        // next combination
        let mut k = b;
        loop {
            if k == 0 {
                let lse = crate::contrastive::logsumexp(log_weights.iter().copied());
                return Ok(subsets
                    .into_iter()
                    .zip(log_weights)
                    .map(|(indices, lw)| SubsetProbability {
                        indices,
                        probability: (lw - lse).exp(),
                    })
                    .collect());
            }
            k -= 1;
            if combo[k] < n - b + k {
                combo[k] += 1;
                for j in k + 1..b {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}
