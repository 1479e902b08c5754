//! A small dual-encoder contrastive trainer driven by online batch selection.
//!
//! Each step scores a super-batch with the learner and the cached reference
//! embeddings, selects a sub-batch, and takes one Adam step on the selected
//! pairs. A fraction of the sub-batch can be routed through a cheaper
//! approximate image encoder (multi-resolution training); the loss is computed
//! over the concatenation of full and approximate embeddings.
//!
//! Encoders are single linear maps followed by L2 normalization, so all
//! gradients are written out by hand.

mod adam;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, AdamConfig, AdamReport, AdamState, LrSchedule};

use crate::contrastive::{
    grad_sigmoid_nll_raw, grad_softmax_nll_raw, normalize_rows, sigmoid_nll_raw, softmax_nll_raw,
    ContrastiveParams, EmbeddingBatch, LossKind,
};
use crate::envelope::{self, Envelope};
use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::matrix::{dot, norm, Matrix};
use crate::sampler::{self, SelectionConfig, SubBatchSelection};
use crate::scoring::{build_scores, ReferenceCache, ScoreMatrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"JESTCKPT";

/// Raw paired inputs, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs {
    pub image: Matrix,
    pub text: Matrix,
}

impl PairInputs {
    pub fn new(image: Matrix, text: Matrix) -> Result<Self> {
        if image.rows() != text.rows() {
            return Err(Error::Shape(format!(
                "{} image rows but {} text rows",
                image.rows(),
                text.rows()
            )));
        }
        Ok(PairInputs { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> PairInputs {
        PairInputs {
            image: self.image.select_rows(rows),
            text: self.text.select_rows(rows),
        }
    }
}

/// Learner or reference parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    /// `input_dim × d`
    pub image_weights: Matrix,
    /// `input_dim × d`
    pub text_weights: Matrix,
    pub head: ContrastiveParams,
}

impl DualEncoderParams {
    pub fn new(
        image_weights: Matrix,
        text_weights: Matrix,
        head: ContrastiveParams,
    ) -> Result<Self> {
        if image_weights.shape() != text_weights.shape() {
            return Err(Error::Shape(format!(
                "image weights are {:?}, text weights are {:?}",
                image_weights.shape(),
                text_weights.shape()
            )));
        }
        if !image_weights.is_finite() || !text_weights.is_finite() {
            return Err(Error::NonFinite("encoder weights"));
        }
        head.validate()?;
        Ok(DualEncoderParams {
            image_weights,
            text_weights,
            head,
        })
    }

    /// Gaussian initialization with variance `1 / input_dim`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dim: usize,
        head: ContrastiveParams,
        rng: &mut R,
    ) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, (1.0 / input_dim as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let image = Matrix::from_fn(input_dim, embed_dim, |_, _| normal.sample(rng));
        let text = Matrix::from_fn(input_dim, embed_dim, |_, _| normal.sample(rng));
        Self::new(image, text, head)
    }

    pub fn input_dim(&self) -> usize {
        self.image_weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_weights.cols()
    }

    /// Optimizer view: weights, then `ln alpha`, `beta`, `ln t`.
    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.image_weights.as_slice());
        v.extend_from_slice(self.text_weights.as_slice());
        v.push(self.head.alpha.ln());
        v.push(self.head.beta);
        v.push(self.head.t.ln());
        v
    }

    fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let w = self.image_weights.as_slice().len();
        let (r, c) = self.image_weights.shape();
        // exp(ln x) is not always x; keep untouched values bit-identical.
        let unlog = |log: f64, old: f64| if log == old.ln() { old } else { log.exp() };
        let head = ContrastiveParams {
            alpha: unlog(flat[2 * w], self.head.alpha),
            beta: flat[2 * w + 1],
            t: unlog(flat[2 * w + 2], self.head.t),
        };
        Self::new(
            Matrix::from_vec(r, c, flat[..w].to_vec())?,
            Matrix::from_vec(r, c, flat[w..2 * w].to_vec())?,
            head,
        )
    }

    pub fn num_params(&self) -> usize {
        2 * self.image_weights.as_slice().len() + 3
    }

    /// Abstract cost of one forward pass on one example (both encoders).
    pub fn forward_flops(&self) -> f64 {
        4.0 * (self.input_dim() * self.embed_dim()) as f64
    }

    /// Checkpoints reuse the reference-cache envelope; weights are stored at
    /// 32-bit precision.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        envelope::encode(CHECKPOINT_MAGIC, &self.envelope())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_envelope(envelope::decode(CHECKPOINT_MAGIC, bytes)?)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        envelope::write_file(path.as_ref(), CHECKPOINT_MAGIC, &self.envelope())
    }

    pub fn read_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_envelope(envelope::read_file(path.as_ref(), CHECKPOINT_MAGIC)?)
    }

    fn envelope(&self) -> Envelope {
        let f32s = |m: &Matrix| m.as_slice().iter().map(|&v| v as f32).collect();
        Envelope {
            n: self.input_dim(),
            d: self.embed_dim(),
            first: f32s(&self.image_weights),
            second: f32s(&self.text_weights),
            params: [self.head.alpha, self.head.beta, self.head.t],
        }
    }

    fn from_envelope(env: Envelope) -> Result<Self> {
        let f64s = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
        let [alpha, beta, t] = env.params;
        Self::new(
            Matrix::from_vec(env.n, env.d, f64s(env.first))?,
            Matrix::from_vec(env.n, env.d, f64s(env.second))?,
            ContrastiveParams::new(alpha, beta, t)?,
        )
    }
}

/// Which cheap image encoder stands in for the full one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproxKind {
    /// Average adjacent input features and sum the matching weight rows.
    Coarsen,
    /// Keep a random half of the input features, rescaled by two.
    FeatureDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Full,
    Coarse,
    /// Feature subset chosen by the seed.
    FeatureDrop(u64),
}

impl Resolution {
    fn approximate(kind: ApproxKind, seed: u64) -> Self {
        match kind {
            ApproxKind::Coarsen => Resolution::Coarse,
            ApproxKind::FeatureDrop => Resolution::FeatureDrop(seed),
        }
    }
}

/// An effective linear image encoder: `x_eff · W_eff`, where row `k` of
/// `W_eff` is the sum of the weight rows listed in `groups[k]`.
struct ImagePath {
    inputs: Matrix,
    groups: Vec<Vec<usize>>,
}

impl ImagePath {
    fn new(x: &Matrix, resolution: Resolution) -> Result<Self> {
        let dim = x.cols();
        match resolution {
            Resolution::Full => Ok(ImagePath {
                inputs: x.clone(),
                groups: (0..dim).map(|k| vec![k]).collect(),
            }),
            Resolution::Coarse => {
                if !dim.is_multiple_of(2) {
                    return Err(Error::Shape(format!(
                        "coarsening needs an even input dimension, got {dim}"
                    )));
                }
                let half = dim / 2;
                let inputs = Matrix::from_fn(x.rows(), half, |i, k| {
                    0.5 * (x.get(i, 2 * k) + x.get(i, 2 * k + 1))
                });
                Ok(ImagePath {
                    inputs,
                    groups: (0..half).map(|k| vec![2 * k, 2 * k + 1]).collect(),
                })
            }
            Resolution::FeatureDrop(seed) => {
                use rand::SeedableRng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep_n = dim.div_ceil(2);
                let mut keep = rand::seq::index::sample(&mut rng, dim, keep_n).into_vec();
                keep.sort_unstable();
                let scale = dim as f64 / keep_n as f64;
                let inputs = Matrix::from_fn(x.rows(), keep_n, |i, k| scale * x.get(i, keep[k]));
                Ok(ImagePath {
                    inputs,
                    groups: keep.into_iter().map(|k| vec![k]).collect(),
                })
            }
        }
    }

    fn weights(&self, w: &Matrix) -> Matrix {
        let d = w.cols();
        let mut out = Matrix::zeros(self.groups.len(), d);
        for (k, group) in self.groups.iter().enumerate() {
            let dst = out.row_mut(k);
            for &r in group {
                for (o, &v) in dst.iter_mut().zip(w.row(r)) {
                    *o += v;
                }
            }
        }
        out
    }

    fn forward(&self, w: &Matrix) -> Result<Matrix> {
        self.inputs.matmul(&self.weights(w))
    }

    /// Accumulates `dL/dW` given `dL/dy`.
    fn backward(&self, grad_y: &Matrix, grad_w: &mut Matrix) -> Result<()> {
        let g_eff = self.inputs.transpose_matmul(grad_y)?;
        for (k, group) in self.groups.iter().enumerate() {
            for &r in group {
                for (dst, &g) in grad_w.row_mut(r).iter_mut().zip(g_eff.row(k)) {
                    *dst += g;
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(params: &DualEncoderParams, inputs: &PairInputs) -> Result<()> {
    if inputs.image.cols() != params.input_dim() || inputs.text.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} image and {} text features, encoders expect {}",
            inputs.image.cols(),
            inputs.text.cols(),
            params.input_dim()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Shape("no inputs".into()));
    }
    Ok(())
}

/// Embeds a batch. Only the image encoder has an approximate path; text is
/// always encoded at full cost.
pub fn encode(
    params: &DualEncoderParams,
    inputs: &PairInputs,
    resolution: Resolution,
) -> Result<EmbeddingBatch> {
    check_inputs(params, inputs)?;
    let image = ImagePath::new(&inputs.image, resolution)?.forward(&params.image_weights)?;
    let text = inputs.text.matmul(&params.text_weights)?;
    EmbeddingBatch::new(image, text)
}

/// How the sub-batch is chosen from the super-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    Uniform,
    Joint,
    Independent,
}

/// Which cost formula to account FLOPs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopScheme {
    Iid,
    Jest,
    FlexiJest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub super_batch: usize,
    pub sub_batch: usize,
    pub selection: SelectionConfig,
    pub policy: SelectionPolicy,
    pub loss: LossKind,
    /// Fraction of the sub-batch encoded with the approximate image path.
    pub approx_fraction: f64,
    /// FLOP fraction of the approximate path, for accounting.
    pub approx_factor: f64,
    pub approx_kind: ApproxKind,
    /// Score the super-batch with the approximate image path.
    pub approx_scoring: bool,
    pub flop_scheme: FlopScheme,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            super_batch: 160,
            sub_batch: 32,
            selection: SelectionConfig {
                n_chunks: 4,
                filter_ratio: 0.8,
                ..Default::default()
            },
            policy: SelectionPolicy::Joint,
            loss: LossKind::Sigmoid,
            approx_fraction: 0.0,
            approx_factor: crate::flops::DEFAULT_APPROX_FLOPS,
            approx_kind: ApproxKind::Coarsen,
            approx_scoring: false,
            flop_scheme: FlopScheme::Jest,
            learning_rate: 1e-3,
            warmup_fraction: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sub_batch == 0 || self.sub_batch > self.super_batch {
            return Err(Error::InvalidArgument(format!(
                "need 0 < b <= B, got b={} B={}",
                self.sub_batch, self.super_batch
            )));
        }
        if self.policy != SelectionPolicy::Uniform {
            let b = self.selection.sub_batch_size(self.super_batch)?;
            if b != self.sub_batch {
                return Err(Error::InvalidArgument(format!(
                    "filter ratio {} with {} chunks selects {b} of {}, not the configured {}",
                    self.selection.filter_ratio,
                    self.selection.n_chunks,
                    self.super_batch,
                    self.sub_batch
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.approx_fraction) {
            return Err(Error::InvalidArgument(format!(
                "approximate fraction must lie in [0, 1], got {}",
                self.approx_fraction
            )));
        }
        let approx_items = self.approx_fraction * self.sub_batch as f64;
        if (approx_items - approx_items.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "approximate fraction {} does not split a sub-batch of {} evenly",
                self.approx_fraction, self.sub_batch
            )));
        }
        if !(self.approx_factor > 0.0 && self.approx_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "approximation factor must lie in (0, 1], got {}",
                self.approx_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction)
            || self.learning_rate.is_nan()
            || self.learning_rate < 0.0
        {
            return Err(Error::InvalidArgument(
                "warmup fraction must lie in [0, 1] and the learning rate be non-negative".into(),
            ));
        }
        self.adam.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.steps,
        }
    }

    /// Positions of the sub-batch that go through the approximate encoder:
    /// position `k` is approximate when `floor((k+1)λ) > floor(kλ)`, which for
    /// `λ = 0.5` is every odd position.
    pub fn approx_positions(&self) -> Vec<bool> {
        let lambda = self.approx_fraction;
        (0..self.sub_batch)
            .map(|k| ((k + 1) as f64 * lambda).floor() > (k as f64 * lambda).floor())
            .collect()
    }

    pub fn flop_model(&self, forward: f64) -> Result<FlopModel> {
        FlopModel::new(
            forward,
            self.super_batch,
            self.sub_batch,
            self.approx_factor,
            self.approx_fraction,
        )
    }

    /// FLOPs of one training step.
    pub fn step_flops(&self, forward: f64) -> Result<f64> {
        let m = self.flop_model(forward)?;
        let per_example = match self.flop_scheme {
            FlopScheme::Iid => m.cost_iid(),
            FlopScheme::Jest => m.cost_jest(),
            FlopScheme::FlexiJest => m.cost_flexi(),
        };
        Ok(per_example * self.sub_batch as f64)
    }
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    /// Loss of the selected sub-batch before the update.
    pub loss: f64,
    /// Joint score of the selection; NaN when nothing was scored.
    pub mean_selected_score: f64,
    pub eval_i2t_top1: Option<f64>,
    pub eval_t2i_top1: Option<f64>,
    pub cumulative_flops: f64,
    pub skipped: bool,
}

/// A super-batch: inputs plus their dataset row ids (for the reference cache).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperBatch {
    pub inputs: PairInputs,
    pub ids: Vec<usize>,
}

/// Scores the super-batch and picks the sub-batch. Nothing here feeds
/// gradients; only the returned indices are used downstream.
pub fn select_sub_batch<R: Rng + ?Sized>(
    learner: &DualEncoderParams,
    reference: Option<&ReferenceCache>,
    batch: &SuperBatch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SubBatchSelection> {
    let n = batch.inputs.len();
    if n != cfg.super_batch || batch.ids.len() != n {
        return Err(Error::Shape(format!(
            "expected a super-batch of {} with matching ids, got {} inputs and {} ids",
            cfg.super_batch,
            n,
            batch.ids.len()
        )));
    }
    let Some(reference) = reference else {
        if cfg.policy != SelectionPolicy::Uniform {
            return Err(Error::InvalidArgument(
                "model-based selection needs a reference cache".into(),
            ));
        }
        let indices = sampler::uniform_sample(n, cfg.sub_batch, rng)?;
        return Ok(SubBatchSelection {
            indices,
            joint_score: f64::NAN,
        });
    };
    if reference.dim() != learner.embed_dim() {
        return Err(Error::Shape(format!(
            "reference embeddings have dimension {}, learner {}",
            reference.dim(),
            learner.embed_dim()
        )));
    }
    let scoring_resolution = if cfg.approx_scoring {
        // The scoring pass draws its own feature subset, if any.
        Resolution::approximate(cfg.approx_kind, rng.random())
    } else {
        Resolution::Full
    };
    let learner_embeds = encode(learner, &batch.inputs, scoring_resolution)?;
    let reference_embeds = reference.batch(&batch.ids)?;
    let sel = &cfg.selection;

    if cfg.loss == LossKind::Softmax
        && cfg.policy == SelectionPolicy::Joint
        && sel.method == crate::scoring::ScoringMethod::Learnability
    {
        return sampler::jointly_sample_softmax(
            &learner_embeds,
            &reference_embeds,
            &learner.head,
            reference.params(),
            sel,
            rng,
        );
    }
    let scores = score_matrix(learner, &learner_embeds, reference, &reference_embeds, cfg)?;
    match cfg.policy {
        SelectionPolicy::Uniform => {
            let indices = sampler::uniform_sample(n, cfg.sub_batch, rng)?;
            SubBatchSelection::from_indices(&scores, indices)
        }
        SelectionPolicy::Joint => sampler::jointly_sample_sigmoid(&scores, sel, rng),
        SelectionPolicy::Independent => sampler::independent_sample(&scores, sel, rng),
    }
}

fn score_matrix(
    learner: &DualEncoderParams,
    learner_embeds: &EmbeddingBatch,
    reference: &ReferenceCache,
    reference_embeds: &EmbeddingBatch,
    cfg: &TrainConfig,
) -> Result<ScoreMatrix> {
    let (l, r) = match cfg.loss {
        LossKind::Sigmoid => (
            crate::contrastive::sigmoid_nll(&learner.head, learner_embeds)?.matrix,
            crate::contrastive::sigmoid_nll(reference.params(), reference_embeds)?.matrix,
        ),
        LossKind::Softmax => (
            crate::contrastive::softmax_nll(&learner.head, learner_embeds, None)?.neg_logits_matrix,
            crate::contrastive::softmax_nll(reference.params(), reference_embeds, None)?
                .neg_logits_matrix,
        ),
    };
    build_scores(&l, &r, cfg.selection.method, cfg.selection.gain)
}

/// Loss and flattened gradient of the learner on a sub-batch.
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn normalize_backward(y: &Matrix, grad_z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let row = y.row(i);
        let len = norm(row);
        // Zero rows were replaced by a constant vector; nothing flows back.
        if !(len > 0.0 && len.is_finite()) {
            continue;
        }
        let g = grad_z.row(i);
        let proj = dot(g, row) / len;
        for ((o, &gi), &yi) in out.row_mut(i).iter_mut().zip(g).zip(row) {
            *o = (gi - proj * yi / len) / len;
        }
    }
    out
}

/// Loss and gradient on `inputs`, with `approx[k]` routing row `k` through
/// the approximate image path. Embeddings are concatenated full rows first,
/// then approximate rows.
pub fn loss_and_grad(
    params: &DualEncoderParams,
    inputs: &PairInputs,
    approx: &[bool],
    approx_resolution: Resolution,
    loss: LossKind,
) -> Result<LossAndGrad> {
    check_inputs(params, inputs)?;
    let full_rows: Vec<usize> = (0..inputs.len()).filter(|&k| !approx[k]).collect();
    let approx_rows: Vec<usize> = (0..inputs.len()).filter(|&k| approx[k]).collect();
    let order: Vec<usize> = full_rows.iter().chain(&approx_rows).copied().collect();

    let full_path = ImagePath::new(&inputs.image.select_rows(&full_rows), Resolution::Full)?;
    let approx_path = ImagePath::new(&inputs.image.select_rows(&approx_rows), approx_resolution)?;
    let y_full = full_path.forward(&params.image_weights)?;
    let y_approx = approx_path.forward(&params.image_weights)?;
    let y_image = y_full.vstack(&y_approx)?;
    let x_text = inputs.text.select_rows(&order);
    let y_text = x_text.matmul(&params.text_weights)?;

    let mut z_image = y_image.clone();
    let mut z_text = y_text.clone();
    normalize_rows(&mut z_image);
    normalize_rows(&mut z_text);

    let head = &params.head;
    let (value, g) = match loss {
        LossKind::Sigmoid => (
            sigmoid_nll_raw(&z_image, &z_text, head)?.loss,
            grad_sigmoid_nll_raw(&z_image, &z_text, head)?,
        ),
        LossKind::Softmax => (
            softmax_nll_raw(&z_image, &z_text, head, None)?.loss,
            grad_softmax_nll_raw(&z_image, &z_text, head)?,
        ),
    };

    let gy_image = normalize_backward(&y_image, &g.image);
    let gy_text = normalize_backward(&y_text, &g.text);
    let n_full = full_rows.len();
    let gy_full = gy_image.select_rows(&(0..n_full).collect::<Vec<_>>());
    let gy_approx = gy_image.select_rows(&(n_full..order.len()).collect::<Vec<_>>());

    let (r, c) = params.image_weights.shape();
    let mut g_image_w = Matrix::zeros(r, c);
    full_path.backward(&gy_full, &mut g_image_w)?;
    approx_path.backward(&gy_approx, &mut g_image_w)?;
    let g_text_w = x_text.transpose_matmul(&gy_text)?;

    let mut grad = Vec::with_capacity(params.num_params());
    grad.extend_from_slice(g_image_w.as_slice());
    grad.extend_from_slice(g_text_w.as_slice());
    grad.push(g.alpha * head.alpha);
    grad.push(g.beta);
    grad.push(g.t * head.t);
    Ok(LossAndGrad { loss: value, grad })
}

/// Trains on already-selected rows of the super-batch.
#[allow(clippy::too_many_arguments)]
pub fn update_on_selection<R: Rng + ?Sized>(
    learner: &DualEncoderParams,
    batch: &SuperBatch,
    selection: &SubBatchSelection,
    cfg: &TrainConfig,
    optimizer: &AdamState,
    step: usize,
    rng: &mut R,
) -> Result<(DualEncoderParams, AdamState, TrainMetrics)> {
    let inputs = batch.inputs.select(&selection.indices);
    let approx = cfg.approx_positions();
    let approx_resolution = Resolution::approximate(cfg.approx_kind, rng.random());
    let lg = loss_and_grad(learner, &inputs, &approx, approx_resolution, cfg.loss)?;

    let mut flat = learner.to_flat();
    let mut state = optimizer.clone();
    let report = adam_update(
        &mut flat,
        &mut state,
        &lg.grad,
        cfg.schedule().at(step),
        &cfg.adam,
    )?;
    let updated = if report.skipped {
        learner.clone()
    } else {
        learner.with_flat(&flat)?
    };
    let per_step = cfg.step_flops(learner.forward_flops())?;
    let metrics = TrainMetrics {
        step,
        loss: lg.loss,
        mean_selected_score: selection.joint_score,
        eval_i2t_top1: None,
        eval_t2i_top1: None,
        cumulative_flops: (step + 1) as f64 * per_step,
        skipped: report.skipped,
    };
    Ok((updated, state, metrics))
}

/// One training step: score, select, update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    learner: &DualEncoderParams,
    reference: Option<&ReferenceCache>,
    batch: &SuperBatch,
    cfg: &TrainConfig,
    optimizer: &AdamState,
    step: usize,
    rng: &mut R,
) -> Result<(DualEncoderParams, AdamState, TrainMetrics)> {
    let selection = select_sub_batch(learner, reference, batch, cfg, rng)?;
    update_on_selection(learner, batch, &selection, cfg, optimizer, step, rng)
}

/// Top-1 retrieval accuracy in both directions over held-out pairs. A pair
/// counts only when its partner strictly beats every other candidate.
pub fn evaluate(learner: &DualEncoderParams, holdout: &PairInputs) -> Result<(f64, f64)> {
    if holdout.is_empty() {
        return Err(Error::InvalidArgument("empty holdout".into()));
    }
    let emb = encode(learner, holdout, Resolution::Full)?;
    let sims = emb.image().matmul_transposed(emb.text())?;
    let n = holdout.len();
    let mut i2t = 0usize;
    let mut t2i = 0usize;
    for i in 0..n {
        let own = sims.get(i, i);
        if (0..n).all(|j| j == i || sims.get(i, j) < own) {
            i2t += 1;
        }
        if (0..n).all(|j| j == i || sims.get(j, i) < own) {
            t2i += 1;
        }
    }
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}
