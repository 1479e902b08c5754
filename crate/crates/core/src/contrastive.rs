//! Pairwise contrastive losses for paired image/text embeddings.
//!
//! Both the sigmoid (pairwise binary) and the softmax (InfoNCE, symmetric)
//! formulations are provided, each as a scalar batch loss plus the per-pair
//! matrix that joint example selection sums over. Analytic gradients are
//! provided for the toy trainer.
//!
//! Sign convention for the sigmoid bias: logits are `alpha * dot + beta`, the
//! positive pair's loss is `-log sigmoid(logit)` and a negative pair's loss is
//! `-log sigmoid(-logit)`.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Penalty added to masked logits before a log-sum-exp.
pub const MASK_PENALTY: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Sigmoid,
    Softmax,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sigmoid => "sigmoid",
            LossKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(LossKind::Sigmoid),
            "softmax" => Ok(LossKind::Softmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss kind `{other}`"
            ))),
        }
    }
}

/// Head parameters: `alpha` scales sigmoid logits, `beta` is the sigmoid
/// bias and `t` is the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveParams {
    pub alpha: f64,
    pub beta: f64,
    pub t: f64,
}

impl ContrastiveParams {
    pub fn new(alpha: f64, beta: f64, t: f64) -> Result<Self> {
        let p = ContrastiveParams { alpha, beta, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.t.is_finite()) {
            return Err(Error::NonFinite("contrastive params"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.t <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.t
            )));
        }
        Ok(())
    }
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            alpha: 10.0,
            beta: -10.0,
            t: 10.0,
        }
    }
}

/// Paired, unit-normalized image and text embeddings.
///
/// Rows are L2-normalized on construction. An all-zero row is replaced by the
/// first basis vector so downstream dot products never see a NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    image: Matrix,
    text: Matrix,
}

impl EmbeddingBatch {
    pub fn new(image: Matrix, text: Matrix) -> Result<Self> {
        if image.shape() != text.shape() {
            return Err(Error::Shape(format!(
                "image embeddings are {}x{} but text embeddings are {}x{}",
                image.rows(),
                image.cols(),
                text.rows(),
                text.cols()
            )));
        }
        if image.rows() == 0 || image.cols() == 0 {
            return Err(Error::Shape("embedding batch must be at least 1x1".into()));
        }
        if !image.is_finite() || !text.is_finite() {
            return Err(Error::NonFinite("embeddings"));
        }
        let mut image = image;
        let mut text = text;
        normalize_rows(&mut image);
        normalize_rows(&mut text);
        Ok(EmbeddingBatch { image, text })
    }

    pub fn from_rows(image: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(image)?, Matrix::from_rows(text)?)
    }

    pub fn n(&self) -> usize {
        self.image.rows()
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    /// Sub-batch made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for batch of {}",
                self.n()
            )));
        }
        Self::new(
            self.image.select_rows(indices),
            self.text.select_rows(indices),
        )
    }
}

/// Normalizes each row in place; zero rows become `e_0`.
pub fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let len = norm(row);
        if len > 0.0 && len.is_finite() {
            for v in row.iter_mut() {
                *v /= len;
            }
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
}

/// Per-pair loss matrix. For the sigmoid kind entry `(i, j)` is the loss of
/// pair `(i, j)`; for the softmax kind it holds the negated logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub values: Matrix,
    pub kind: LossKind,
}

impl LossMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

/// Numerically stable `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty input.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max.is_infinite() {
        return max;
    }
    let mut acc = 0.0;
    for v in values {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

pub(crate) fn check_pair(image: &Matrix, text: &Matrix) -> Result<()> {
    if image.shape() != text.shape() {
        return Err(Error::Shape(format!(
            "image embeddings are {}x{} but text embeddings are {}x{}",
            image.rows(),
            image.cols(),
            text.rows(),
            text.cols()
        )));
    }
    Ok(())
}

pub(crate) fn logits_raw(
    image: &Matrix,
    text: &Matrix,
    params: &ContrastiveParams,
    kind: LossKind,
) -> Result<Matrix> {
    check_pair(image, text)?;
    let dots = image.matmul_transposed(text)?;
    Ok(match kind {
        LossKind::Sigmoid => dots.map(|v| v * params.alpha + params.beta),
        LossKind::Softmax => dots.map(|v| v * params.t),
    })
}

/// Entry `(i, j)` is `alpha * <img_i, txt_j> + beta` for the sigmoid kind and
/// `t * <img_i, txt_j>` for the softmax kind.
pub fn pairwise_logits(
    batch: &EmbeddingBatch,
    params: &ContrastiveParams,
    kind: LossKind,
) -> Result<Matrix> {
    logits_raw(&batch.image, &batch.text, params, kind)
}

/// Sigmoid loss of a batch plus its per-pair matrix.
#[derive(Debug, Clone)]
pub struct SigmoidNll {
    /// Mean over rows of the row sums of `matrix`.
    pub loss: f64,
    pub matrix: LossMatrix,
}

pub(crate) fn sigmoid_nll_raw(
    image: &Matrix,
    text: &Matrix,
    params: &ContrastiveParams,
) -> Result<SigmoidNll> {
    let logits = logits_raw(image, text, params, LossKind::Sigmoid)?;
    let n = logits.rows();
    let nll = Matrix::from_fn(n, n, |i, j| {
        let sign = if i == j { 1.0 } else { -1.0 };
        -log_sigmoid(sign * logits.get(i, j))
    });
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for &v in nll.row(i) {
            row += v;
        }
        total += row;
    }
    Ok(SigmoidNll {
        loss: total / n as f64,
        matrix: LossMatrix {
            values: nll,
            kind: LossKind::Sigmoid,
        },
    })
}

/// Sigmoid contrastive loss: every pair is an independent binary problem,
/// positive on the diagonal and negative elsewhere.
pub fn sigmoid_nll(params: &ContrastiveParams, batch: &EmbeddingBatch) -> Result<SigmoidNll> {
    sigmoid_nll_raw(&batch.image, &batch.text, params)
}

/// Softmax loss of a batch.
#[derive(Debug, Clone)]
pub struct SoftmaxNll {
    /// Mean of `per_example`.
    pub loss: f64,
    /// `0.5 * [(lse_col_i - logit_ii) + (lse_row_i - logit_ii)]`.
    pub per_example: Vec<f64>,
    /// `0.5 * (lse_col_i + lse_row_i)`.
    pub neg_logits: Vec<f64>,
    /// The logits matrix, negated.
    pub neg_logits_matrix: LossMatrix,
}

pub(crate) fn softmax_nll_raw(
    image: &Matrix,
    text: &Matrix,
    params: &ContrastiveParams,
    mask: Option<&[bool]>,
) -> Result<SoftmaxNll> {
    let logits = logits_raw(image, text, params, LossKind::Softmax)?;
    softmax_from_logits(&logits, mask)
}

/// Softmax loss terms from an already scaled logits matrix.
pub(crate) fn softmax_from_logits(logits: &Matrix, mask: Option<&[bool]>) -> Result<SoftmaxNll> {
    let n = logits.rows();
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask has {} entries for a batch of {n}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "mask selects no examples; the negative set is empty".into(),
            ));
        }
    }
    let penalty = |k: usize| match mask {
        Some(m) if !m[k] => MASK_PENALTY,
        _ => 0.0,
    };

    let mut per_example = Vec::with_capacity(n);
    let mut neg_logits = Vec::with_capacity(n);
    for i in 0..n {
        // Column i: image k against text i, over the unmasked images k.
        let lse_col = logsumexp((0..n).map(|k| logits.get(k, i) - penalty(k)));
        // Row i: image i against text k, over the unmasked texts k.
        let lse_row = logsumexp((0..n).map(|k| logits.get(i, k) - penalty(k)));
        let diag = logits.get(i, i);
        per_example.push(0.5 * ((lse_col - diag) + (lse_row - diag)));
        neg_logits.push(0.5 * (lse_col + lse_row));
    }
    let mut total = 0.0;
    for &l in &per_example {
        total += l;
    }
    Ok(SoftmaxNll {
        loss: total / n as f64,
        per_example,
        neg_logits,
        neg_logits_matrix: LossMatrix {
            values: logits.map(|v| -v),
            kind: LossKind::Softmax,
        },
    })
}

/// Symmetric softmax contrastive loss.
///
/// With a mask, the log-sum-exp terms only run over the masked-in examples;
/// the others are suppressed with an additive `-MASK_PENALTY`.
pub fn softmax_nll(
    params: &ContrastiveParams,
    batch: &EmbeddingBatch,
    mask: Option<&[bool]>,
) -> Result<SoftmaxNll> {
    softmax_nll_raw(&batch.image, &batch.text, params, mask)
}

/// Per-example loss of each pair on its own, without any negatives.
///
/// Sigmoid: `softplus(-(alpha * <img_i, txt_i> + beta))`, the diagonal of the
/// sigmoid loss matrix. Softmax: `-alpha * <img_i, txt_i>`.
pub fn unconditional_loss(
    batch: &EmbeddingBatch,
    params: &ContrastiveParams,
    kind: LossKind,
) -> Vec<f64> {
    (0..batch.n())
        .map(|i| {
            let d = dot(batch.image.row(i), batch.text.row(i));
            match kind {
                LossKind::Sigmoid => -log_sigmoid(params.alpha * d + params.beta),
                LossKind::Softmax => -params.alpha * d,
            }
        })
        .collect()
}

/// Gradients of a scalar batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image: Matrix,
    pub text: Matrix,
    pub alpha: f64,
    pub beta: f64,
    pub t: f64,
}

/// Back-propagates `dL/dlogits` through `logits = scale * img · txtᵀ (+ bias)`.
fn backprop_logits(
    image: &Matrix,
    text: &Matrix,
    grad_logits: &Matrix,
    scale: f64,
) -> Result<(Matrix, Matrix, f64)> {
    let mut g_image = grad_logits.matmul(text)?;
    let mut g_text = grad_logits.transpose_matmul(image)?;
    for v in g_image.as_mut_slice() {
        *v *= scale;
    }
    for v in g_text.as_mut_slice() {
        *v *= scale;
    }
    let dots = image.matmul_transposed(text)?;
    let mut g_scale = 0.0;
    for (g, d) in grad_logits.as_slice().iter().zip(dots.as_slice()) {
        g_scale += g * d;
    }
    Ok((g_image, g_text, g_scale))
}

pub(crate) fn grad_sigmoid_nll_raw(
    image: &Matrix,
    text: &Matrix,
    params: &ContrastiveParams,
) -> Result<Gradients> {
    let logits = logits_raw(image, text, params, LossKind::Sigmoid)?;
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    // d(-log sigmoid(m*x))/dx = -m * sigmoid(-m*x)
    let grad_logits = Matrix::from_fn(n, n, |i, j| {
        let m = if i == j { 1.0 } else { -1.0 };
        -m * sigmoid(-m * logits.get(i, j)) * inv_n
    });
    let (g_image, g_text, g_alpha) = backprop_logits(image, text, &grad_logits, params.alpha)?;
    let mut g_beta = 0.0;
    for &g in grad_logits.as_slice() {
        g_beta += g;
    }
    Ok(Gradients {
        image: g_image,
        text: g_text,
        alpha: g_alpha,
        beta: g_beta,
        t: 0.0,
    })
}

/// Analytic gradients of the mean sigmoid loss with respect to the (already
/// normalized) embeddings and the head parameters.
pub fn grad_sigmoid_nll(params: &ContrastiveParams, batch: &EmbeddingBatch) -> Result<Gradients> {
    grad_sigmoid_nll_raw(&batch.image, &batch.text, params)
}

pub(crate) fn grad_softmax_nll_raw(
    image: &Matrix,
    text: &Matrix,
    params: &ContrastiveParams,
) -> Result<Gradients> {
    let logits = logits_raw(image, text, params, LossKind::Softmax)?;
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let lse_col: Vec<f64> = (0..n)
        .map(|j| logsumexp((0..n).map(|k| logits.get(k, j))))
        .collect();
    let lse_row: Vec<f64> = (0..n)
        .map(|i| logsumexp((0..n).map(|k| logits.get(i, k))))
        .collect();
    let grad_logits = Matrix::from_fn(n, n, |i, j| {
        let l = logits.get(i, j);
        let p_col = (l - lse_col[j]).exp();
        let p_row = (l - lse_row[i]).exp();
        let delta = if i == j { 1.0 } else { 0.0 };
        inv_n * (0.5 * (p_col + p_row) - delta)
    });
    let (g_image, g_text, g_t) = backprop_logits(image, text, &grad_logits, params.t)?;
    Ok(Gradients {
        image: g_image,
        text: g_text,
        alpha: 0.0,
        beta: 0.0,
        t: g_t,
    })
}

/// Analytic gradients of the mean softmax loss (no mask).
pub fn grad_softmax_nll(params: &ContrastiveParams, batch: &EmbeddingBatch) -> Result<Gradients> {
    grad_softmax_nll_raw(&batch.image, &batch.text, params)
}
