//! Per-example training cost of IID, JEST and Flexi-JEST updates, in units of
//! one learner forward pass `F`.
//!
//! A training step on one example costs `3F` (forward plus backward). JEST
//! adds a forward pass over the whole super-batch for scoring, but the
//! selected items' forward passes can be reused, giving `F(2 + B/b)`. Flexi-JEST
//! scores with the approximate model (factor `A`) and trains a fraction
//! `lambda` of each sub-batch with it, so nothing can be reused:
//! `3F(1 - lambda + lambda*A) + A*F*B/b`.

use crate::error::{Error, Result};

/// FLOP fraction of a forward pass at doubled patch size.
pub const DEFAULT_APPROX_FLOPS: f64 = 0.28;
/// Wall-clock fraction of a forward pass at doubled patch size.
pub const DEFAULT_APPROX_TIME: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopModel {
    /// Forward-pass cost of one example.
    pub forward: f64,
    pub super_batch: usize,
    pub sub_batch: usize,
    /// Approximate forward cost as a fraction of the full one.
    pub approx_factor: f64,
    /// Fraction of each sub-batch trained through the approximate path.
    pub approx_fraction: f64,
    /// Count the reference model's scoring pass (normally cached).
    pub include_reference: bool,
}

impl FlopModel {
    pub fn new(
        forward: f64,
        super_batch: usize,
        sub_batch: usize,
        approx_factor: f64,
        approx_fraction: f64,
    ) -> Result<Self> {
        let m = FlopModel {
            forward,
            super_batch,
            sub_batch,
            approx_factor,
            approx_fraction,
            include_reference: false,
        };
        m.validate()?;
        Ok(m)
    }

    /// Model with `F = forward` and super/sub-batch sizes implied by `f`.
    pub fn from_filter_ratio(forward: f64, f: f64, approx_factor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "filter ratio must lie in [0, 1), got {f}"
            )));
        }
        // Any B works since only B/b enters the formulas; pick b = 1e6.
        let sub = 1_000_000usize;
        let sup = (sub as f64 / (1.0 - f)).round() as usize;
        Self::new(forward, sup, sub, approx_factor, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.forward > 0.0 && self.forward.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "forward cost must be positive, got {}",
                self.forward
            )));
        }
        if self.sub_batch == 0 || self.sub_batch > self.super_batch {
            return Err(Error::InvalidArgument(format!(
                "need 0 < b <= B, got b={} B={}",
                self.sub_batch, self.super_batch
            )));
        }
        if !(self.approx_factor > 0.0 && self.approx_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "approximation factor must lie in (0, 1], got {}",
                self.approx_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.approx_fraction) {
            return Err(Error::InvalidArgument(format!(
                "approximate fraction must lie in [0, 1], got {}",
                self.approx_fraction
            )));
        }
        Ok(())
    }

    /// `B / b`.
    pub fn oversampling(&self) -> f64 {
        self.super_batch as f64 / self.sub_batch as f64
    }

    pub fn filter_ratio(&self) -> f64 {
        1.0 - self.sub_batch as f64 / self.super_batch as f64
    }

    fn reference_cost(&self) -> f64 {
        if self.include_reference {
            self.forward * self.oversampling()
        } else {
            0.0
        }
    }

    pub fn cost_iid(&self) -> f64 {
        3.0 * self.forward
    }

    pub fn cost_jest(&self) -> f64 {
        self.forward * (2.0 + self.oversampling()) + self.reference_cost()
    }

    pub fn cost_flexi(&self) -> f64 {
        let lambda = self.approx_fraction;
        let a = self.approx_factor;
        3.0 * self.forward * (1.0 - lambda + lambda * a)
            + a * self.forward * self.oversampling()
            + self.reference_cost()
    }

    pub fn ratio_jest(&self) -> f64 {
        self.cost_jest() / self.cost_iid()
    }

    pub fn ratio_flexi(&self) -> f64 {
        self.cost_flexi() / self.cost_iid()
    }

    /// Extra cost over an IID step, as a fraction of it.
    pub fn overhead_jest(&self) -> f64 {
        self.ratio_jest() - 1.0
    }

    pub fn overhead_flexi(&self) -> f64 {
        self.ratio_flexi() - 1.0
    }
}

fn check_f(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!(
            "filter ratio must lie in [0, 1), got {f}"
        )));
    }
    Ok(())
}

fn check_a(a: f64) -> Result<()> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "approximation factor must lie in (0, 1], got {a}"
        )));
    }
    Ok(())
}

/// Cost of one IID example, `3F`.
pub fn cost_iid(forward: f64) -> Result<f64> {
    if !(forward > 0.0 && forward.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "forward cost must be positive, got {forward}"
        )));
    }
    Ok(3.0 * forward)
}

/// `F(2 + B/b)` with `B/b = 1/(1-f)`.
pub fn cost_jest(forward: f64, f: f64) -> Result<f64> {
    check_f(f)?;
    Ok(forward * (2.0 + 1.0 / (1.0 - f)))
}

/// JEST cost relative to IID, `(2 + B/b) / 3`.
pub fn ratio_jest(f: f64) -> Result<f64> {
    Ok(cost_jest(1.0, f)? / 3.0)
}

/// `3F(0.5 + 0.5A) + A F B/b` for the 50:50 multi-resolution split.
pub fn cost_flexi(forward: f64, f: f64, a: f64) -> Result<f64> {
    check_f(f)?;
    check_a(a)?;
    Ok(3.0 * forward * (0.5 + 0.5 * a) + a * forward / (1.0 - f))
}

pub fn ratio_flexi(f: f64, a: f64) -> Result<f64> {
    Ok(cost_flexi(1.0, f, a)? / 3.0)
}

/// Number of examples that costs the same as `base_examples` full-resolution
/// examples when a fraction `lambda` of each batch runs at quarter cost.
pub fn iso_flop_budget(base_examples: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(base_examples / (0.25 * lambda + 1.0 - lambda))
}

/// FLOP and wall-clock fractions of a 50:50 multi-resolution training step
/// relative to full resolution.
pub fn multires_train_cost_fraction_with(approx_flops: f64, approx_time: f64) -> (f64, f64) {
    (0.5 + 0.5 * approx_flops, 0.5 + 0.5 * approx_time)
}

pub fn multires_train_cost_fraction() -> (f64, f64) {
    multires_train_cost_fraction_with(DEFAULT_APPROX_FLOPS, DEFAULT_APPROX_TIME)
}
