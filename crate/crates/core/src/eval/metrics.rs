use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LossKind;
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn csi(&self) -> f64 {
        csi(self)
    }

    /// Tallies two equally shaped 0/1 planes.
    pub fn tally<T: Scalar>(pred: &[T], obs: &[T]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &o) in pred.iter().zip(obs) {
            match (p > T::zero(), o > T::zero()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// `tp / (tp + fp + fn)`, or 0 when nothing was forecast or observed.
pub fn csi(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// 1 where `x >= threshold`, else 0.
pub fn binarize<T: Scalar>(x: &Tensor<T>, threshold: T) -> Tensor<T> {
    x.map(|v| if v >= threshold { T::one() } else { T::zero() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rain rate (mm/h) defining an observed event.
    pub threshold: f64,
    /// Probability at or above which a bce prediction is an event.
    pub prob_threshold: f64,
    /// Loss the model was trained with; selects probability or rate space.
    pub loss: LossKind,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.2,
            prob_threshold: 0.5,
            loss: LossKind::BceLogits,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !(0.0..=1.0).contains(&self.prob_threshold) || self.batch_size == 0 {
            return Err(Error::config(format!("invalid eval settings {self:?}")));
        }
        Ok(())
    }
}

/// Maps raw model output to what prediction files hold: probabilities for
/// bce-trained models, rates for mse-trained ones.
pub fn to_output_space<T: Scalar>(logits: &Tensor<T>, kind: LossKind) -> Tensor<T> {
    match kind {
        LossKind::BceLogits => sigmoid(logits),
        LossKind::Mse => logits.clone(),
    }
}

/// Resizes a prediction to the target grid and thresholds it.
pub fn events_from_prediction<T: Scalar>(
    pred: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    config: &EvalConfig,
) -> Result<Tensor<T>> {
    let up = if (pred.h(), pred.w()) == (out_h, out_w) {
        pred.clone()
    } else {
        bilinear_resize(pred, out_h, out_w)?
    };
    let th = match config.loss {
        LossKind::BceLogits => config.prob_threshold,
        LossKind::Mse => config.threshold,
    };
    Ok(binarize(&up, T::lit(th)))
}
