use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid_scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on logits against {0,1} targets.
    #[default]
    BceLogits,
    /// Mean squared error on raw values.
    Mse,
}

/// Mean loss over all elements and its gradient with respect to `pred`.
pub fn loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<(T, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "loss: pred {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("loss over an empty tensor"));
    }
    let m = T::lit(pred.len() as f64);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    match kind {
        LossKind::BceLogits => {
            for (&x, &t) in pred.data().iter().zip(target.data()) {
                if t != T::zero() && t != T::one() {
                    return Err(Error::Validation(format!(
                        "bce target must be 0 or 1, found {t}"
                    )));
                }
                let l = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
                total += l.to_f64_lossless();
                grad.push((sigmoid_scalar(x) - t) / m);
            }
        }
        LossKind::Mse => {
            let two = T::lit(2.0);
            for (&x, &t) in pred.data().iter().zip(target.data()) {
                let d = x - t;
                total += (d * d).to_f64_lossless();
                grad.push(two * d / m);
            }
        }
    }
    Ok((
        T::lit(total / pred.len() as f64),
        Tensor::from_vec(pred.dims(), grad)?,
    ))
}
