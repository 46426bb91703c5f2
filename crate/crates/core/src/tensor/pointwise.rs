use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LRELU_SLOPE: f64 = 0.1;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its *input*. The subgradient at 0 is taken as 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn lrelu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v >= T::zero() { v } else { s * v })
}

pub fn lrelu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    let s = T::of(slope);
    x.zip_map(grad, "lrelu_backward", |v, g| if v >= T::zero() { g } else { s * g })
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.expect_shape("mse_loss", target.shape())?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.f64() - t.f64();
        sum += d * d;
    }
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "mse loss",
            detail: format!("{loss}"),
        });
    }
    let grad = pred.zip_map(target, "mse_loss", |p, t| T::of(2.0 * (p.f64() - t.f64()) / n))?;
    Ok((loss, grad))
}
