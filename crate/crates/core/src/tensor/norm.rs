//! Batch normalization with learnable affine and running statistics.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    channels: usize,
    plane: usize,
    mode: BnMode,
}

/// Splits `shape` into (batch, channels, plane) where the first `batch_axes`
/// axes form the batch and the last `spatial_axes` form the plane.
fn split_axes(shape: &[usize], batch_axes: usize, spatial_axes: usize) -> Result<(usize, usize, usize)> {
    if batch_axes + spatial_axes > shape.len() {
        return Err(Error::shape(
            "batchnorm",
            format!("{batch_axes} batch + {spatial_axes} spatial axes exceed rank of {shape:?}"),
        ));
    }
    let r = shape.len();
    Ok((
        shape[..batch_axes].iter().product(),
        shape[batch_axes..r - spatial_axes].iter().product(),
        shape[r - spatial_axes..].iter().product(),
    ))
}

/// Normalizes every channel over the population `batch × plane`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    batch_axes: usize,
    spatial_axes: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode,
    stats: &mut RunningStats,
) -> Result<(Tensor<T>, BatchNormCache)> {
    let (batch, channels, plane) = split_axes(x.shape(), batch_axes, spatial_axes)?;
    gamma.expect_shape("batchnorm", &[channels])?;
    beta.expect_shape("batchnorm", &[channels])?;
    if stats.mean.len() != channels {
        return Err(Error::shape(
            "batchnorm",
            format!("running stats hold {} channels, input {channels}", stats.mean.len()),
        ));
    }
    let pop = batch * plane;
    if mode == BnMode::Train && pop < 2 {
        return Err(Error::invalid("batchnorm", format!("train-mode population {pop} < 2")));
    }
    let data = x.data();
    let mut xhat = vec![0.0f64; data.len()];
    let mut inv_std = vec![0.0f64; channels];
    let mut out = vec![T::zero(); data.len()];
    for ch in 0..channels {
        let idx = |b: usize, p: usize| (b * channels + ch) * plane + p;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut s = 0.0;
                for b in 0..batch {
                    for p in 0..plane {
                        s += data[idx(b, p)].f64();
                    }
                }
                let mean = s / pop as f64;
                let mut ss = 0.0;
                for b in 0..batch {
                    for p in 0..plane {
                        let d = data[idx(b, p)].f64() - mean;
                        ss += d * d;
                    }
                }
                let var = ss / pop as f64;
                let m = stats.momentum;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var * pop as f64 / (pop - 1) as f64;
                (mean, var)
            }
            BnMode::Inference => (stats.mean[ch], stats.var[ch]),
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        let (g, bt) = (gamma.data()[ch].f64(), beta.data()[ch].f64());
        for b in 0..batch {
            for p in 0..plane {
                let i = idx(b, p);
                let xh = (data[i].f64() - mean) * is;
                xhat[i] = xh;
                out[i] = T::of(g * xh + bt);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCache {
            xhat,
            inv_std,
            batch,
            channels,
            plane,
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad.len() != cache.xhat.len() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("gradient has {} elements, forward had {}", grad.len(), cache.xhat.len()),
        ));
    }
    let (batch, channels, plane) = (cache.batch, cache.channels, cache.plane);
    let pop = (batch * plane) as f64;
    let g = grad.data();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for ch in 0..channels {
        let idx = |b: usize, p: usize| (b * channels + ch) * plane + p;
        let gm = gamma.data()[ch].f64();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..batch {
            for p in 0..plane {
                let i = idx(b, p);
                sum_g += g[i].f64();
                sum_gx += g[i].f64() * cache.xhat[i];
            }
        }
        dgamma[ch] = T::of(sum_gx);
        dbeta[ch] = T::of(sum_g);
        let is = cache.inv_std[ch];
        for b in 0..batch {
            for p in 0..plane {
                let i = idx(b, p);
                let v = match cache.mode {
                    BnMode::Train => gm * is / pop * (pop * g[i].f64() - sum_g - cache.xhat[i] * sum_gx),
                    BnMode::Inference => gm * is * g[i].f64(),
                };
                dx[i] = T::of(v);
            }
        }
    }
    Ok((
        Tensor::new(grad.shape().to_vec(), dx)?,
        Tensor::new(vec![channels], dgamma)?,
        Tensor::new(vec![channels], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_normalizes_to_minus_one_one() {
        let x = Tensor::<f64>::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        let mut st = RunningStats::new(1);
        let (y, _) = batchnorm(
            &x,
            1,
            0,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Train,
            &mut st,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor::<f64>::from_fn(&[4, 3, 5, 5], |i| ((i * 37) % 17) as f64 * 0.3 - 1.0);
        let mut st = RunningStats::new(3);
        let (y, _) = batchnorm(
            &x,
            1,
            2,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            BnMode::Train,
            &mut st,
        )
        .unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..25).map(move |p| (b * 3 + ch) * 25 + p))
                .map(|i| y.data()[i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn inference_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64 - 4.0);
        let mut st = RunningStats::new(2);
        let (y, _) = batchnorm(
            &x,
            1,
            1,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            BnMode::Inference,
            &mut st,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn constant_channel_does_not_divide_by_zero() {
        let x = Tensor::<f32>::full(&[3, 1, 4], 2.0);
        let mut st = RunningStats::new(1);
        let (y, _) = batchnorm(
            &x,
            1,
            1,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Train,
            &mut st,
        )
        .unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_train_is_rejected() {
        let x = Tensor::<f32>::full(&[1, 2], 2.0);
        let mut st = RunningStats::new(2);
        let r = batchnorm(
            &x,
            1,
            0,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            BnMode::Train,
            &mut st,
        );
        assert!(r.is_err());
    }
}
