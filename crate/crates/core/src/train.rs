//! Pieces shared by the spatial and temporal training loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{OptimizerSpec, Tensor};
use crate::videoio::psnr_from_mse;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: u64,
    pub batch: usize,
    /// Side of the square training crops.
    pub crop: usize,
    /// Border excluded from the loss on every side of a crop.
    pub margin: usize,
    pub steps_per_epoch: u64,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid(
                "train spec",
                "batch and steps_per_epoch must be positive",
            ));
        }
        if self.crop <= 2 * self.margin {
            return Err(Error::invalid(
                "train spec",
                format!("crop {} leaves nothing inside margin {}", self.crop, self.margin),
            ));
        }
        Ok(())
    }

    pub fn epoch_of(&self, step: u64) -> u32 {
        (step / self.steps_per_epoch) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub mse: f64,
    pub psnr: f64,
}

impl LossPoint {
    pub fn new(step: u64, mse: f64) -> Self {
        Self {
            step,
            mse,
            psnr: psnr_from_mse(mse),
        }
    }
}

pub fn write_loss_csv(points: &[LossPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("step,mse,psnr\n");
    for p in points {
        writeln!(s, "{},{:.9e},{:.6}", p.step, p.mse, p.psnr).expect("write to string");
    }
    fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
}

/// One crop of one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPick {
    pub sample: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Seeded source of `(sample, y0, x0)` picks.
pub struct CropSampler {
    rng: ChaCha8Rng,
    crop: usize,
}

impl CropSampler {
    pub fn new(seed: u64, crop: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            crop,
        }
    }

    /// `dims[i]` is `(H, W)` of sample `i`.
    pub fn pick(&mut self, dims: &[(usize, usize)]) -> Result<CropPick> {
        if dims.is_empty() {
            return Err(Error::invalid("crop sampler", "no training samples"));
        }
        let sample = self.rng.gen_range(0..dims.len());
        let (h, w) = dims[sample];
        if h < self.crop || w < self.crop {
            return Err(Error::invalid(
                "crop sampler",
                format!("sample {sample} is {h}x{w}, smaller than crop {}", self.crop),
            ));
        }
        Ok(CropPick {
            sample,
            y0: self.rng.gen_range(0..=h - self.crop),
            x0: self.rng.gen_range(0..=w - self.crop),
        })
    }
}

/// MSE over the region `margin` pixels inside the two trailing axes, with its
/// gradient (zero outside that region).
pub fn central_mse(pred: &Tensor<f32>, target: &Tensor<f32>, margin: usize) -> Result<(f64, Tensor<f32>)> {
    pred.expect_shape("central_mse", target.shape())?;
    let r = pred.rank();
    if r < 2 {
        return Err(Error::shape("central_mse", "need at least two axes"));
    }
    let (h, w) = (pred.shape()[r - 2], pred.shape()[r - 1]);
    if h <= 2 * margin || w <= 2 * margin {
        return Err(Error::shape(
            "central_mse",
            format!("{h}x{w} has no interior for margin {margin}"),
        ));
    }
    let planes = pred.len() / (h * w);
    let count = (planes * (h - 2 * margin) * (w - 2 * margin)) as f64;
    let mut sum = 0.0f64;
    let mut grad = vec![0.0f32; pred.len()];
    for p in 0..planes {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = (p * h + y) * w + x;
                let d = pred.data()[i] as f64 - target.data()[i] as f64;
                sum += d * d;
                grad[i] = (2.0 * d / count) as f32;
            }
        }
    }
    let mse = sum / count;
    if !mse.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            detail: format!("mse = {mse}"),
        });
    }
    Ok((mse, Tensor::new(pred.shape().to_vec(), grad)?))
}
