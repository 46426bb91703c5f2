//! Frame sequences: ingestion, noise synthesis and quality metrics.

mod netpbm;
mod noise;
pub mod synthetic;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use netpbm::{decode_pnm, encode_pnm, read_ppm, to_byte, write_ppm};
pub use noise::{frame_key, standard_normal, NoiseSpec};

use crate::error::{Error, Result};
use crate::tensor::{pct, Tensor};

/// Ordered frames of identical `[C,H,W]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor<f32>>,
    pub frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor<f32>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("frame sequence", "no frames"))?;
        first.expect_rank("frame sequence", 3)?;
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(Error::shape(
                    "frame sequence",
                    format!("frame {i} is {:?}, frame 0 is {:?}", f.shape(), first.shape()),
                ));
            }
        }
        Ok(Self {
            frames,
            frame_rate: 25.0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor<f32> {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<Tensor<f32>> {
        self.frames
    }

    /// `(C, H, W)` of every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::stack(&self.frames).expect("frames share a shape")
    }

    /// Inverse of [`FrameSequence::to_tensor`] for a rank-4 `[T,C,H,W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        t.expect_rank("frame sequence", 4)?;
        let frames = (0..t.shape()[0])
            .map(|i| t.index_axis0(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect(),
            frame_rate: self.frame_rate,
        }
    }

    /// Crops every frame spatially.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop_spatial(y0, x0, h, w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    /// Loads a directory of `frame_%05d.ppm|pgm` files or a rank-4 PCT1 file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            let mut names = Vec::new();
            for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
                let entry = entry.map_err(|e| Error::io(path, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("frame_") && (name.ends_with(".ppm") || name.ends_with(".pgm")) {
                    names.push(name);
                }
            }
            names.sort();
            if names.is_empty() {
                return Err(Error::invalid(
                    "frame sequence",
                    format!("no frame_*.ppm files in {}", path.display()),
                ));
            }
            let frames = names
                .iter()
                .map(|n| read_ppm(path.join(n)))
                .collect::<Result<Vec<_>>>()?;
            Self::new(frames)
        } else {
            let t = pct::read(path)?;
            let seq = Self::from_tensor(&t)?;
            Ok(seq.clamped())
        }
    }

    /// Writes `frame_%05d.ppm` (RGB) or `frame_%05d.pgm` (grey) into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ext = if self.dims().0 == 1 { "pgm" } else { "ppm" };
        for (i, f) in self.frames.iter().enumerate() {
            write_ppm(f, dir.join(format!("frame_{i:05}.{ext}")))?;
        }
        Ok(())
    }
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma/255`.
pub fn add_noise(seq: &FrameSequence, spec: &NoiseSpec) -> FrameSequence {
    let std = spec.std_unit();
    let frames = seq
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            if spec.sigma == 0.0 {
                return f.clone();
            }
            let key = frame_key(spec.seed, t as u64);
            let mut out = f.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let n = (*v as f64 + std * standard_normal(key, i as u64)) as f32;
                *v = if spec.clipped { n.clamp(0.0, 1.0) } else { n };
            }
            out
        })
        .collect();
    FrameSequence {
        frames,
        frame_rate: seq.frame_rate,
    }
}

/// Peak signal-to-noise ratio for a unit peak. Identical inputs give `+inf`.
pub fn psnr(clean: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
    clean.expect_shape("psnr", test.shape())?;
    let mse = clean
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / clean.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Per-frame PSNR values.
pub fn psnr_per_frame(clean: &FrameSequence, test: &FrameSequence) -> Result<Vec<f64>> {
    if clean.len() != test.len() {
        return Err(Error::shape(
            "psnr",
            format!("sequence lengths {} vs {}", clean.len(), test.len()),
        ));
    }
    clean.frames.iter().zip(&test.frames).map(|(a, b)| psnr(a, b)).collect()
}

/// Arithmetic mean of per-frame PSNR.
pub fn sequence_psnr(clean: &FrameSequence, test: &FrameSequence) -> Result<f64> {
    let v = psnr_per_frame(clean, test)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        let n = (c * h * w) as f32;
        Tensor::from_fn(&[c, h, w], |i| i as f32 / n)
    }

    #[test]
    fn psnr_closed_forms() {
        let z = Tensor::<f32>::zeros(&[1, 4, 4]);
        let t = Tensor::full(&[1, 4, 4], 0.1f32);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&z, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let seq = FrameSequence::new(vec![ramp(3, 4, 5), ramp(3, 4, 5)]).unwrap();
        let spec = NoiseSpec {
            sigma: 0.0,
            ..NoiseSpec::default()
        };
        assert_eq!(add_noise(&seq, &spec), seq);
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let frames = (0..4).map(|_| Tensor::full(&[1, 500, 500], 0.5f32)).collect();
        let seq = FrameSequence::new(frames).unwrap();
        let spec = NoiseSpec {
            sigma: 25.0,
            clipped: false,
            seed: 7,
        };
        let noisy = add_noise(&seq, &spec);
        let vals: Vec<f64> = noisy
            .frames()
            .iter()
            .flat_map(|f| f.data().iter().map(|&v| v as f64 - 0.5))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 25.0 / 255.0;
        assert!((std - target).abs() / target < 0.01, "std {std}");
        assert!(mean.abs() < 3.0 * target / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn clipped_noise_stays_in_range() {
        let seq = FrameSequence::new(vec![ramp(3, 16, 16); 3]).unwrap();
        let spec = NoiseSpec {
            sigma: 50.0,
            clipped: true,
            seed: 1,
        };
        let noisy = add_noise(&seq, &spec);
        for f in noisy.frames() {
            assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let seq = FrameSequence::new(vec![ramp(1, 8, 8); 5]).unwrap();
        let spec = NoiseSpec::default();
        assert_eq!(add_noise(&seq, &spec), add_noise(&seq, &spec));
        let single = FrameSequence::new(vec![seq.frame(3).clone()]).unwrap();
        // a frame's noise depends on its index, not on what else is generated
        let a = add_noise(&seq, &spec);
        let b = add_noise(&single, &spec);
        assert_ne!(a.frame(3), b.frame(0));
        assert_eq!(
            a.frame(0).data()[..8],
            add_noise(&seq.crop(0, 0, 8, 8).unwrap(), &spec).frame(0).data()[..8]
        );
    }

    #[test]
    fn psnr_decreases_with_sigma() {
        let seq = FrameSequence::new(vec![ramp(1, 32, 32); 2]).unwrap();
        let mut means = Vec::new();
        for &sigma in &[10.0, 25.0, 50.0] {
            let mut acc = 0.0;
            for seed in 0..5 {
                let noisy = add_noise(
                    &seq,
                    &NoiseSpec {
                        sigma,
                        clipped: false,
                        seed,
                    },
                );
                acc += sequence_psnr(&seq, &noisy).unwrap();
            }
            means.push(acc / 5.0);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new(vec![ramp(3, 4, 6), ramp(3, 4, 6).map(|v| 1.0 - v)]).unwrap();
        seq.save_dir(dir.path()).unwrap();
        let back = FrameSequence::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.frame(1).max_abs_diff(seq.frame(1)) <= 0.5 / 255.0 + 1e-6);
        let again = dir.path().join("again");
        back.save_dir(&again).unwrap();
        for i in 0..2 {
            let name = format!("frame_{i:05}.ppm");
            assert_eq!(
                fs::read(dir.path().join(&name)).unwrap(),
                fs::read(again.join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn pct_sequence_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new(vec![ramp(1, 3, 3); 4]).unwrap();
        let p = dir.path().join("seq.pct");
        pct::write(&seq.to_tensor(), &p).unwrap();
        assert_eq!(FrameSequence::load(&p).unwrap(), seq);
    }
}
