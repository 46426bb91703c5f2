//! Temporal refinement: 3-D convolutions without temporal padding collapse
//! a `2·Tt + 1` frame window to one frame, then a stack of 2-D convolutions
//! predicts the residual noise left in the spatially denoised center frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sepconv::gaussian;
use crate::tensor::{
    conv2d, conv2d_backward, conv3d, conv3d_backward, lrelu, lrelu_backward, optimizer_step, ParamBank, ParamId, Real,
    Tensor, DEFAULT_LRELU_SLOPE,
};
use crate::train::{central_mse, CropSampler, LossPoint, TrainSpec};
use crate::videoio::FrameSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcnnConfig {
    /// Temporal half-window Tt; the network sees `2·Tt + 1` frames.
    pub temporal_radius: usize,
    /// Color channels C of a frame; the input has `2·C`.
    pub channels: usize,
    pub conv3d_channels: usize,
    pub conv2d_layers: usize,
    pub conv2d_channels: usize,
    pub kernel: usize,
    pub slope: f64,
}

impl TcnnConfig {
    pub fn paper() -> Self {
        Self {
            temporal_radius: 3,
            channels: 3,
            conv3d_channels: 48,
            conv2d_layers: 17,
            conv2d_channels: 96,
            kernel: 3,
            slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.conv2d_layers == 0 || self.conv2d_channels == 0 {
            return Err(Error::invalid("tcnn config", format!("zero dimension in {self:?}")));
        }
        if self.temporal_radius > 0 && self.conv3d_channels == 0 {
            return Err(Error::invalid("tcnn config", "conv3d_channels must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(
                "tcnn config",
                format!("kernel {} must be odd", self.kernel),
            ));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::invalid(
                "tcnn config",
                format!("slope {} outside (0, 1)", self.slope),
            ));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.temporal_radius + 1
    }

    /// `(cin, cout)` of every 3-D layer.
    pub fn conv3d_widths(&self) -> Vec<(usize, usize)> {
        (0..self.temporal_radius)
            .map(|i| {
                let cin = if i == 0 {
                    2 * self.channels
                } else {
                    self.conv3d_channels
                };
                (cin, self.conv3d_channels)
            })
            .collect()
    }

    /// `(cin, cout)` of every 2-D layer.
    pub fn conv2d_widths(&self) -> Vec<(usize, usize)> {
        let first_in = if self.temporal_radius == 0 {
            2 * self.channels
        } else {
            self.conv3d_channels
        };
        let l = self.conv2d_layers;
        (0..l)
            .map(|i| {
                let cin = if i == 0 { first_in } else { self.conv2d_channels };
                let cout = if i + 1 == l {
                    self.channels
                } else {
                    self.conv2d_channels
                };
                (cin, cout)
            })
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        let k = self.kernel;
        self.conv3d_widths()
            .iter()
            .map(|(i, o)| i * o * k * k * k)
            .sum::<usize>()
            + self.conv2d_widths().iter().map(|(i, o)| i * o * k * k).sum::<usize>()
    }

    pub fn bias_count(&self) -> usize {
        self.conv3d_widths().iter().map(|(_, o)| o).sum::<usize>()
            + self.conv2d_widths().iter().map(|(_, o)| o).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }
}

/// Frame indices of the window centered on `t`, replicating edge frames.
pub fn window_indices(t: usize, len: usize, radius: usize) -> Vec<usize> {
    (0..=2 * radius)
        .map(|k| (t as isize + k as isize - radius as isize).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// `[2C, 2·Tt+1, H, W]` input for center frame `t`: noisy frames in the
/// first `C` channels, spatially denoised frames in the last `C`.
pub fn window_input(noisy: &FrameSequence, yhat: &[Tensor<f32>], t: usize, radius: usize) -> Result<Tensor<f32>> {
    if yhat.len() != noisy.len() {
        return Err(Error::shape(
            "tcnn window",
            format!("{} denoised frames for {} noisy frames", yhat.len(), noisy.len()),
        ));
    }
    if t >= noisy.len() {
        return Err(Error::invalid(
            "tcnn window",
            format!("frame {t} outside sequence of {}", noisy.len()),
        ));
    }
    let (c, h, w) = noisy.dims();
    let idx = window_indices(t, noisy.len(), radius);
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * c * idx.len() * plane);
    for src in 0..2 {
        for ch in 0..c {
            for &k in &idx {
                let frame = if src == 0 { noisy.frame(k) } else { &yhat[k] };
                frame.expect_shape("tcnn window", &[c, h, w])?;
                data.extend_from_slice(&frame.data()[ch * plane..(ch + 1) * plane]);
            }
        }
    }
    Tensor::new(vec![2 * c, idx.len(), h, w], data)
}

struct Tape<T> {
    inputs3: Vec<Tensor<T>>,
    pre3: Vec<Tensor<T>>,
    inputs2: Vec<Tensor<T>>,
    pre2: Vec<Tensor<T>>,
    batched: bool,
}

pub struct Tcnn<T: Real = f32> {
    pub config: TcnnConfig,
    pub bank: ParamBank<T>,
    conv3: Vec<(ParamId, ParamId)>,
    conv2: Vec<(ParamId, ParamId)>,
    tape: Option<Tape<T>>,
}

impl<T: Real> Tcnn<T> {
    /// Fresh network with Kaiming-scaled weights, zero biases and a zero
    /// final layer, so the initial refinement is the identity.
    pub fn new(config: TcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let k = config.kernel;
        let mut conv3 = Vec::new();
        for (i, (cin, cout)) in config.conv3d_widths().into_iter().enumerate() {
            let std = (2.0 / (cin * k * k * k) as f64).sqrt();
            let w = Tensor::from_fn(&[cout, cin, k, k, k], |_| T::of(std * gaussian(&mut rng)));
            conv3.push((
                bank.add(format!("conv3d{i}.weight"), w),
                bank.add(format!("conv3d{i}.bias"), Tensor::zeros(&[cout])),
            ));
        }
        let widths = config.conv2d_widths();
        let mut conv2 = Vec::new();
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let w = if i + 1 == widths.len() {
                Tensor::zeros(&[cout, cin, k, k])
            } else {
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                Tensor::from_fn(&[cout, cin, k, k], |_| T::of(std * gaussian(&mut rng)))
            };
            conv2.push((
                bank.add(format!("conv2d{i}.weight"), w),
                bank.add(format!("conv2d{i}.bias"), Tensor::zeros(&[cout])),
            ));
        }
        Ok(Self {
            config,
            bank,
            conv3,
            conv2,
            tape: None,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<bool> {
        let s = x.shape();
        let (batched, rest) = match s.len() {
            4 => (false, s),
            5 => (true, &s[1..]),
            r => {
                return Err(Error::shape(
                    "tcnn",
                    format!("input rank {r} (shape {s:?}), expected 4 or 5"),
                ))
            }
        };
        let c = &self.config;
        if rest[0] != 2 * c.channels {
            return Err(Error::shape(
                "tcnn",
                format!(
                    "input channels {} but config expects 2·{} = {}",
                    rest[0],
                    c.channels,
                    2 * c.channels
                ),
            ));
        }
        if rest[1] != c.window() {
            return Err(Error::shape(
                "tcnn",
                format!("window of {} frames, config expects {}", rest[1], c.window()),
            ));
        }
        Ok(batched)
    }

    fn run(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        let batched = self.check_input(x)?;
        let mut h = if batched {
            x.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        };
        let slope = self.config.slope;
        let mut tape = Tape {
            inputs3: Vec::new(),
            pre3: Vec::new(),
            inputs2: Vec::new(),
            pre2: Vec::new(),
            batched,
        };
        for &(w, b) in &self.conv3 {
            let pre = conv3d(&h, self.bank.value(w), self.bank.value(b))?;
            let next = lrelu(&pre, slope);
            if record {
                tape.inputs3.push(std::mem::replace(&mut h, next));
                tape.pre3.push(pre);
            } else {
                h = next;
            }
        }
        let s = h.shape().to_vec();
        debug_assert_eq!(s[2], 1);
        h = h.reshape(&[s[0], s[1], s[3], s[4]])?;
        let pad = (self.config.kernel - 1) / 2;
        let last = self.conv2.len() - 1;
        for (i, &(w, b)) in self.conv2.iter().enumerate() {
            let pre = conv2d(&h, self.bank.value(w), self.bank.value(b), pad)?;
            let next = if i == last { pre.clone() } else { lrelu(&pre, slope) };
            if record {
                tape.inputs2.push(std::mem::replace(&mut h, next));
                tape.pre2.push(pre);
            } else {
                h = next;
            }
        }
        if !batched {
            h = h.index_axis0(0)?;
        }
        Ok((h, record.then_some(tape)))
    }

    /// Residual noise estimate `z_t` for `[2C,T,H,W]` (or batched) input.
    pub fn noise(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (z, tape) = self.run(x, true)?;
        self.tape = tape;
        Ok(z)
    }

    /// Accumulates parameter gradients for upstream `grad` w.r.t. `z_t` and
    /// returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = self.tape.take().ok_or(Error::NoForward { op: "tcnn backward" })?;
        let slope = self.config.slope;
        let pad = (self.config.kernel - 1) / 2;
        let mut g = if tape.batched {
            grad.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(grad.shape());
            grad.clone().reshape(&s)?
        };
        let last = self.conv2.len() - 1;
        for i in (0..self.conv2.len()).rev() {
            if i != last {
                g = lrelu_backward(&tape.pre2[i], &g, slope)?;
            }
            let (w, b) = self.conv2[i];
            let grads = conv2d_backward(&tape.inputs2[i], self.bank.value(w), pad, &g)?;
            self.bank.accumulate(w, grads.kernels.data());
            self.bank.accumulate(b, grads.bias.data());
            g = grads.input;
        }
        let s = g.shape().to_vec();
        g = g.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
        for i in (0..self.conv3.len()).rev() {
            g = lrelu_backward(&tape.pre3[i], &g, slope)?;
            let (w, b) = self.conv3[i];
            let grads = conv3d_backward(&tape.inputs3[i], self.bank.value(w), &g)?;
            self.bank.accumulate(w, grads.kernels.data());
            self.bank.accumulate(b, grads.bias.data());
            g = grads.input;
        }
        if !tape.batched {
            g = g.index_axis0(0)?;
        }
        Ok(g)
    }

    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        self.bank
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect()
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<f32>)]) -> Result<()> {
        if state.len() != self.bank.entries().len() {
            return Err(Error::invalid(
                "tcnn load",
                format!(
                    "{} tensors given, network has {}",
                    state.len(),
                    self.bank.entries().len()
                ),
            ));
        }
        for (name, value) in state {
            self.bank.load(name, value.cast())?;
        }
        Ok(())
    }
}

impl Tcnn<f32> {
    /// `x̂_t = ŷ_t − z_t` for every frame, each from its own window.
    pub fn refine(&self, noisy: &FrameSequence, yhat: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        (0..noisy.len())
            .map(|t| {
                let x = window_input(noisy, yhat, t, self.config.temporal_radius)?;
                yhat[t].sub(&self.noise(&x)?)
            })
            .collect()
    }
}

/// One training clip: noisy frames, their spatially denoised versions and
/// the clean frames.
#[derive(Clone, Debug)]
pub struct TemporalClip {
    pub noisy: FrameSequence,
    pub yhat: Vec<Tensor<f32>>,
    pub clean: FrameSequence,
}

pub fn train_temporal(
    net: &mut Tcnn<f32>,
    clips: &[TemporalClip],
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(u64, &Tcnn<f32>) -> Result<()>,
) -> Result<Vec<LossPoint>> {
    spec.validate()?;
    let radius = net.config.temporal_radius;
    let mut index = Vec::new();
    let mut dims = Vec::new();
    let mut windows = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        if clip.clean.len() != clip.noisy.len() || clip.clean.dims() != clip.noisy.dims() {
            return Err(Error::shape(
                "train_temporal",
                format!("clip {ci}: clean and noisy sequences differ"),
            ));
        }
        let (_, h, w) = clip.noisy.dims();
        for t in 0..clip.noisy.len() {
            windows.push(window_input(&clip.noisy, &clip.yhat, t, radius)?);
            index.push((ci, t));
            dims.push((h, w));
        }
    }
    let mut sampler = CropSampler::new(spec.seed, spec.crop);
    let mut curve = Vec::with_capacity(spec.steps as usize);
    for step in 0..spec.steps {
        let mut xs = Vec::with_capacity(spec.batch);
        let mut centers = Vec::with_capacity(spec.batch);
        let mut targets = Vec::with_capacity(spec.batch);
        for _ in 0..spec.batch {
            let p = sampler.pick(&dims)?;
            let (ci, t) = index[p.sample];
            let clip = &clips[ci];
            xs.push(windows[p.sample].crop_spatial(p.y0, p.x0, spec.crop, spec.crop)?);
            centers.push(clip.yhat[t].crop_spatial(p.y0, p.x0, spec.crop, spec.crop)?);
            targets.push(clip.clean.frame(t).crop_spatial(p.y0, p.x0, spec.crop, spec.crop)?);
        }
        let x = Tensor::stack(&xs)?;
        let center = Tensor::stack(&centers)?;
        let clean = Tensor::stack(&targets)?;
        net.bank.zero_grad();
        let z = net.forward_train(&x)?;
        let xhat = center.sub(&z)?;
        let (mse, g) = central_mse(&xhat, &clean, spec.margin)?;
        net.backward(&g.scale(-1.0))?;
        optimizer_step(&mut net.bank, &spec.optimizer, step + 1, spec.epoch_of(step))?;
        curve.push(LossPoint::new(step, mse));
        if (step + 1) % spec.steps_per_epoch == 0 || step + 1 == spec.steps {
            on_epoch(step + 1, net)?;
        }
    }
    Ok(curve)
}
