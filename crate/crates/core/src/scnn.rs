//! Spatial denoiser: a stack of SepConv blocks that halves the neighbor axis
//! at every layer and predicts the noise of the processed frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchcraft::AugmentedInput;
use crate::sepconv::{SepConv, SepConvCache, SepConvConfig};
use crate::tensor::{
    batchnorm, batchnorm_backward, optimizer_step, relu, relu_backward, BatchNormCache, BnMode, ParamBank, ParamId,
    Real, RunningStats, Tensor,
};
use crate::train::{central_mse, CropSampler, LossPoint, TrainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScnnConfig {
    /// Neighbor slots including the frame copy (n + 1).
    pub neighbors: usize,
    /// Offset groups including the score maps (f + 1).
    pub groups: usize,
    pub channels: usize,
    /// Spatial kernel side m.
    pub kernel: usize,
    pub blocks: usize,
}

impl ScnnConfig {
    pub fn paper() -> Self {
        Self {
            neighbors: 15,
            groups: 50,
            channels: 3,
            kernel: 7,
            blocks: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::invalid("scnn config", "need at least 2 blocks"));
        }
        if self.neighbors == 0 || self.groups == 0 || self.channels == 0 {
            return Err(Error::invalid("scnn config", format!("zero dimension in {self:?}")));
        }
        let last = self.neighbor_schedule()[self.blocks - 1];
        if last != 1 {
            return Err(Error::invalid(
                "scnn config",
                format!(
                    "{} blocks reduce {} neighbor slots only to {last}",
                    self.blocks, self.neighbors
                ),
            ));
        }
        self.layer_configs().iter().try_for_each(|c| c.validate())
    }

    /// Neighbor-axis size after each block: `ceil(n/2)` per block, floored at 1.
    pub fn neighbor_schedule(&self) -> Vec<usize> {
        let mut n = self.neighbors;
        (0..self.blocks)
            .map(|_| {
                n = n.div_ceil(2);
                n
            })
            .collect()
    }

    pub fn layer_configs(&self) -> Vec<SepConvConfig> {
        let sched = self.neighbor_schedule();
        let mut n_in = self.neighbors;
        (0..self.blocks)
            .map(|b| {
                let last = b + 1 == self.blocks;
                let cfg = SepConvConfig {
                    n_in,
                    n_out: sched[b],
                    f_in: self.groups,
                    f_out: if last { 1 } else { self.groups },
                    c: self.channels,
                    m: self.kernel,
                };
                n_in = sched[b];
                cfg
            })
            .collect()
    }

    fn has_bn(&self, block: usize) -> bool {
        block > 0 && block + 1 < self.blocks
    }

    /// Affine BatchNorm values (gamma and beta).
    pub fn bn_count(&self) -> usize {
        self.layer_configs()
            .iter()
            .enumerate()
            .filter(|(b, _)| self.has_bn(*b))
            .map(|(_, c)| 2 * c.n_out * c.f_out * c.c)
            .sum()
    }

    pub fn sepconv_count(&self) -> usize {
        self.layer_configs().iter().map(|c| c.param_count()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.sepconv_count() + self.bn_count()
    }
}

struct BnSlot {
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

struct BlockTape<T> {
    sep: SepConvCache<T>,
    bn: Option<BatchNormCache>,
    /// Input to the ReLU, absent for the last block.
    pre_act: Option<Tensor<T>>,
}

pub struct Scnn<T: Real = f32> {
    pub config: ScnnConfig,
    pub bank: ParamBank<T>,
    layers: Vec<SepConv>,
    norms: Vec<Option<BnSlot>>,
    tape: Option<(Vec<BlockTape<T>>, bool)>,
}

impl<T: Real> Scnn<T> {
    /// Fresh network. The last block's neighbor mixing starts at zero, so
    /// the initial noise estimate is zero and the output equals the input.
    pub fn new(config: ScnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (b, lc) in config.layer_configs().into_iter().enumerate() {
            let layer = SepConv::register(lc, &mut bank, &format!("block{b}"), &mut rng)?;
            let norm = config.has_bn(b).then(|| {
                let ch = lc.n_out * lc.f_out * lc.c;
                BnSlot {
                    gamma: bank.add(format!("block{b}.bn.gamma"), Tensor::full(&[ch], T::one())),
                    beta: bank.add(format!("block{b}.bn.beta"), Tensor::zeros(&[ch])),
                    stats: RunningStats::new(ch),
                }
            });
            layers.push(layer);
            norms.push(norm);
        }
        let last = layers.last().expect("at least two blocks").ids.n_weight;
        bank.value_mut(last).data_mut().fill(T::zero());
        Ok(Self {
            config,
            bank,
            layers,
            norms,
            tape: None,
        })
    }

    pub fn layers(&self) -> &[SepConv] {
        &self.layers
    }

    fn input_shape(&self, shape: &[usize]) -> Result<bool> {
        let c = &self.config;
        let (batched, rest) = match shape.len() {
            5 => (false, shape),
            6 => (true, &shape[1..]),
            r => {
                return Err(Error::shape(
                    "scnn",
                    format!("input rank {r} (shape {shape:?}), expected 5 or 6"),
                ))
            }
        };
        let want = [c.neighbors, c.groups, c.channels];
        for ((name, &got), &exp) in ["neighbor slots", "groups", "channels"].iter().zip(rest).zip(&want) {
            if got != exp {
                return Err(Error::shape(
                    "scnn",
                    format!("input {name} is {got}, config expects {exp}"),
                ));
            }
        }
        Ok(batched)
    }

    fn run(&mut self, x: &Tensor<T>, mode: BnMode, record: bool) -> Result<(Tensor<T>, Option<Vec<BlockTape<T>>>)> {
        let batched = self.input_shape(x.shape())?;
        let mut h = if batched {
            x.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        };
        let mut tape = record.then(Vec::new);
        let last = self.layers.len() - 1;
        for (b, layer) in self.layers.iter().enumerate() {
            let (y, sep) = layer.forward(&self.bank, &h)?;
            let (y, bn) = match &mut self.norms[b] {
                Some(slot) => {
                    let (z, cache) = batchnorm(
                        &y,
                        1,
                        2,
                        self.bank.value(slot.gamma),
                        self.bank.value(slot.beta),
                        mode,
                        &mut slot.stats,
                    )?;
                    (z, Some(cache))
                }
                None => (y, None),
            };
            if b == last {
                h = y;
                if let Some(t) = tape.as_mut() {
                    t.push(BlockTape { sep, bn, pre_act: None });
                }
            } else {
                h = relu(&y);
                if let Some(t) = tape.as_mut() {
                    t.push(BlockTape {
                        sep,
                        bn,
                        pre_act: Some(y),
                    });
                }
            }
        }
        let s = h.shape();
        let mut out_shape = vec![s[0], s[3], s[4], s[5]];
        if !batched {
            out_shape.remove(0);
        }
        Ok((h.reshape(&out_shape)?, tape))
    }

    /// Training-mode forward: batch statistics, running-stat update, and a
    /// recorded tape for [`Scnn::backward`]. Returns the noise estimate
    /// `[B,c,v,h]` (or `[c,v,h]` for an unbatched input).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = x.rank() == 6;
        let (z, tape) = self.run(x, BnMode::Train, true)?;
        self.tape = Some((tape.expect("recorded"), batched));
        Ok(z)
    }

    /// Inference forward using running statistics. Leaves the network untouched.
    pub fn noise(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = self.input_shape(x.shape())?;
        let c = &self.config;
        let mut h = if batched {
            x.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        };
        let last = self.layers.len() - 1;
        for (b, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&self.bank, &h)?;
            let y = match &self.norms[b] {
                Some(slot) => {
                    let mut stats = slot.stats.clone();
                    batchnorm(
                        &y,
                        1,
                        2,
                        self.bank.value(slot.gamma),
                        self.bank.value(slot.beta),
                        BnMode::Inference,
                        &mut stats,
                    )?
                    .0
                }
                None => y,
            };
            h = if b == last { y } else { relu(&y) };
        }
        let s = h.shape().to_vec();
        let mut out_shape = vec![s[0], c.channels, s[4], s[5]];
        if !batched {
            out_shape.remove(0);
        }
        h.reshape(&out_shape)
    }

    /// Backpropagates `grad` (gradient of the loss w.r.t. the noise estimate)
    /// through the last training forward, accumulating into the bank.
    /// Returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (tape, batched) = self.tape.take().ok_or(Error::NoForward { op: "scnn backward" })?;
        let last_cfg = self.layers.last().expect("layers").config;
        let mut g = {
            let s = grad.shape();
            let (b, v, h) = match (batched, s.len()) {
                (true, 4) => (s[0], s[2], s[3]),
                (false, 3) => (1, s[1], s[2]),
                _ => {
                    return Err(Error::shape(
                        "scnn backward",
                        format!("upstream shape {s:?} does not match the forward output"),
                    ))
                }
            };
            grad.clone().reshape(&[b, 1, 1, last_cfg.c, v, h])?
        };
        for (b, bt) in tape.into_iter().enumerate().rev() {
            if let Some(pre) = &bt.pre_act {
                g = relu_backward(pre, &g)?;
            }
            if let (Some(cache), Some(slot)) = (&bt.bn, &self.norms[b]) {
                let (dx, dgamma, dbeta) = batchnorm_backward(cache, self.bank.value(slot.gamma), &g)?;
                self.bank.accumulate(slot.gamma, dgamma.data());
                self.bank.accumulate(slot.beta, dbeta.data());
                g = dx;
            }
            g = self.layers[b].backward(&mut self.bank, &bt.sep, &g)?;
        }
        if !batched {
            g = g.index_axis0(0)?;
        }
        Ok(g)
    }

    /// Every tensor needed to restore the network, including BatchNorm
    /// running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .bank
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect();
        for (b, slot) in self.norms.iter().enumerate() {
            if let Some(slot) = slot {
                let n = slot.stats.mean.len();
                out.push((
                    format!("block{b}.bn.running_mean"),
                    Tensor::new(vec![n], slot.stats.mean.iter().map(|&v| v as f32).collect()).expect("shape"),
                ));
                out.push((
                    format!("block{b}.bn.running_var"),
                    Tensor::new(vec![n], slot.stats.var.iter().map(|&v| v as f32).collect()).expect("shape"),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<f32>)]) -> Result<()> {
        let expected = self.state();
        if state.len() != expected.len() {
            return Err(Error::invalid(
                "scnn load",
                format!("{} tensors given, network has {}", state.len(), expected.len()),
            ));
        }
        for (name, value) in state {
            if let Some(rest) = name
                .strip_suffix(".bn.running_mean")
                .or_else(|| name.strip_suffix(".bn.running_var"))
            {
                let b: usize = rest
                    .strip_prefix("block")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::invalid("scnn load", format!("bad tensor name {name}")))?;
                let slot = self
                    .norms
                    .get_mut(b)
                    .and_then(|s| s.as_mut())
                    .ok_or_else(|| Error::invalid("scnn load", format!("block {b} has no BatchNorm")))?;
                let dst = if name.ends_with("mean") {
                    &mut slot.stats.mean
                } else {
                    &mut slot.stats.var
                };
                if dst.len() != value.len() {
                    return Err(Error::shape(
                        "scnn load",
                        format!("{name}: {} values, want {}", value.len(), dst.len()),
                    ));
                }
                for (d, &v) in dst.iter_mut().zip(value.data()) {
                    *d = v as f64;
                }
            } else {
                self.bank.load(name, value.cast())?;
            }
        }
        Ok(())
    }
}

impl Scnn<f32> {
    /// `ŷ = y − z_s` where `y` is the frame copy inside `aug`.
    pub fn denoise(&self, aug: &AugmentedInput) -> Result<Tensor<f32>> {
        let z = self.noise(aug.tensor())?;
        aug.processed_frame().sub(&z)
    }
}

/// A full-frame augmented input with its clean frame.
#[derive(Clone, Debug)]
pub struct SpatialSample {
    pub aug: AugmentedInput,
    pub clean: Tensor<f32>,
}

/// Trains on random crops of `data`. `on_epoch(step, net)` runs after every
/// `steps_per_epoch` steps and after the last one.
pub fn train_spatial(
    net: &mut Scnn<f32>,
    data: &[SpatialSample],
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(u64, &Scnn<f32>) -> Result<()>,
) -> Result<Vec<LossPoint>> {
    spec.validate()?;
    for (i, s) in data.iter().enumerate() {
        let (_, h, w) = s.aug.frame_dims();
        s.clean
            .expect_shape("train_spatial", &[net.config.channels, h, w])
            .map_err(|e| Error::invalid("train_spatial", format!("sample {i}: {e}")))?;
    }
    let dims: Vec<(usize, usize)> = data
        .iter()
        .map(|s| {
            let (_, h, w) = s.aug.frame_dims();
            (h, w)
        })
        .collect();
    let mut sampler = CropSampler::new(spec.seed, spec.crop);
    let mut curve = Vec::with_capacity(spec.steps as usize);
    for step in 0..spec.steps {
        let mut xs = Vec::with_capacity(spec.batch);
        let mut targets = Vec::with_capacity(spec.batch);
        for _ in 0..spec.batch {
            let p = sampler.pick(&dims)?;
            let s = &data[p.sample];
            xs.push(s.aug.tensor().crop_spatial(p.y0, p.x0, spec.crop, spec.crop)?);
            targets.push(s.clean.crop_spatial(p.y0, p.x0, spec.crop, spec.crop)?);
        }
        let x = Tensor::stack(&xs)?;
        let clean = Tensor::stack(&targets)?;
        let y = Tensor::stack(
            &xs.iter()
                .map(|t| t.index_axis0(0)?.index_axis0(0))
                .collect::<Result<Vec<_>>>()?,
        )?;
        net.bank.zero_grad();
        let z = net.forward_train(&x)?;
        let yhat = y.sub(&z)?;
        let (mse, g) = central_mse(&yhat, &clean, spec.margin)?;
        net.backward(&g.scale(-1.0))?;
        optimizer_step(&mut net.bank, &spec.optimizer, step + 1, spec.epoch_of(step))?;
        curve.push(LossPoint::new(step, mse));
        if (step + 1) % spec.steps_per_epoch == 0 || step + 1 == spec.steps {
            on_epoch(step + 1, net)?;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_relative_error, numeric_gradient, probe, FD_EPS};
    use rand::Rng;

    fn tiny() -> ScnnConfig {
        ScnnConfig {
            neighbors: 3,
            groups: 2,
            channels: 1,
            kernel: 3,
            blocks: 3,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn paper_schedule_and_counts() {
        let c = ScnnConfig::paper();
        assert_eq!(c.neighbor_schedule(), vec![8, 4, 2, 1, 1]);
        let layers = c.layer_configs();
        assert_eq!(layers[4].f_out, 1);
        assert_eq!(layers[0].param_count(), 691_950);
        assert_eq!(layers[4].param_count(), 22_659);
        assert_eq!(c.bn_count(), 2_100);
        let net = Scnn::<f32>::new(c, 0).unwrap();
        assert_eq!(net.bank.total_count(), c.param_count());
        let rel = (c.param_count() as f64 - 1.34e6).abs() / 1.34e6;
        assert!(rel < 0.01, "{}", c.param_count());
    }

    #[test]
    fn zero_init_is_identity() {
        let net = Scnn::<f32>::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_fn(&[3, 2, 1, 6, 5], |_| rng.gen::<f32>());
        let aug = AugmentedInput::from_tensor(t).unwrap();
        assert_eq!(net.denoise(&aug).unwrap(), aug.processed_frame());
    }

    #[test]
    fn internal_shapes_follow_schedule() {
        let c = ScnnConfig {
            neighbors: 5,
            groups: 10,
            channels: 1,
            kernel: 3,
            blocks: 5,
        };
        let net = Scnn::<f64>::new(c, 0).unwrap();
        let mut h = random(&[1, 5, 10, 1, 4, 4], 1);
        let mut seen = Vec::new();
        for l in net.layers() {
            h = l.forward(&net.bank, &h).unwrap().0;
            seen.push(h.shape()[1..3].to_vec());
        }
        assert_eq!(
            seen,
            vec![vec![3, 10], vec![2, 10], vec![1, 10], vec![1, 10], vec![1, 1]]
        );
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Scnn::<f64>::new(tiny(), 0).unwrap();
        let err = net.backward(&Tensor::zeros(&[1, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::NoForward { .. }));
    }

    fn perturb(net: &mut Scnn<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in net.bank.entries_mut() {
            for v in e.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let mut net = Scnn::<f64>::new(tiny(), seed).unwrap();
            perturb(&mut net, seed + 10);
            let x = random(&[2, 3, 2, 1, 4, 3], seed);
            let z = net.forward_train(&x).unwrap();
            let r = random(z.shape(), seed + 20);
            net.bank.zero_grad();
            let dx = net.backward(&r).unwrap();

            let mut xs = x.data().to_vec();
            let num = numeric_gradient(&mut xs, FD_EPS, |v| {
                let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                probe(net.run(&t, BnMode::Train, false).unwrap().0.data(), r.data())
            });
            assert!(max_relative_error(dx.data(), &num) < 1e-4);

            let ids: Vec<_> = net.bank.ids().collect();
            for id in ids {
                let grad = net.bank.grad(id).data().to_vec();
                let mut vals = net.bank.value(id).data().to_vec();
                let num = numeric_gradient(&mut vals, FD_EPS, |v| {
                    let saved = net.bank.value(id).clone();
                    net.bank.value_mut(id).data_mut().copy_from_slice(v);
                    let out = probe(net.run(&x, BnMode::Train, false).unwrap().0.data(), r.data());
                    *net.bank.value_mut(id) = saved;
                    out
                });
                let e = max_relative_error(&grad, &num);
                assert!(e < 1e-4, "seed {seed} param {id:?}: {e}");
            }
        }
    }

    #[test]
    fn state_roundtrip_restores_outputs() {
        let mut net = Scnn::<f32>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[2, 3, 2, 1, 5, 5], |_| rng.gen::<f32>());
        net.forward_train(&x).unwrap();
        net.tape = None;
        for e in net.bank.entries_mut() {
            for v in e.value.data_mut() {
                *v += 0.01;
            }
        }
        let state = net.state();
        let mut fresh = Scnn::<f32>::new(tiny(), 99).unwrap();
        fresh.load_state(&state).unwrap();
        assert_eq!(fresh.noise(&x).unwrap(), net.noise(&x).unwrap());
        assert!(fresh.load_state(&state[1..]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut net = Scnn::<f32>::new(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = AugmentedInput::from_tensor(Tensor::from_fn(&[3, 2, 1, 8, 8], |_| rng.gen::<f32>())).unwrap();
        let clean = Tensor::from_fn(&[1, 8, 8], |_| rng.gen::<f32>());
        let before = net.state();
        let spec = TrainSpec {
            steps: 3,
            batch: 2,
            crop: 6,
            margin: 1,
            steps_per_epoch: 2,
            optimizer: crate::tensor::OptimizerSpec::with_lr(0.0),
            seed: 0,
        };
        let mut epochs = Vec::new();
        train_spatial(&mut net, &[SpatialSample { aug, clean }], &spec, |s, _| {
            epochs.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, vec![2, 3]);
        let after = net.state();
        for ((n, a), (_, b)) in before.iter().zip(&after) {
            if !n.contains("running") {
                assert_eq!(a, b, "{n}");
            }
        }
    }
}
