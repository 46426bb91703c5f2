//! Separable convolution over 5-D `[n, f, c, v, h]` tensors: a spatial
//! `m × m` convolution per (neighbor, patch) slice, a 1×1 mixing across the
//! patch axis per neighbor, then a 1×1 mixing across the neighbor axis per
//! (patch, channel). A leading batch axis is optional.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{grouped_conv2d_backward, grouped_conv2d_forward, ConvGeom, ParamBank, ParamId, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SepConvConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub c: usize,
    pub m: usize,
}

impl SepConvConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_in, self.n_out, self.f_in, self.f_out, self.c, self.m];
        if dims.contains(&0) {
            return Err(Error::invalid("sepconv config", format!("zero dimension in {self:?}")));
        }
        if self.m % 2 == 0 {
            return Err(Error::invalid(
                "sepconv config",
                format!("kernel side m={} must be odd", self.m),
            ));
        }
        Ok(())
    }

    pub fn vh_count(&self) -> usize {
        self.n_in * self.f_in * (self.c * self.c * self.m * self.m + self.c)
    }

    pub fn f_count(&self) -> usize {
        self.n_in * (self.c * self.c * self.f_in * self.f_out + self.c * self.f_out)
    }

    pub fn n_count(&self) -> usize {
        self.f_out * self.c * (self.n_in * self.n_out + self.n_out)
    }

    /// Closed-form number of trainable values (weights and biases).
    pub fn param_count(&self) -> usize {
        self.vh_count() + self.f_count() + self.n_count()
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.n_in, self.f_in, self.c]
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.n_out, self.f_out, self.c]
    }

    fn shapes(&self) -> [Vec<usize>; 6] {
        let (n_in, n_out, f_in, f_out, c, m) = (self.n_in, self.n_out, self.f_in, self.f_out, self.c, self.m);
        [
            vec![n_in * f_in, c, c, m, m],
            vec![n_in * f_in, c],
            vec![n_in, f_out * c, f_in * c, 1, 1],
            vec![n_in, f_out * c],
            vec![f_out * c, n_out, n_in, 1, 1],
            vec![f_out * c, n_out],
        ]
    }
}

const PARTS: [&str; 6] = ["vh.weight", "vh.bias", "f.weight", "f.bias", "n.weight", "n.bias"];

/// Handles of one layer's tensors inside a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SepConvIds {
    pub vh_weight: ParamId,
    pub vh_bias: ParamId,
    pub f_weight: ParamId,
    pub f_bias: ParamId,
    pub n_weight: ParamId,
    pub n_bias: ParamId,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SepConvCache<T> {
    batch: usize,
    v: usize,
    h: usize,
    input: Vec<T>,
    after_vh: Vec<T>,
    /// Output of the f stage transposed to `[B, f_out·c, n_in, v, h]`.
    after_f_t: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SepConv {
    pub config: SepConvConfig,
    pub ids: SepConvIds,
}

/// `[B, A, C, P] -> [B, C, A, P]`.
fn swap_axes<T: Copy>(src: &[T], b: usize, a: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for ci in 0..c {
            for ai in 0..a {
                let s = ((bi * a + ai) * c + ci) * p;
                out.extend_from_slice(&src[s..s + p]);
            }
        }
    }
    out
}

impl SepConv {
    /// Adds this layer's tensors to `bank` under `prefix`, with fan-in scaled
    /// Gaussian weights (`sqrt(2/fan_in)` spatial, `sqrt(1/fan_in)` mixing)
    /// and zero biases.
    pub fn register<T: Real>(
        config: SepConvConfig,
        bank: &mut ParamBank<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        let fan_in = [
            (config.c * config.m * config.m, 2.0),
            (config.c * config.f_in, 1.0),
            (config.n_in, 1.0),
        ];
        let mut ids = Vec::with_capacity(6);
        for (k, shape) in shapes.iter().enumerate() {
            let value = if k % 2 == 0 {
                let (fan, gain) = fan_in[k / 2];
                let std = (gain / fan as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(std * gaussian(rng)))
            } else {
                Tensor::zeros(shape)
            };
            ids.push(bank.add(format!("{prefix}.{}", PARTS[k]), value));
        }
        Ok(Self {
            config,
            ids: SepConvIds {
                vh_weight: ids[0],
                vh_bias: ids[1],
                f_weight: ids[2],
                f_bias: ids[3],
                n_weight: ids[4],
                n_bias: ids[5],
            },
        })
    }

    /// Number of values this layer holds in its bank.
    pub fn enumerated_count<T: Real>(&self, bank: &ParamBank<T>) -> usize {
        self.all_ids().iter().map(|&id| bank.value(id).len()).sum()
    }

    pub fn all_ids(&self) -> [ParamId; 6] {
        let i = &self.ids;
        [i.vh_weight, i.vh_bias, i.f_weight, i.f_bias, i.n_weight, i.n_bias]
    }

    fn split_input(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let (batch, rest) = match shape.len() {
            5 => (1, shape),
            6 => (shape[0], &shape[1..]),
            _ => {
                return Err(Error::shape(
                    "sepconv",
                    format!("input rank {} (shape {shape:?}), expected 5 or 6", shape.len()),
                ))
            }
        };
        let want = self.config.input_dims();
        for (k, (name, (&got, &exp))) in ["neighbors", "patches", "channels"]
            .iter()
            .zip(rest.iter().zip(&want))
            .enumerate()
        {
            if got != exp {
                return Err(Error::shape(
                    "sepconv",
                    format!("input {name} (axis {k}) is {got}, config expects {exp}"),
                ));
            }
        }
        Ok((batch, rest[3], rest[4]))
    }

    fn geoms(&self, v: usize, h: usize) -> [ConvGeom; 3] {
        let c = self.config;
        let g = |cin, cout, k| ConvGeom {
            cin,
            cout,
            h: v,
            w: h,
            kh: k,
            kw: k,
            pad: (k - 1) / 2,
        };
        [
            g(c.c, c.c, c.m),
            g(c.f_in * c.c, c.f_out * c.c, 1),
            g(c.n_in, c.n_out, 1),
        ]
    }

    pub fn forward<T: Real>(&self, bank: &ParamBank<T>, x: &Tensor<T>) -> Result<(Tensor<T>, SepConvCache<T>)> {
        let (batch, v, h) = self.split_input(x.shape())?;
        let c = self.config;
        let [g_vh, g_f, g_n] = self.geoms(v, h);
        let plane = v * h;
        let vh_sets = c.n_in * c.f_in;
        let after_vh = grouped_conv2d_forward(
            x.data(),
            batch * vh_sets,
            &g_vh,
            bank.value(self.ids.vh_weight).data(),
            bank.value(self.ids.vh_bias).data(),
            &|g| g % vh_sets,
        );
        let n_in = c.n_in;
        let after_f = grouped_conv2d_forward(
            &after_vh,
            batch * n_in,
            &g_f,
            bank.value(self.ids.f_weight).data(),
            bank.value(self.ids.f_bias).data(),
            &|g| g % n_in,
        );
        let fc = c.f_out * c.c;
        let after_f_t = swap_axes(&after_f, batch, n_in, fc, plane);
        let out_t = grouped_conv2d_forward(
            &after_f_t,
            batch * fc,
            &g_n,
            bank.value(self.ids.n_weight).data(),
            bank.value(self.ids.n_bias).data(),
            &|g| g % fc,
        );
        let out = swap_axes(&out_t, batch, fc, c.n_out, plane);
        let mut shape = Vec::with_capacity(6);
        if x.rank() == 6 {
            shape.push(batch);
        }
        shape.extend_from_slice(&[c.n_out, c.f_out, c.c, v, h]);
        Ok((
            Tensor::new(shape, out)?,
            SepConvCache {
                batch,
                v,
                h,
                input: x.data().to_vec(),
                after_vh,
                after_f_t,
            },
        ))
    }

    /// Accumulates parameter gradients into `bank` and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        bank: &mut ParamBank<T>,
        cache: &SepConvCache<T>,
        grad: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let c = self.config;
        let (batch, v, h) = (cache.batch, cache.v, cache.h);
        let plane = v * h;
        let expected = batch * c.n_out * c.f_out * c.c * plane;
        if grad.len() != expected {
            return Err(Error::shape(
                "sepconv backward",
                format!("upstream has {} elements, forward produced {expected}", grad.len()),
            ));
        }
        let [g_vh, g_f, g_n] = self.geoms(v, h);
        let fc = c.f_out * c.c;
        let n_in = c.n_in;
        let vh_sets = c.n_in * c.f_in;

        let grad_t = swap_axes(grad.data(), batch, c.n_out, fc, plane);
        let (d_after_f_t, dw, db) = grouped_conv2d_backward(
            &cache.after_f_t,
            batch * fc,
            &g_n,
            bank.value(self.ids.n_weight).data(),
            fc,
            &|g| g % fc,
            &grad_t,
        );
        bank.accumulate(self.ids.n_weight, &dw);
        bank.accumulate(self.ids.n_bias, &db);

        let d_after_f = swap_axes(&d_after_f_t, batch, fc, n_in, plane);
        let (d_after_vh, dw, db) = grouped_conv2d_backward(
            &cache.after_vh,
            batch * n_in,
            &g_f,
            bank.value(self.ids.f_weight).data(),
            n_in,
            &|g| g % n_in,
            &d_after_f,
        );
        bank.accumulate(self.ids.f_weight, &dw);
        bank.accumulate(self.ids.f_bias, &db);

        let (dx, dw, db) = grouped_conv2d_backward(
            &cache.input,
            batch * vh_sets,
            &g_vh,
            bank.value(self.ids.vh_weight).data(),
            vh_sets,
            &|g| g % vh_sets,
            &d_after_vh,
        );
        bank.accumulate(self.ids.vh_weight, &dw);
        bank.accumulate(self.ids.vh_bias, &db);

        let mut shape = Vec::with_capacity(6);
        if grad.rank() == 6 {
            shape.push(batch);
        }
        shape.extend_from_slice(&[c.n_in, c.f_in, c.c, v, h]);
        Tensor::new(shape, dx)
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
