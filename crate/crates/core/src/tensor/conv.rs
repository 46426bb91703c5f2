//! 2-D and 3-D cross-correlation with zero padding, forward and backward.
//!
//! Inner loops accumulate in `f64` regardless of the element type. Each output
//! element is produced by exactly one task with a fixed summation order, so
//! results do not depend on the rayon worker count.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry shared by every plane of a grouped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn kernel_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::shape(
                op,
                format!("kernel {}x{} must have odd sides", self.kh, self.kw),
            ));
        }
        let same = (self.kh - 1) / 2;
        if self.pad != 0 && (self.pad != same || self.kh != self.kw) {
            return Err(Error::invalid(
                op,
                format!("pad {} must be 0 or (k-1)/2 = {same}", self.pad),
            ));
        }
        if self.h + 2 * self.pad < self.kh || self.w + 2 * self.pad < self.kw {
            return Err(Error::shape(
                op,
                format!(
                    "spatial extent {}x{} smaller than kernel {}x{}",
                    self.h, self.w, self.kh, self.kw
                ),
            ));
        }
        Ok(())
    }
}

/// Range of output columns `ox` for which `ox + kx - pad` is a valid input column.
#[inline(always)]
fn col_range(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// `acc[oy, ox] += wv * src[oy + ky - pad, ox + kx - pad]`
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_tap<T: Real>(
    acc: &mut [f64],
    src: &[T],
    h: usize,
    w: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    wv: f64,
) {
    if wv == 0.0 {
        return;
    }
    let oh = acc.len() / ow;
    let (x_lo, x_hi) = col_range(kx, pad, w, ow);
    for oy in 0..oh {
        let iy = oy as isize + ky as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
        let acc_row = &mut acc[oy * ow..(oy + 1) * ow];
        let shift = kx as isize - pad as isize;
        for ox in x_lo..x_hi {
            acc_row[ox] += wv * src_row[(ox as isize + shift) as usize].f64();
        }
    }
}

/// `acc[oy + ky - pad, ox + kx - pad] += wv * grad[oy, ox]` (input-sized `acc`).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn scatter_tap<T: Real>(
    acc: &mut [f64],
    grad: &[T],
    h: usize,
    w: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    pad: usize,
    wv: f64,
) {
    if wv == 0.0 {
        return;
    }
    let oh = grad.len() / ow;
    let (x_lo, x_hi) = col_range(kx, pad, w, ow);
    for oy in 0..oh {
        let iy = oy as isize + ky as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let g_row = &grad[oy * ow..(oy + 1) * ow];
        let acc_row = &mut acc[iy as usize * w..(iy as usize + 1) * w];
        let shift = kx as isize - pad as isize;
        for ox in x_lo..x_hi {
            acc_row[(ox as isize + shift) as usize] += wv * g_row[ox].f64();
        }
    }
}

/// `Σ grad[oy, ox] * src[oy + ky - pad, ox + kx - pad]`
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tap_dot<T: Real>(grad: &[T], src: &[T], h: usize, w: usize, ow: usize, ky: usize, kx: usize, pad: usize) -> f64 {
    let oh = grad.len() / ow;
    let (x_lo, x_hi) = col_range(kx, pad, w, ow);
    let mut s = 0.0;
    for oy in 0..oh {
        let iy = oy as isize + ky as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
        let g_row = &grad[oy * ow..(oy + 1) * ow];
        let shift = kx as isize - pad as isize;
        for ox in x_lo..x_hi {
            s += g_row[ox].f64() * src_row[(ox as isize + shift) as usize].f64();
        }
    }
    s
}

/// Forward pass of `groups` independent convolutions. Group `g` reads
/// `x[g] : [cin, h, w]` and uses kernel set `set_of(g)` out of
/// `weights : [sets, cout, cin, kh, kw]`, `bias : [sets, cout]`.
pub(crate) fn grouped_conv2d_forward<T: Real>(
    x: &[T],
    groups: usize,
    geom: &ConvGeom,
    weights: &[T],
    bias: &[T],
    set_of: &(dyn Fn(usize) -> usize + Sync),
) -> Vec<T> {
    let (h, w) = (geom.h, geom.w);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let plane_in = h * w;
    let plane_out = oh * ow;
    let klen = geom.kernel_len();
    debug_assert_eq!(x.len(), groups * geom.cin * plane_in);
    let mut out = vec![T::zero(); groups * geom.cout * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each_init(
        || vec![0.0f64; plane_out],
        |acc, (idx, dst)| {
            let (g, o) = (idx / geom.cout, idx % geom.cout);
            let s = set_of(g);
            acc.fill(bias[s * geom.cout + o].f64());
            let kernel = &weights[(s * geom.cout + o) * klen..(s * geom.cout + o + 1) * klen];
            for i in 0..geom.cin {
                let src = &x[(g * geom.cin + i) * plane_in..(g * geom.cin + i + 1) * plane_in];
                for ky in 0..geom.kh {
                    for kx in 0..geom.kw {
                        let wv = kernel[(i * geom.kh + ky) * geom.kw + kx].f64();
                        correlate_tap(acc, src, h, w, ow, ky, kx, geom.pad, wv);
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::of(*a);
            }
        },
    );
    out
}

/// Backward of [`grouped_conv2d_forward`]: returns `(dx, dweights, dbias)`.
/// Kernel-set reductions run over groups in ascending order.
pub(crate) fn grouped_conv2d_backward<T: Real>(
    x: &[T],
    groups: usize,
    geom: &ConvGeom,
    weights: &[T],
    sets: usize,
    set_of: &(dyn Fn(usize) -> usize + Sync),
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h, w) = (geom.h, geom.w);
    let ow = geom.out_w();
    let plane_in = h * w;
    let plane_out = geom.out_h() * ow;
    let klen = geom.kernel_len();

    let mut dx = vec![T::zero(); groups * geom.cin * plane_in];
    dx.par_chunks_mut(plane_in).enumerate().for_each_init(
        || vec![0.0f64; plane_in],
        |acc, (idx, dst)| {
            let (g, i) = (idx / geom.cin, idx % geom.cin);
            let s = set_of(g);
            acc.fill(0.0);
            for o in 0..geom.cout {
                let go = &grad_out[(g * geom.cout + o) * plane_out..(g * geom.cout + o + 1) * plane_out];
                let kernel = &weights[(s * geom.cout + o) * klen..(s * geom.cout + o + 1) * klen];
                for ky in 0..geom.kh {
                    for kx in 0..geom.kw {
                        let wv = kernel[(i * geom.kh + ky) * geom.kw + kx].f64();
                        scatter_tap(acc, go, h, w, ow, ky, kx, geom.pad, wv);
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::of(*a);
            }
        },
    );

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sets];
    for g in 0..groups {
        members[set_of(g)].push(g);
    }

    let mut dw = vec![T::zero(); sets * geom.cout * klen];
    let mut db = vec![T::zero(); sets * geom.cout];
    dw.par_chunks_mut(klen)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (dk, dbias))| {
            let (s, o) = (idx / geom.cout, idx % geom.cout);
            let mut acc = vec![0.0f64; klen];
            let mut bacc = 0.0f64;
            for &g in &members[s] {
                let go = &grad_out[(g * geom.cout + o) * plane_out..(g * geom.cout + o + 1) * plane_out];
                bacc += go.iter().map(|v| v.f64()).sum::<f64>();
                for i in 0..geom.cin {
                    let src = &x[(g * geom.cin + i) * plane_in..(g * geom.cin + i + 1) * plane_in];
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            acc[(i * geom.kh + ky) * geom.kw + kx] += tap_dot(go, src, h, w, ow, ky, kx, geom.pad);
                        }
                    }
                }
            }
            for (d, a) in dk.iter_mut().zip(&acc) {
                *d = T::of(*a);
            }
            *dbias = T::of(bacc);
        });
    (dx, dw, db)
}

/// Splits an optional leading batch axis: `[C,H,W]` → (1, C, H, W), `[B,C,H,W]` → (B, C, H, W).
fn batch_dims(op: &'static str, shape: &[usize], spatial_rank: usize) -> Result<(usize, Vec<usize>)> {
    match shape.len() {
        r if r == spatial_rank + 1 => Ok((1, shape.to_vec())),
        r if r == spatial_rank + 2 => Ok((shape[0], shape[1..].to_vec())),
        _ => Err(Error::shape(
            op,
            format!("input rank {} (shape {shape:?}) not supported", shape.len()),
        )),
    }
}

fn conv2d_geom<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<(usize, ConvGeom)> {
    let (batch, dims) = batch_dims(op, input.shape(), 2)?;
    kernels.expect_rank(op, 4)?;
    let ks = kernels.shape();
    if ks[1] != dims[0] {
        return Err(Error::shape(
            op,
            format!("input channels: input has {}, kernels expect {}", dims[0], ks[1]),
        ));
    }
    if bias.shape() != [ks[0]] {
        return Err(Error::shape(
            op,
            format!("output channels: bias {:?} vs kernels {}", bias.shape(), ks[0]),
        ));
    }
    let geom = ConvGeom {
        cin: dims[0],
        cout: ks[0],
        h: dims[1],
        w: dims[2],
        kh: ks[2],
        kw: ks[3],
        pad,
    };
    geom.validate(op)?;
    Ok((batch, geom))
}

/// 2-D cross-correlation (no kernel flip).
///
/// `input` is `[Cin,H,W]` or `[B,Cin,H,W]`, `kernels` `[Cout,Cin,kh,kw]`,
/// `bias` `[Cout]`. `pad` must be 0 or `(k-1)/2`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (batch, geom) = conv2d_geom("conv2d", input, kernels, bias, pad)?;
    let out = grouped_conv2d_forward(input.data(), batch, &geom, kernels.data(), bias.data(), &|_| 0);
    let mut shape = vec![geom.cout, geom.out_h(), geom.out_w()];
    if input.rank() == 4 {
        shape.insert(0, batch);
    }
    Tensor::new(shape, out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let bias_shape = Tensor::zeros(&[kernels.shape().first().copied().unwrap_or(1)]);
    let (batch, geom) = conv2d_geom("conv2d_backward", input, kernels, &bias_shape, pad)?;
    let mut expect = vec![geom.cout, geom.out_h(), geom.out_w()];
    if input.rank() == 4 {
        expect.insert(0, batch);
    }
    grad_out.expect_shape("conv2d_backward", &expect)?;
    let (dx, dw, db) = grouped_conv2d_backward(input.data(), batch, &geom, kernels.data(), 1, &|_| 0, grad_out.data());
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernels: Tensor::new(kernels.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![geom.cout], db)?,
    })
}

#[derive(Clone, Copy, Debug)]
struct Conv3dGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad: usize,
}

impl Conv3dGeom {
    fn out_t(&self) -> usize {
        self.t + 1 - self.kt
    }
}

fn conv3d_geom<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    cout_check: Option<&Tensor<T>>,
) -> Result<Conv3dGeom> {
    let (batch, dims) = batch_dims(op, input.shape(), 3)?;
    kernels.expect_rank(op, 5)?;
    let ks = kernels.shape();
    if ks[1] != dims[0] {
        return Err(Error::shape(
            op,
            format!("input channels: input has {}, kernels expect {}", dims[0], ks[1]),
        ));
    }
    if let Some(bias) = cout_check {
        if bias.shape() != [ks[0]] {
            return Err(Error::shape(
                op,
                format!("output channels: bias {:?} vs kernels {}", bias.shape(), ks[0]),
            ));
        }
    }
    if dims[1] < ks[2] {
        return Err(Error::shape(
            op,
            format!("temporal extent {} shorter than kernel depth {}", dims[1], ks[2]),
        ));
    }
    if ks[3] % 2 == 0 || ks[4] % 2 == 0 || ks[3] != ks[4] {
        return Err(Error::shape(
            op,
            format!("spatial kernel {}x{} must be square with odd side", ks[3], ks[4]),
        ));
    }
    Ok(Conv3dGeom {
        batch,
        cin: dims[0],
        cout: ks[0],
        t: dims[1],
        h: dims[2],
        w: dims[3],
        kt: ks[2],
        kh: ks[3],
        kw: ks[4],
        pad: (ks[3] - 1) / 2,
    })
}

/// 3-D cross-correlation with no temporal padding and zero spatial padding
/// `(k-1)/2`. `input` is `[Cin,T,H,W]` or `[B,Cin,T,H,W]`; the output keeps
/// `H,W` and has temporal length `T - kt + 1`.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = conv3d_geom("conv3d", input, kernels, Some(bias))?;
    let plane = g.h * g.w;
    let ot = g.out_t();
    let klen = g.cin * g.kt * g.kh * g.kw;
    let x = input.data();
    let wts = kernels.data();
    let b = bias.data();
    let mut out = vec![T::zero(); g.batch * g.cout * ot * plane];
    out.par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (idx, dst)| {
            let to = idx % ot;
            let o = (idx / ot) % g.cout;
            let bi = idx / (ot * g.cout);
            acc.fill(b[o].f64());
            let kernel = &wts[o * klen..(o + 1) * klen];
            for i in 0..g.cin {
                for dt in 0..g.kt {
                    let base = ((bi * g.cin + i) * g.t + to + dt) * plane;
                    let src = &x[base..base + plane];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = kernel[((i * g.kt + dt) * g.kh + ky) * g.kw + kx].f64();
                            correlate_tap(acc, src, g.h, g.w, g.w, ky, kx, g.pad, wv);
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::of(*a);
            }
        },
    );
    let mut shape = vec![g.cout, ot, g.h, g.w];
    if input.rank() == 5 {
        shape.insert(0, g.batch);
    }
    Tensor::new(shape, out)
}

#[derive(Clone, Debug)]
pub struct Conv3dGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv3dGrads<T>> {
    let g = conv3d_geom("conv3d_backward", input, kernels, None)?;
    let plane = g.h * g.w;
    let ot = g.out_t();
    let klen = g.cin * g.kt * g.kh * g.kw;
    let mut expect = vec![g.cout, ot, g.h, g.w];
    if input.rank() == 5 {
        expect.insert(0, g.batch);
    }
    grad_out.expect_shape("conv3d_backward", &expect)?;
    let x = input.data();
    let wts = kernels.data();
    let go = grad_out.data();

    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (idx, dst)| {
            let ti = idx % g.t;
            let i = (idx / g.t) % g.cin;
            let bi = idx / (g.t * g.cin);
            acc.fill(0.0);
            for o in 0..g.cout {
                for dt in 0..g.kt {
                    if ti < dt || ti - dt >= ot {
                        continue;
                    }
                    let to = ti - dt;
                    let base = ((bi * g.cout + o) * ot + to) * plane;
                    let gplane = &go[base..base + plane];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wts[o * klen + ((i * g.kt + dt) * g.kh + ky) * g.kw + kx].f64();
                            scatter_tap(acc, gplane, g.h, g.w, g.w, ky, kx, g.pad, wv);
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc.iter()) {
                *d = T::of(*a);
            }
        },
    );

    let mut dw = vec![T::zero(); wts.len()];
    let mut db = vec![T::zero(); g.cout];
    dw.par_chunks_mut(klen)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(o, (dk, dbias))| {
            let mut acc = vec![0.0f64; klen];
            let mut bacc = 0.0;
            for bi in 0..g.batch {
                for to in 0..ot {
                    let base = ((bi * g.cout + o) * ot + to) * plane;
                    let gplane = &go[base..base + plane];
                    bacc += gplane.iter().map(|v| v.f64()).sum::<f64>();
                    for i in 0..g.cin {
                        for dt in 0..g.kt {
                            let xb = ((bi * g.cin + i) * g.t + to + dt) * plane;
                            let src = &x[xb..xb + plane];
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    acc[((i * g.kt + dt) * g.kh + ky) * g.kw + kx] +=
                                        tap_dot(gplane, src, g.h, g.w, g.w, ky, kx, g.pad);
                                }
                            }
                        }
                    }
                }
            }
            for (d, a) in dk.iter_mut().zip(&acc) {
                *d = T::of(*a);
            }
            *dbias = T::of(bacc);
        });

    Ok(Conv3dGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernels: Tensor::new(kernels.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive quadruple loop over (o, y, x, i, ky, kx) with explicit bounds checks.
    fn naive_conv2d(input: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        Tensor::from_fn(&[cout, oh, ow], |idx| {
            let (o, y, x) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
            let mut s = b[o];
            for i in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = y as isize + ky as isize - pad as isize;
                        let ix = x as isize + kx as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += input.data()[(i * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * cin + i) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 5], |i| i as f32 * 0.5 - 2.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f32);
        let b = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.5));
        assert!(y.data()[16..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn ones_kernel_on_ramp_matches_naive() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 3], |i| (i + 1) as f64);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data()[4], 45.0);
        // border sums: corners see 4 cells, edges 6
        assert_eq!(y.data(), &[12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0]);
        assert_eq!(y, naive_conv2d(&x, &k, &[0.0], 1));
    }

    #[test]
    fn random_shapes_match_naive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(k, pad) in &[(1usize, 0usize), (3, 1), (3, 0), (5, 2), (7, 3)] {
            let x = Tensor::<f64>::from_fn(&[2, 8, 9], |_| rng.gen_range(-1.0..1.0));
            let w = Tensor::from_fn(&[3, 2, k, k], |_| rng.gen_range(-1.0..1.0));
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d(&x, &w, &Tensor::new(vec![3], b.clone()).unwrap(), pad).unwrap();
            let want = naive_conv2d(&x, &w, &b, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
            if pad > 0 {
                assert_eq!(&got.shape()[1..], &[8, 9]);
            }
        }
    }

    #[test]
    fn shape_errors_name_dimension() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[2]), 1).unwrap_err().to_string();
        assert!(err.contains("output channels"), "{err}");
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), 0).is_err());
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 2).is_err());
    }

    #[test]
    fn one_by_one_kernel_gradient_is_input_dot_upstream() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| (i as f64).sin());
        let g = Tensor::<f64>::from_fn(&[1, 3, 4], |i| (i as f64 * 0.7).cos());
        let k = Tensor::full(&[1, 1, 1, 1], 0.3);
        let grads = conv2d_backward(&x, &k, 0, &g).unwrap();
        let expect: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.kernels.data()[0] - expect).abs() < 1e-12);
        assert!((grads.bias.data()[0] - g.sum_f64()).abs() < 1e-12);
    }

    #[test]
    fn conv3d_shapes_and_constant_interior() {
        let x = Tensor::<f64>::full(&[2, 7, 5, 5], 0.25);
        let k = Tensor::full(&[1, 2, 3, 3, 3], 1.0);
        let y = conv3d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 5]);
        // interior voxel: 27 taps x 0.25 x 2 channels
        assert_eq!(y.data()[2 * 25 + 2 * 5 + 2], 27.0 * 0.25 * 2.0);
        let short = Tensor::<f64>::zeros(&[2, 2, 5, 5]);
        assert!(conv3d(&short, &k, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn stacked_conv3d_reduces_seven_frames_to_one() {
        let mut x = Tensor::<f32>::full(&[1, 7, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3, 3], 0.01);
        let mut lengths = vec![7];
        for _ in 0..3 {
            x = conv3d(&x, &k, &Tensor::zeros(&[1])).unwrap();
            lengths.push(x.shape()[1]);
        }
        assert_eq!(lengths, vec![7, 5, 3, 1]);
    }
}
