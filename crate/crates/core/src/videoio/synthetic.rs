//! Deterministic synthetic clips with strong temporal redundancy:
//! textures translating by whole pixels per frame, and patterns rotating
//! about the frame center.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Translate,
    Rotate,
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "rotate" => Ok(Self::Rotate),
            _ => Err(Error::Config(format!("unknown motion kind {s:?} (translate|rotate)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub kind: MotionKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ring { cy: f64, cx: f64, r0: f64, r1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ring { cy, cx, r0, r1 } => {
                let d = (y - cy).powi(2) + (x - cx).powi(2);
                d >= r0 * r0 && d <= r1 * r1
            }
        }
    }
}

struct Wave {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: Vec<f64>,
}

/// Random piecewise-constant shapes over a smooth background with a faint
/// oriented wave, evaluated at continuous coordinates.
struct Pattern {
    base: Vec<f64>,
    grad: (f64, f64),
    shapes: Vec<(Shape, Vec<f64>)>,
    waves: Vec<Wave>,
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng, extent: f64, channels: usize) -> Self {
        let color = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let g = rng.gen_range(0.1..0.9);
            (0..channels)
                .map(|_| (g + rng.gen_range(-0.15..0.15f64)).clamp(0.05, 0.95))
                .collect()
        };
        let base = color(rng);
        let grad = (rng.gen_range(-0.3..0.3) / extent, rng.gen_range(-0.3..0.3) / extent);
        let count = rng.gen_range(10..18) + (extent * extent / 250.0) as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let cy = rng.gen_range(-0.1..1.1) * extent;
            let cx = rng.gen_range(-0.1..1.1) * extent;
            let size = rng.gen_range(0.04..0.2) * extent;
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Disc { cy, cx, r: size },
                1 => Shape::Rect {
                    y0: cy - size,
                    x0: cx - size * rng.gen_range(0.4..1.6),
                    y1: cy + size * rng.gen_range(0.4..1.6),
                    x1: cx + size,
                },
                _ => Shape::Ring {
                    cy,
                    cx,
                    r0: size * 0.6,
                    r1: size,
                },
            };
            shapes.push((shape, color(rng)));
        }
        let waves = (0..2)
            .map(|_| {
                let period = rng.gen_range(5.0..13.0);
                let theta: f64 = rng.gen_range(0.0..PI);
                Wave {
                    ky: 2.0 * PI * theta.sin() / period,
                    kx: 2.0 * PI * theta.cos() / period,
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: (0..channels).map(|_| rng.gen_range(0.02..0.06)).collect(),
                }
            })
            .collect();
        Self {
            base,
            grad,
            shapes,
            waves,
        }
    }

    fn eval(&self, y: f64, x: f64, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.base[c] + self.grad.0 * y + self.grad.1 * x;
        }
        for (shape, col) in &self.shapes {
            if shape.contains(y, x) {
                out.copy_from_slice(col);
            }
        }
        for w in &self.waves {
            let s = (w.ky * y + w.kx * x + w.phase).sin();
            for (c, o) in out.iter_mut().enumerate() {
                *o += w.amp[c] * s;
            }
        }
        for o in out.iter_mut() {
            *o = o.clamp(0.0, 1.0);
        }
    }

    /// 2×2 supersampled pixel value at integer position `(y, x)` after mapping
    /// sample points through `map`.
    fn pixel(&self, y: f64, x: f64, map: &impl Fn(f64, f64) -> (f64, f64), out: &mut [f64]) {
        let mut acc = vec![0.0; out.len()];
        let mut tmp = vec![0.0; out.len()];
        for &(dy, dx) in &[(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
            let (py, px) = map(y + dy, x + dx);
            self.eval(py, px, &mut tmp);
            for (a, t) in acc.iter_mut().zip(&tmp) {
                *a += t;
            }
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = a / 4.0;
        }
    }
}

fn render(
    spec: &ClipSpec,
    map_for_frame: impl Fn(usize, f64, f64) -> (f64, f64),
    pattern: &Pattern,
) -> Vec<Tensor<f32>> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut px = vec![0.0; c];
    (0..spec.frames)
        .map(|t| {
            let mut data = vec![0.0f32; c * h * w];
            let map = |y: f64, x: f64| map_for_frame(t, y, x);
            for y in 0..h {
                for x in 0..w {
                    pattern.pixel(y as f64, x as f64, &map, &mut px);
                    for ch in 0..c {
                        data[(ch * h + y) * w + x] = px[ch] as f32;
                    }
                }
            }
            Tensor::new(vec![c, h, w], data).expect("consistent frame shape")
        })
        .collect()
}

/// Generates one clip. Output values lie in `[0, 1]`.
pub fn make_clip(spec: &ClipSpec) -> Result<FrameSequence> {
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::invalid("make_clip", "empty clip requested"));
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::invalid("make_clip", "channels must be 1 or 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = match spec.kind {
        MotionKind::Translate => {
            let (vy, vx) = loop {
                let v: (i64, i64) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
                if v != (0, 0) {
                    break v;
                }
            };
            let travel = spec.frames as f64;
            let extent = spec.height.max(spec.width) as f64 + 2.0 * travel;
            let pattern = Pattern::random(&mut rng, extent, spec.channels);
            let (oy, ox) = (travel, travel);
            render(
                spec,
                |t, y, x| (y + oy + (vy * t as i64) as f64, x + ox + (vx * t as i64) as f64),
                &pattern,
            )
        }
        MotionKind::Rotate => {
            let extent = spec.height.max(spec.width) as f64 * 1.5;
            let pattern = Pattern::random(&mut rng, extent, spec.channels);
            let omega = rng.gen_range(2.0..5.0f64).to_radians() * if rng.gen() { 1.0 } else { -1.0 };
            let (cy, cx) = ((spec.height as f64 - 1.0) / 2.0, (spec.width as f64 - 1.0) / 2.0);
            let half = extent / 2.0;
            render(
                spec,
                |t, y, x| {
                    let a = omega * t as f64;
                    let (dy, dx) = (y - cy, x - cx);
                    (half + dy * a.cos() - dx * a.sin(), half + dy * a.sin() + dx * a.cos())
                },
                &pattern,
            )
        }
    };
    FrameSequence::new(frames)
}
