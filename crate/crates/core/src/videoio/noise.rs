//! Counter-based Gaussian noise: every sample is a pure function of
//! `(seed, frame, flat position)`, so generation order and parallelism never
//! change the result.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation on the 0..255 scale.
    pub sigma: f64,
    /// Truncate noisy values to `[0, 1]`.
    pub clipped: bool,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 25.0,
            clipped: false,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn std_unit(&self) -> f64 {
        self.sigma / 255.0
    }
}

#[inline(always)]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for one frame; combine with a position via [`standard_normal`].
#[inline]
pub fn frame_key(seed: u64, frame: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ frame.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Standard normal sample for `(frame_key, index)` via Box-Muller.
#[inline]
pub fn standard_normal(key: u64, index: u64) -> f64 {
    let h1 = splitmix64(key ^ splitmix64(index));
    let h2 = splitmix64(h1);
    let u1 = ((h1 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (h2 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}
