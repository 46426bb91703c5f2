//! Browser demo over a synthetic clip: add noise and measure PSNR, view
//! patch-craft frames and score maps, and list the neighbors of a pixel.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`.

use pacnet::patchcraft::{augment_with_neighbors, AugmentedInput};
use pacnet::patchmatch::{search_neighbors, NeighborMap, PatchSpec, SearchWindow};
use pacnet::videoio::synthetic::{make_clip, ClipSpec, MotionKind};
use pacnet::videoio::{add_noise, sequence_psnr, FrameSequence, NoiseSpec};
use pacnet::Tensor;
use wasm_bindgen::prelude::*;

fn js_err(e: pacnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grayscale `[1,H,W]` or color `[3,H,W]` frame to RGBA, values clamped.
pub fn to_rgba(frame: &Tensor<f32>) -> Vec<u8> {
    let s = frame.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = frame.data();
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        let ch = |k: usize| byte(d[k.min(c - 1) * plane + p]);
        out.extend_from_slice(&[ch(0), ch(1), ch(2), 255]);
    }
    out
}

/// Score map scaled so its maximum is white.
fn normalized(map: &Tensor<f32>) -> Tensor<f32> {
    let top = map.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if top > 0.0 {
        map.scale(1.0 / top)
    } else {
        map.clone()
    }
}

#[wasm_bindgen]
pub struct Demo {
    clean: FrameSequence,
    noisy: FrameSequence,
    spec: PatchSpec,
    window: SearchWindow,
    neighbors: usize,
    current: Option<(usize, NeighborMap, AugmentedInput)>,
}

#[wasm_bindgen]
impl Demo {
    /// `kind` is `translate` or `rotate`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, frames: usize, size: usize, seed: u64) -> Result<Demo, JsError> {
        let kind: MotionKind = kind.parse().map_err(js_err)?;
        let clean = make_clip(&ClipSpec {
            kind,
            frames,
            height: size,
            width: size,
            channels: 1,
            seed,
        })
        .map_err(js_err)?;
        Ok(Demo {
            noisy: clean.clone(),
            clean,
            spec: PatchSpec {
                search_side: 7,
                stitch_side: 3,
            },
            window: SearchWindow {
                side: 15,
                temporal_radius: 1,
            },
            neighbors: 4,
            current: None,
        })
    }

    pub fn width(&self) -> usize {
        self.clean.dims().2
    }

    pub fn height(&self) -> usize {
        self.clean.dims().1
    }

    pub fn frames(&self) -> usize {
        self.clean.len()
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbors
    }

    pub fn groups(&self) -> usize {
        self.spec.groups()
    }

    /// Re-noises the clip; returns the sequence PSNR in dB.
    pub fn set_noise(&mut self, sigma: f64, clipped: bool, seed: u64) -> Result<f64, JsError> {
        self.noisy = add_noise(&self.clean, &NoiseSpec { sigma, clipped, seed });
        self.current = None;
        sequence_psnr(&self.clean, &self.noisy).map_err(js_err)
    }

    pub fn clean_rgba(&self, t: usize) -> Vec<u8> {
        to_rgba(self.clean.frame(t.min(self.clean.len() - 1)))
    }

    pub fn noisy_rgba(&self, t: usize) -> Vec<u8> {
        to_rgba(self.noisy.frame(t.min(self.noisy.len() - 1)))
    }

    fn augmented(&mut self, t: usize) -> Result<&(usize, NeighborMap, AugmentedInput), JsError> {
        if self.current.as_ref().map(|c| c.0) != Some(t) {
            let map = search_neighbors(&self.noisy, t, &self.spec, &self.window, self.neighbors).map_err(js_err)?;
            let aug = augment_with_neighbors(&self.noisy, t, &map, &self.spec).map_err(js_err)?;
            self.current = Some((t, map, aug));
        }
        Ok(self.current.as_ref().expect("just set"))
    }

    /// Patch-craft frame `j` (0 is the noisy frame itself) of offset group `i`.
    pub fn patch_craft_rgba(&mut self, t: usize, j: usize, i: usize) -> Result<Vec<u8>, JsError> {
        let (_, _, aug) = self.augmented(t)?;
        Ok(to_rgba(&aug.slice(j, i).map_err(js_err)?))
    }

    /// Score map of neighbor `j`, scaled to its own maximum.
    pub fn score_rgba(&mut self, t: usize, j: usize) -> Result<Vec<u8>, JsError> {
        let groups = self.spec.groups();
        let (_, _, aug) = self.augmented(t)?;
        Ok(to_rgba(&normalized(&aug.slice(j, groups).map_err(js_err)?)))
    }

    /// Neighbors of pixel `(y, x)` in frame `t`, flattened as `t, y, x, dist`.
    pub fn neighbors_of(&mut self, t: usize, y: usize, x: usize) -> Result<Vec<f64>, JsError> {
        let (h, w) = (self.height(), self.width());
        if y >= h || x >= w {
            return Err(JsError::new(&format!("pixel ({y}, {x}) outside {h}x{w}")));
        }
        let (_, map, _) = self.augmented(t)?;
        Ok(map
            .at(y, x)
            .iter()
            .flat_map(|n| [n.t as f64, n.y as f64, n.x as f64, n.dist])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_layout() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(to_rgba(&t), vec![0, 0, 0, 255, 255, 255, 255, 255]);
        let c = Tensor::new(vec![3, 1, 1], vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!(to_rgba(&c), vec![255, 128, 0, 255]);
    }

    #[test]
    fn demo_operations() {
        let mut d = Demo::new("translate", 3, 24, 1).unwrap();
        let p = d.set_noise(25.0, false, 7).unwrap();
        assert!(p > 15.0 && p < 25.0, "{p}");
        assert_eq!(d.noisy_rgba(0).len(), 24 * 24 * 4);
        assert_eq!(d.patch_craft_rgba(1, 0, 0).unwrap(), d.noisy_rgba(1));
        assert_eq!(d.patch_craft_rgba(1, 2, 5).unwrap().len(), 24 * 24 * 4);
        assert!(d.score_rgba(1, 0).unwrap().chunks(4).all(|px| px[0] == 0));
        let n = d.neighbors_of(1, 5, 6).unwrap();
        assert_eq!(n.len(), 4 * d.neighbor_count());
        assert!(n.chunks(4).all(|e| e[0] <= 2.0 && e[3] >= 0.0));
        assert!(n.chunks(4).zip(n.chunks(4).skip(1)).all(|(a, b)| a[3] <= b[3]));
    }
}
