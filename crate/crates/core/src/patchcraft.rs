//! Patch-craft frames: artificial frames tiled from the central parts of
//! matched neighbor patches, one group per tiling offset, plus per-neighbor
//! score maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchmatch::{mirror_index, mirror_pad, search_neighbors, NeighborMap, PatchSpec, SearchWindow};
use crate::tensor::Tensor;
use crate::videoio::FrameSequence;

/// Patch-craft frames for one tiling offset. `frames[0]` is the processed
/// frame itself; `frames[j]` is stitched from every cell's j-th neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCraftGroup {
    pub offset: (usize, usize),
    pub frames: Vec<Tensor<f32>>,
}

/// `maps[j]` is the mean over offset groups of `(y - frame_j)²`; `maps[0]` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    pub maps: Vec<Tensor<f32>>,
}

/// Network input of shape `(n+1, f+1, C, H, W)`: the f offset groups along
/// the second axis followed by the score maps at index `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInput {
    tensor: Tensor<f32>,
}

impl AugmentedInput {
    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        tensor.expect_rank("augmented input", 5)?;
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn neighbors_plus_one(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn groups_plus_one(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// `(C, H, W)` of the processed frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[2], s[3], s[4])
    }

    /// Feature maps per frame: `(f+1)·(n+1)·C`.
    pub fn feature_maps(&self) -> usize {
        self.tensor.shape()[..3].iter().product()
    }

    /// The `[C,H,W]` slice at neighbor index `j`, group index `i`.
    pub fn slice(&self, j: usize, i: usize) -> Result<Tensor<f32>> {
        self.tensor.index_axis0(j)?.index_axis0(i)
    }

    /// The processed frame (neighbor 0, group 0).
    pub fn processed_frame(&self) -> Tensor<f32> {
        self.slice(0, 0).expect("non-empty augmented input")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            tensor: self.tensor.crop_spatial(y0, x0, h, w)?,
        })
    }
}

/// All `stitch_side²` tiling offsets in row-major order.
pub fn offsets(spec: &PatchSpec) -> Vec<(usize, usize)> {
    let s = spec.stitch_side;
    (0..s).flat_map(|v| (0..s).map(move |h| (v, h))).collect()
}

/// Top-left corners (in frame coordinates, possibly negative) of the
/// non-overlapping `side × side` cells covering an `h × w` frame when the
/// tiling is shifted by `offset`.
pub fn tile_cells(h: usize, w: usize, side: usize, offset: (usize, usize)) -> Vec<(isize, isize)> {
    let starts = |len: usize, off: usize| -> Vec<isize> {
        let mut v = Vec::new();
        let mut s = -(off as isize);
        while s < len as isize {
            v.push(s);
            s += side as isize;
        }
        v
    };
    let rows = starts(h, offset.0);
    let cols = starts(w, offset.1);
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
}

/// Maps a cell center outside the frame back inside, reporting whether the
/// reflection reverses direction along that axis.
fn reflect(i: isize, len: usize) -> (usize, bool) {
    let flipped = i.rem_euclid(2 * len as isize) >= len as isize;
    (mirror_index(i, len), flipped)
}

/// Builds the patch-craft group for one tiling offset.
///
/// Each cell copies the central `stitch_side²` part of the j-th neighbor of
/// the query patch centered on the cell's center. Cells whose center falls
/// in the mirrored border use the reflected pixel's neighbors with the patch
/// flipped accordingly, which keeps the tiling consistent with the mirror
/// extrapolation. The stitched plane is cropped back to `H × W`.
pub fn build_group(
    seq: &FrameSequence,
    t0: usize,
    neighbors: &NeighborMap,
    spec: &PatchSpec,
    offset: (usize, usize),
) -> Result<PatchCraftGroup> {
    spec.validate()?;
    let s = spec.stitch_side;
    if offset.0 >= s || offset.1 >= s {
        return Err(Error::invalid(
            "build_group",
            format!("offset {offset:?} outside [0, {s})"),
        ));
    }
    let (c, h, w) = seq.dims();
    if neighbors.height != h || neighbors.width != w || neighbors.t0 != t0 {
        return Err(Error::shape(
            "build_group",
            format!(
                "neighbor map for frame {} at {}x{}, expected frame {t0} at {h}x{w}",
                neighbors.t0, neighbors.height, neighbors.width
            ),
        ));
    }
    if let Some(bad) = neighbors
        .entries()
        .iter()
        .find(|e| e.t as usize >= seq.len() || e.y as usize >= h || e.x as usize >= w)
    {
        return Err(Error::invalid(
            "build_group",
            format!("neighbor entry {bad:?} outside the sequence"),
        ));
    }
    let hs = (s - 1) / 2;
    let padded: Vec<Option<Tensor<f32>>> = (0..seq.len())
        .map(|t| {
            neighbors
                .entries()
                .iter()
                .any(|e| e.t as usize == t)
                .then(|| mirror_pad(seq.frame(t), hs))
        })
        .collect();
    let (ph, pw) = (h + 2 * hs, w + 2 * hs);
    let cells = tile_cells(h, w, s, offset);
    let n = neighbors.n;
    let mut frames = Vec::with_capacity(n + 1);
    frames.push(seq.frame(t0).clone());
    for j in 0..n {
        let mut out = vec![0.0f32; c * h * w];
        for &(top, left) in &cells {
            let (qy, fy) = reflect(top + hs as isize, h);
            let (qx, fx) = reflect(left + hs as isize, w);
            let nb = neighbors.at(qy, qx)[j];
            let src = padded[nb.t as usize].as_ref().expect("padded neighbor frame");
            let src = src.data();
            for i in 0..s {
                let row = top + i as isize;
                if row < 0 || row >= h as isize {
                    continue;
                }
                let dy = i as isize - hs as isize;
                let sy = (nb.y as isize + hs as isize + if fy { -dy } else { dy }) as usize;
                for k in 0..s {
                    let col = left + k as isize;
                    if col < 0 || col >= w as isize {
                        continue;
                    }
                    let dx = k as isize - hs as isize;
                    let sx = (nb.x as isize + hs as isize + if fx { -dx } else { dx }) as usize;
                    for ch in 0..c {
                        out[(ch * h + row as usize) * w + col as usize] = src[(ch * ph + sy) * pw + sx];
                    }
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], out)?);
    }
    Ok(PatchCraftGroup { offset, frames })
}

/// Score maps `d_j = mean_i (y - group_i.frames[j])²`, accumulated in f64.
pub fn compute_score_maps(y: &Tensor<f32>, groups: &[PatchCraftGroup]) -> Result<ScoreMaps> {
    let first = groups
        .first()
        .ok_or_else(|| Error::invalid("compute_score_maps", "no groups"))?;
    let n1 = first.frames.len();
    let f = groups.len() as f64;
    let mut maps = Vec::with_capacity(n1);
    for j in 0..n1 {
        let mut acc = vec![0.0f64; y.len()];
        for (gi, g) in groups.iter().enumerate() {
            if g.frames.len() != n1 {
                return Err(Error::shape(
                    "compute_score_maps",
                    format!("group {gi} has {} frames, group 0 has {n1}", g.frames.len()),
                ));
            }
            let fr = &g.frames[j];
            fr.expect_shape("compute_score_maps", y.shape())?;
            for ((a, &yv), &pv) in acc.iter_mut().zip(y.data()).zip(fr.data()) {
                let d = yv as f64 - pv as f64;
                *a += d * d;
            }
        }
        maps.push(Tensor::new(
            y.shape().to_vec(),
            acc.into_iter().map(|v| (v / f) as f32).collect(),
        )?);
    }
    Ok(ScoreMaps { maps })
}

/// Concatenates the groups and the score maps along the group axis.
pub fn assemble(groups: &[PatchCraftGroup], scores: &ScoreMaps) -> Result<AugmentedInput> {
    let first = groups.first().ok_or_else(|| Error::invalid("assemble", "no groups"))?;
    let n1 = first.frames.len();
    let frame_shape = first.frames[0].shape().to_vec();
    if scores.maps.len() != n1 {
        return Err(Error::shape(
            "assemble",
            format!("{} score maps for {n1} neighbor slots", scores.maps.len()),
        ));
    }
    let f1 = groups.len() + 1;
    let plane: usize = frame_shape.iter().product();
    let mut data = Vec::with_capacity(n1 * f1 * plane);
    for j in 0..n1 {
        for (gi, g) in groups.iter().enumerate() {
            let fr = g
                .frames
                .get(j)
                .ok_or_else(|| Error::shape("assemble", format!("group {gi} lacks neighbor slot {j}")))?;
            fr.expect_shape("assemble", &frame_shape)?;
            data.extend_from_slice(fr.data());
        }
        scores.maps[j].expect_shape("assemble", &frame_shape)?;
        data.extend_from_slice(scores.maps[j].data());
    }
    let mut shape = vec![n1, f1];
    shape.extend_from_slice(&frame_shape);
    AugmentedInput::from_tensor(Tensor::new(shape, data)?)
}

/// Builds every offset group for frame `t0` from a neighbor map and assembles
/// the network input.
pub fn augment_with_neighbors(
    seq: &FrameSequence,
    t0: usize,
    neighbors: &NeighborMap,
    spec: &PatchSpec,
) -> Result<AugmentedInput> {
    let groups = offsets(spec)
        .into_par_iter()
        .map(|off| build_group(seq, t0, neighbors, spec, off))
        .collect::<Result<Vec<_>>>()?;
    let scores = compute_score_maps(seq.frame(t0), &groups)?;
    assemble(&groups, &scores)
}

/// Search followed by [`augment_with_neighbors`].
pub fn augment_frame(
    seq: &FrameSequence,
    t0: usize,
    spec: &PatchSpec,
    win: &SearchWindow,
    n: usize,
) -> Result<AugmentedInput> {
    let map = search_neighbors(seq, t0, spec, win, n)?;
    augment_with_neighbors(seq, t0, &map, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchmatch::Neighbor;
    use rand::{Rng, SeedableRng};

    fn random_seq(frames: usize, c: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FrameSequence::new(
            (0..frames)
                .map(|_| Tensor::from_fn(&[c, h, w], |_| rng.gen::<f32>()))
                .collect(),
        )
        .unwrap()
    }

    fn self_map(t0: usize, h: usize, w: usize, n: usize) -> NeighborMap {
        let entries = (0..h * w)
            .flat_map(|p| {
                (0..n).map(move |_| Neighbor {
                    t: t0 as u32,
                    y: (p / w) as u32,
                    x: (p % w) as u32,
                    dist: 0.0,
                })
            })
            .collect();
        NeighborMap::from_entries(t0, h, w, n, entries).unwrap()
    }

    #[test]
    fn self_neighbors_reconstruct_every_offset() {
        let seq = random_seq(2, 3, 10, 11, 5);
        let spec = PatchSpec {
            search_side: 5,
            stitch_side: 3,
        };
        let map = self_map(1, 10, 11, 2);
        for off in offsets(&spec) {
            let g = build_group(&seq, 1, &map, &spec, off).unwrap();
            assert_eq!(g.frames.len(), 3);
            for f in &g.frames {
                assert_eq!(f, seq.frame(1), "offset {off:?}");
            }
        }
    }

    #[test]
    fn self_neighbors_reconstruct_frames_smaller_than_a_cell() {
        let seq = random_seq(1, 1, 2, 3, 8);
        let spec = PatchSpec {
            search_side: 7,
            stitch_side: 7,
        };
        let map = self_map(0, 2, 3, 1);
        for off in offsets(&spec) {
            let g = build_group(&seq, 0, &map, &spec, off).unwrap();
            assert_eq!(&g.frames[1], seq.frame(0), "offset {off:?}");
        }
    }

    #[test]
    fn tiling_writes_each_pixel_once() {
        let (h, w, s) = (10, 10, 3);
        for off in [(1, 2), (0, 0), (2, 2)] {
            let mut count = vec![0u32; h * w];
            for (top, left) in tile_cells(h, w, s, off) {
                for y in top..top + s as isize {
                    for x in left..left + s as isize {
                        if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                            count[y as usize * w + x as usize] += 1;
                        }
                    }
                }
            }
            assert!(count.iter().all(|&c| c == 1), "offset {off:?}");
        }
    }

    #[test]
    fn constant_sequence_gives_identical_frames() {
        let seq = FrameSequence::new(vec![Tensor::full(&[1, 8, 8], 0.4); 3]).unwrap();
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 3,
        };
        let win = SearchWindow {
            side: 5,
            temporal_radius: 1,
        };
        let aug = augment_frame(&seq, 1, &spec, &win, 3).unwrap();
        for j in 0..4 {
            for i in 0..9 {
                assert_eq!(&aug.slice(j, i).unwrap(), seq.frame(1));
            }
            assert!(aug.slice(j, 9).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_group_score_is_squared_shift() {
        let y = Tensor::<f32>::full(&[1, 3, 3], 0.5);
        let g = PatchCraftGroup {
            offset: (0, 0),
            frames: vec![y.clone(), y.map(|v| v + 0.1)],
        };
        let s = compute_score_maps(&y, &[g]).unwrap();
        assert!(s.maps[0].data().iter().all(|&v| v == 0.0));
        assert!(s.maps[1].data().iter().all(|&v| (v - 0.01).abs() < 1e-6));
    }

    #[test]
    fn scores_match_naive_loop_and_ignore_group_order() {
        let seq = random_seq(3, 2, 9, 9, 1);
        let spec = PatchSpec {
            search_side: 5,
            stitch_side: 3,
        };
        let win = SearchWindow {
            side: 7,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 1, &spec, &win, 3).unwrap();
        let mut groups: Vec<_> = offsets(&spec)
            .into_iter()
            .map(|o| build_group(&seq, 1, &map, &spec, o).unwrap())
            .collect();
        let y = seq.frame(1);
        let scores = compute_score_maps(y, &groups).unwrap();
        for j in 0..4 {
            for p in 0..y.len() {
                let mut s = 0.0f64;
                for g in &groups {
                    let d = y.data()[p] as f64 - g.frames[j].data()[p] as f64;
                    s += d * d;
                }
                let want = s / groups.len() as f64;
                assert!((scores.maps[j].data()[p] as f64 - want).abs() < 1e-6);
            }
        }
        groups.reverse();
        let rev = compute_score_maps(y, &groups).unwrap();
        for (a, b) in rev.maps.iter().zip(&scores.maps) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn assemble_layout_and_slicing() {
        let seq = random_seq(2, 1, 6, 7, 3);
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 1,
        };
        let win = SearchWindow {
            side: 3,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 0, &spec, &win, 1).unwrap();
        let g = build_group(&seq, 0, &map, &spec, (0, 0)).unwrap();
        let scores = compute_score_maps(seq.frame(0), std::slice::from_ref(&g)).unwrap();
        let aug = assemble(std::slice::from_ref(&g), &scores).unwrap();
        assert_eq!(aug.tensor().shape(), &[2, 2, 1, 6, 7]);
        assert_eq!(aug.slice(1, 0).unwrap(), g.frames[1]);
        assert_eq!(aug.slice(1, 1).unwrap(), scores.maps[1]);
        assert_eq!(aug.processed_frame(), *seq.frame(0));
    }

    #[test]
    fn offsets_out_of_range_and_bad_maps_are_rejected() {
        let seq = random_seq(1, 1, 6, 6, 3);
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 3,
        };
        let map = self_map(0, 6, 6, 1);
        assert!(build_group(&seq, 0, &map, &spec, (3, 0)).is_err());
        let small = self_map(0, 5, 6, 1);
        assert!(build_group(&seq, 0, &small, &spec, (0, 0)).is_err());
        let mut entries = map.entries().to_vec();
        entries[3].t = 4;
        let broken = NeighborMap::from_entries(0, 6, 6, 1, entries).unwrap();
        assert!(build_group(&seq, 0, &broken, &spec, (0, 0)).is_err());
    }
}
