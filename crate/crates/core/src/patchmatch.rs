//! Exact k-nearest-neighbor patch search inside a spatio-temporal window.
//!
//! Every pixel of frame `t0` owns a `search_side × search_side` query patch
//! of the mirror-padded frame. Candidates are patch centers within a
//! `B × B` box around the query, over frames `t0 - Ts ..= t0 + Ts` (clamped
//! to the sequence). The distance is the sum of squared differences over all
//! channels, accumulated in `f64` as column sums (rows, then channels, inside
//! each column) added left to right. The engine and the oracle both use that
//! order, so their distances agree bit for bit.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pct, Tensor};
use crate::videoio::FrameSequence;

/// Patch geometry: the square searched with, and its centered square used
/// for stitching patch-craft frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub search_side: usize,
    pub stitch_side: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.search_side == 0 || self.search_side % 2 == 0 {
            return Err(Error::Config(format!(
                "search patch side {} must be odd",
                self.search_side
            )));
        }
        if self.stitch_side == 0 || self.stitch_side % 2 == 0 || self.stitch_side > self.search_side {
            return Err(Error::Config(format!(
                "stitch side {} must be odd and at most the search side {}",
                self.stitch_side, self.search_side
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        (self.search_side - 1) / 2
    }

    /// Number of offset groups, `stitch_side²`.
    pub fn groups(&self) -> usize {
        self.stitch_side * self.stitch_side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchWindow {
    /// Spatial side `B` of the candidate box (odd).
    pub side: usize,
    /// Temporal half-window `Ts`.
    pub temporal_radius: usize,
}

impl SearchWindow {
    pub fn validate(&self, spec: &PatchSpec) -> Result<()> {
        if self.side % 2 == 0 || self.side < spec.search_side {
            return Err(Error::Config(format!(
                "window side {} must be odd and at least the search patch side {}",
                self.side, spec.search_side
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        (self.side - 1) / 2
    }

    /// Frames searched for reference frame `t0` in a sequence of `len` frames.
    pub fn frame_range(&self, t0: usize, len: usize) -> std::ops::RangeInclusive<usize> {
        t0.saturating_sub(self.temporal_radius)..=(t0 + self.temporal_radius).min(len - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub t: u32,
    pub y: u32,
    pub x: u32,
    pub dist: f64,
}

/// Total order used for ranking: `(dist, |t - t0|, t, y, x)` ascending.
pub fn rank_order(a: &Neighbor, b: &Neighbor, t0: usize) -> Ordering {
    let dt = |n: &Neighbor| (n.t as i64 - t0 as i64).unsigned_abs();
    a.dist
        .total_cmp(&b.dist)
        .then(dt(a).cmp(&dt(b)))
        .then(a.t.cmp(&b.t))
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
}

/// Neighbor lists for every pixel of one reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborMap {
    pub t0: usize,
    pub height: usize,
    pub width: usize,
    pub n: usize,
    entries: Vec<Neighbor>,
}

impl NeighborMap {
    /// Builds a map from per-pixel lists given in row-major pixel order.
    pub fn from_entries(t0: usize, height: usize, width: usize, n: usize, entries: Vec<Neighbor>) -> Result<Self> {
        if entries.len() != height * width * n {
            return Err(Error::shape(
                "neighbor map",
                format!("{} entries for {height}x{width} pixels x {n}", entries.len()),
            ));
        }
        Ok(Self {
            t0,
            height,
            width,
            n,
            entries,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &[Neighbor] {
        let i = (y * self.width + x) * self.n;
        &self.entries[i..i + self.n]
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    /// `[H, W, n, 3]` positions `(t, y, x)` and `[H, W, n]` distances, both f32.
    pub fn to_tensors(&self) -> (Tensor<f32>, Tensor<f32>) {
        let pos = self
            .entries
            .iter()
            .flat_map(|e| [e.t as f32, e.y as f32, e.x as f32])
            .collect();
        let dist = self.entries.iter().map(|e| e.dist as f32).collect();
        (
            Tensor::new(vec![self.height, self.width, self.n, 3], pos).expect("shape"),
            Tensor::new(vec![self.height, self.width, self.n], dist).expect("shape"),
        )
    }

    pub fn from_tensors(t0: usize, pos: &Tensor<f32>, dist: &Tensor<f32>) -> Result<Self> {
        pos.expect_rank("neighbor map", 4)?;
        let s = pos.shape();
        if s[3] != 3 {
            return Err(Error::shape("neighbor map", format!("position tensor {s:?}")));
        }
        dist.expect_shape("neighbor map", &s[..3])?;
        let entries = pos
            .data()
            .chunks_exact(3)
            .zip(dist.data())
            .map(|(p, &d)| Neighbor {
                t: p[0] as u32,
                y: p[1] as u32,
                x: p[2] as u32,
                dist: d as f64,
            })
            .collect();
        Self::from_entries(t0, s[0], s[1], s[2], entries)
    }

    /// Writes `<stem>.pos.pct` and `<stem>.dist.pct`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let (pos, dist) = self.to_tensors();
        pct::write(&pos, stem.with_extension("pos.pct"))?;
        pct::write(&dist, stem.with_extension("dist.pct"))
    }

    pub fn load(stem: impl AsRef<Path>, t0: usize) -> Result<Self> {
        let stem = stem.as_ref();
        let pos = pct::read(stem.with_extension("pos.pct"))?;
        let dist = pct::read(stem.with_extension("dist.pct"))?;
        Self::from_tensors(t0, &pos, &dist)
    }
}

/// Half-sample symmetric reflection of `i` into `0..len` (edge pixel repeated).
#[inline]
pub fn mirror_index(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Mirror-pads a `[C,H,W]` frame by `pad` on every side.
pub fn mirror_pad(frame: &Tensor<f32>, pad: usize) -> Tensor<f32> {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = frame.data();
    Tensor::from_fn(&[c, ph, pw], |i| {
        let ch = i / (ph * pw);
        let y = mirror_index((i / pw) as isize % ph as isize - pad as isize, h);
        let x = mirror_index((i % pw) as isize - pad as isize, w);
        src[(ch * h + y) * w + x]
    })
}

struct Padded {
    data: Vec<f32>,
    c: usize,
    ph: usize,
    pw: usize,
}

impl Padded {
    fn new(frame: &Tensor<f32>, pad: usize) -> Self {
        let p = mirror_pad(frame, pad);
        let s = p.shape().to_vec();
        Self {
            data: p.into_data(),
            c: s[0],
            ph: s[1],
            pw: s[2],
        }
    }

    #[inline(always)]
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.ph + y) * self.pw + x]
    }
}

/// Sum of squared differences of one padded column segment: rows `0..side`
/// starting at `qy`/`cy`, channels innermost.
#[inline(always)]
fn column_ssd(q: &Padded, qy: usize, qx: usize, k: &Padded, cy: usize, cx: usize, side: usize) -> f64 {
    let mut s = 0.0f64;
    for py in 0..side {
        for c in 0..q.c {
            let d = q.at(c, qy + py, qx) as f64 - k.at(c, cy + py, cx) as f64;
            s += d * d;
        }
    }
    s
}

fn check_inputs(seq: &FrameSequence, t0: usize, spec: &PatchSpec, win: &SearchWindow, n: usize) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid("search_neighbors", "empty sequence"));
    }
    if t0 >= seq.len() {
        return Err(Error::invalid(
            "search_neighbors",
            format!("frame {t0} out of range for {} frames", seq.len()),
        ));
    }
    spec.validate()?;
    win.validate(spec)?;
    if n == 0 {
        return Err(Error::invalid("search_neighbors", "n must be at least 1"));
    }
    let (_, h, w) = seq.dims();
    let b = win.radius();
    let frames = win.frame_range(t0, seq.len()).count();
    let fewest = (b + 1).min(h) * (b + 1).min(w) * frames - 1;
    if fewest < n {
        return Err(Error::invalid(
            "search_neighbors",
            format!("corner queries have only {fewest} candidates, n = {n}"),
        ));
    }
    Ok(())
}

struct TopN {
    items: Vec<Neighbor>,
    n: usize,
}

impl TopN {
    fn new(n: usize) -> Self {
        Self {
            items: Vec::with_capacity(n + 1),
            n,
        }
    }

    #[inline]
    fn offer(&mut self, cand: Neighbor, t0: usize) {
        if self.items.len() == self.n {
            let worst = self.items.last().unwrap();
            if rank_order(&cand, worst, t0) != Ordering::Less {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|e| rank_order(e, &cand, t0) == Ordering::Less);
        self.items.insert(pos, cand);
        self.items.truncate(self.n);
    }
}

/// Exact nearest-neighbor search for every pixel of frame `t0`.
///
/// For each displacement `(t, dy, dx)` the column sums along a query row are
/// computed once and shared by every query in that row, so the cost per
/// displacement is `O(search_side)` per pixel rather than `O(search_side²)`.
pub fn search_neighbors(
    seq: &FrameSequence,
    t0: usize,
    spec: &PatchSpec,
    win: &SearchWindow,
    n: usize,
) -> Result<NeighborMap> {
    check_inputs(seq, t0, spec, win, n)?;
    let (_, h, w) = seq.dims();
    let r = spec.radius();
    let side = spec.search_side;
    let b = win.radius() as isize;
    let range = win.frame_range(t0, seq.len());
    let padded: Vec<(usize, Padded)> = range.map(|t| (t, Padded::new(seq.frame(t), r))).collect();
    let query = &padded.iter().find(|(t, _)| *t == t0).unwrap().1;
    let pw = w + 2 * r;

    let rows: Vec<Vec<Neighbor>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut tops: Vec<TopN> = (0..w).map(|_| TopN::new(n)).collect();
            let mut col = vec![0.0f64; pw];
            for (t, frame) in &padded {
                for dy in -b..=b {
                    let cy = y as isize + dy;
                    if cy < 0 || cy >= h as isize {
                        continue;
                    }
                    let cy = cy as usize;
                    for dx in -b..=b {
                        // queries x whose candidate x + dx lies inside the frame
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize);
                        if x_hi <= x_lo as isize {
                            continue;
                        }
                        let x_hi = x_hi as usize;
                        for xp in x_lo..x_hi + side - 1 {
                            col[xp] = column_ssd(query, y, xp, frame, cy, (xp as isize + dx) as usize, side);
                        }
                        let is_self_shift = *t == t0 && dy == 0 && dx == 0;
                        if is_self_shift {
                            continue;
                        }
                        for x in x_lo..x_hi {
                            let mut d = 0.0f64;
                            for c in &col[x..x + side] {
                                d += c;
                            }
                            tops[x].offer(
                                Neighbor {
                                    t: *t as u32,
                                    y: cy as u32,
                                    x: (x as isize + dx) as u32,
                                    dist: d,
                                },
                                t0,
                            );
                        }
                    }
                }
            }
            tops.into_iter().flat_map(|t| t.items).collect()
        })
        .collect();
    NeighborMap::from_entries(t0, h, w, n, rows.into_iter().flatten().collect())
}

/// SSD between the patches centered at `p` and `q` (each `(t, y, x)`),
/// accumulated in the canonical column order.
pub fn patch_distance(
    seq: &FrameSequence,
    spec: &PatchSpec,
    p: (usize, usize, usize),
    q: (usize, usize, usize),
) -> f64 {
    let r = spec.radius();
    let a = Padded::new(seq.frame(p.0), r);
    let b = Padded::new(seq.frame(q.0), r);
    let mut d = 0.0;
    for px in 0..spec.search_side {
        d += column_ssd(&a, p.1, p.2 + px, &b, q.1, q.2 + px, spec.search_side);
    }
    d
}

/// Exhaustive reference search: enumerates every candidate, computes each
/// distance from scratch, sorts by [`rank_order`] and keeps the first `n`.
/// Intended for small inputs.
pub fn brute_force_oracle(
    seq: &FrameSequence,
    t0: usize,
    spec: &PatchSpec,
    win: &SearchWindow,
    n: usize,
) -> Result<NeighborMap> {
    check_inputs(seq, t0, spec, win, n)?;
    let (_, h, w) = seq.dims();
    let r = spec.radius();
    let side = spec.search_side;
    let b = win.radius();
    let padded: Vec<(usize, Padded)> = win
        .frame_range(t0, seq.len())
        .map(|t| (t, Padded::new(seq.frame(t), r)))
        .collect();
    let query = &padded.iter().find(|(t, _)| *t == t0).unwrap().1;
    let mut entries = Vec::with_capacity(h * w * n);
    for y in 0..h {
        for x in 0..w {
            let mut all = Vec::new();
            for (t, frame) in &padded {
                for cy in y.saturating_sub(b)..=(y + b).min(h - 1) {
                    for cx in x.saturating_sub(b)..=(x + b).min(w - 1) {
                        if *t == t0 && cy == y && cx == x {
                            continue;
                        }
                        let mut d = 0.0f64;
                        for px in 0..side {
                            let mut colsum = 0.0f64;
                            for py in 0..side {
                                for c in 0..query.c {
                                    let diff =
                                        query.at(c, y + py, x + px) as f64 - frame.at(c, cy + py, cx + px) as f64;
                                    colsum += diff * diff;
                                }
                            }
                            d += colsum;
                        }
                        all.push(Neighbor {
                            t: *t as u32,
                            y: cy as u32,
                            x: cx as u32,
                            dist: d,
                        });
                    }
                }
            }
            all.sort_by(|a, b| rank_order(a, b, t0));
            entries.extend_from_slice(&all[..n]);
        }
    }
    NeighborMap::from_entries(t0, h, w, n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    const SPEC: PatchSpec = PatchSpec {
        search_side: 3,
        stitch_side: 1,
    };

    #[test]
    fn mirror_index_repeats_edge() {
        let got: Vec<usize> = (-4..8).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(mirror_index(-1, 1), 0);
        assert_eq!(mirror_index(5, 1), 0);
    }

    #[test]
    fn constant_sequence_has_zero_distances_in_tie_order() {
        let seq = FrameSequence::new(vec![Tensor::full(&[1, 6, 6], 0.3); 3]).unwrap();
        let win = SearchWindow {
            side: 3,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 1, &SPEC, &win, 4).unwrap();
        assert!(map.entries().iter().all(|e| e.dist == 0.0));
        // same frame first, then by t, y, x
        let at = map.at(2, 2);
        let pos: Vec<_> = at.iter().map(|e| (e.t, e.y, e.x)).collect();
        assert_eq!(pos, vec![(1, 1, 1), (1, 1, 2), (1, 1, 3), (1, 2, 1)]);
        assert_eq!(map, brute_force_oracle(&seq, 1, &SPEC, &win, 4).unwrap());
    }

    #[test]
    fn translated_frame_yields_zero_distance_neighbor() {
        let (h, w) = (10, 12);
        let period = 4;
        let f0 = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            ((x % period) as f32 * 0.2 + (y % 3) as f32 * 0.1).sin().abs()
        });
        // frame 1 content at x+1 equals frame 0 at x
        let f1 = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            f0.data()[y * w + (x + w - 1) % w]
        });
        let seq = FrameSequence::new(vec![f0, f1]).unwrap();
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 1,
        };
        let win = SearchWindow {
            side: 5,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 0, &spec, &win, 3).unwrap();
        assert_eq!(map, brute_force_oracle(&seq, 0, &spec, &win, 3).unwrap());
        for y in 2..h - 2 {
            for x in 2..w - 3 {
                let hit = map
                    .at(y, x)
                    .iter()
                    .any(|e| e.t == 1 && e.y as usize == y && e.x as usize == x + 1 && e.dist == 0.0);
                assert!(hit, "no zero-distance match for ({y},{x})");
            }
        }
    }

    #[test]
    fn single_frame_box_matches_oracle_and_enumerates_window() {
        let seq = random_seq(1, 3, 9, 8, 4);
        let spec = PatchSpec {
            search_side: 5,
            stitch_side: 3,
        };
        let win = SearchWindow {
            side: 5,
            temporal_radius: 0,
        };
        let map = search_neighbors(&seq, 0, &spec, &win, 5).unwrap();
        assert_eq!(map, brute_force_oracle(&seq, 0, &spec, &win, 5).unwrap());
        for e in map.at(4, 4) {
            assert!((e.y as i64 - 4).abs() <= 2 && (e.x as i64 - 4).abs() <= 2);
            assert!(!(e.y == 4 && e.x == 4));
        }
        // n = every candidate of an interior query's box minus itself... but
        // corners bound n; use a frame where every box is full
        let seq = random_seq(1, 1, 3, 3, 1);
        let win = SearchWindow {
            side: 5,
            temporal_radius: 0,
        };
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 1,
        };
        let map = search_neighbors(&seq, 0, &spec, &win, 8).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let mut got: Vec<_> = map.at(y, x).iter().map(|e| (e.y, e.x)).collect();
                got.sort();
                let want: Vec<_> = (0..3u32)
                    .flat_map(|a| (0..3u32).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a as usize, b as usize) != (y, x))
                    .collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn distances_agree_with_pairwise_and_are_symmetric() {
        let seq = random_seq(3, 2, 10, 10, 9);
        let spec = PatchSpec {
            search_side: 3,
            stitch_side: 1,
        };
        let win = SearchWindow {
            side: 5,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 1, &spec, &win, 4).unwrap();
        for e in map.at(5, 4) {
            let q = (e.t as usize, e.y as usize, e.x as usize);
            let d = patch_distance(&seq, &spec, (1, 5, 4), q);
            assert_eq!(d, e.dist);
            assert_eq!(patch_distance(&seq, &spec, q, (1, 5, 4)), d);
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let seq = random_seq(2, 1, 4, 4, 0);
        let win = SearchWindow {
            side: 3,
            temporal_radius: 0,
        };
        assert!(search_neighbors(&seq, 0, &SPEC, &win, 0).is_err());
        assert!(search_neighbors(&seq, 0, &SPEC, &win, 4).is_err());
        assert!(search_neighbors(&seq, 5, &SPEC, &win, 1).is_err());
        let even = SearchWindow {
            side: 4,
            temporal_radius: 0,
        };
        assert!(search_neighbors(&seq, 0, &SPEC, &even, 1).is_err());
    }

    #[test]
    fn tensor_roundtrip_keeps_positions() {
        let seq = random_seq(2, 1, 5, 6, 2);
        let win = SearchWindow {
            side: 3,
            temporal_radius: 1,
        };
        let map = search_neighbors(&seq, 1, &SPEC, &win, 3).unwrap();
        let (p, d) = map.to_tensors();
        let back = NeighborMap::from_tensors(1, &p, &d).unwrap();
        for (a, b) in back.entries().iter().zip(map.entries()) {
            assert_eq!((a.t, a.y, a.x), (b.t, b.y, b.x));
            assert!((a.dist - b.dist).abs() <= 1e-6 * b.dist.max(1.0));
        }
    }
}
