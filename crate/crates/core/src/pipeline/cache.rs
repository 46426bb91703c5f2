//! On-disk cache of augmented inputs between the search and network stages.
//!
//! Entries are `<key>.pct` (rank-5 PCT1) with a `<key>.sha256` sidecar
//! holding the hash of the file bytes. The key hashes the frames inside the
//! temporal search range, the frame's position in that range, and every
//! search and tiling parameter.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patchcraft::{augment_frame, AugmentedInput};
use crate::patchmatch::{PatchSpec, SearchWindow};
use crate::tensor::pct;
use crate::videoio::FrameSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    /// Entries whose bytes did not match their recorded hash; recomputed.
    pub corrupted: usize,
}

#[derive(Clone, Debug)]
pub struct AugmentCache {
    dir: PathBuf,
    pub stats: CacheStats,
}

pub fn cache_key(seq: &FrameSequence, t0: usize, spec: &PatchSpec, win: &SearchWindow, n: usize) -> String {
    let range = win.frame_range(t0, seq.len());
    let mut h = Sha256::new();
    h.update(b"augment-v1");
    for v in [
        spec.search_side,
        spec.stitch_side,
        win.side,
        win.temporal_radius,
        n,
        t0 - *range.start(),
        range.clone().count(),
    ] {
        h.update((v as u64).to_le_bytes());
    }
    for t in range {
        h.update(pct::encode(seq.frame(t)));
    }
    hex::encode(h.finalize())
}

impl AugmentCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            stats: CacheStats::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.pct"))
    }

    fn verified(&self, key: &str) -> Result<Option<AugmentedInput>> {
        let data_path = self.entry_path(key);
        let hash_path = self.dir.join(format!("{key}.sha256"));
        let (Ok(bytes), Ok(recorded)) = (fs::read(&data_path), fs::read_to_string(&hash_path)) else {
            return Ok(None);
        };
        if hex::encode(Sha256::digest(&bytes)) != recorded.trim() {
            return Err(Error::invalid(
                "cache",
                format!("{} fails its hash check", data_path.display()),
            ));
        }
        Ok(Some(AugmentedInput::from_tensor(pct::decode(&bytes)?)?))
    }

    fn store(&self, key: &str, aug: &AugmentedInput) -> Result<()> {
        let bytes = pct::encode(aug.tensor());
        let data_path = self.entry_path(key);
        let hash_path = self.dir.join(format!("{key}.sha256"));
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        fs::write(&hash_path, hex::encode(Sha256::digest(&bytes)) + "\n").map_err(|e| Error::io(&hash_path, e))
    }

    /// Returns the cached input for frame `t0`, computing and storing it on a
    /// miss. A corrupted entry is reported in `stats` and recomputed.
    pub fn get_or_compute(
        &mut self,
        seq: &FrameSequence,
        t0: usize,
        spec: &PatchSpec,
        win: &SearchWindow,
        n: usize,
    ) -> Result<AugmentedInput> {
        let key = cache_key(seq, t0, spec, win, n);
        match self.verified(&key) {
            Ok(Some(aug)) => {
                self.stats.hits += 1;
                return Ok(aug);
            }
            Ok(None) => self.stats.misses += 1,
            Err(e) => {
                log::warn!("{e}; recomputing");
                self.stats.corrupted += 1;
            }
        }
        let aug = augment_frame(seq, t0, spec, win, n)?;
        self.store(&key, &aug)?;
        Ok(aug)
    }
}

/// Augments frame `t0`, through `cache` when one is given.
pub fn augment_cached(
    cache: Option<&mut AugmentCache>,
    seq: &FrameSequence,
    t0: usize,
    spec: &PatchSpec,
    win: &SearchWindow,
    n: usize,
) -> Result<AugmentedInput> {
    match cache {
        Some(c) => c.get_or_compute(seq, t0, spec, win, n),
        None => augment_frame(seq, t0, spec, win, n),
    }
}
