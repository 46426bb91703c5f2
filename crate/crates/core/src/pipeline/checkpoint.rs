//! Checkpoint directories: `manifest.json` plus one PCT1 file per tensor.
//!
//! ```text
//! {"kind": "scnn", "config": {...}, "step": 1500,
//!  "tensors": [{"name": "block0.vh.weight", "file": "block0.vh.weight.pct", "shape": [...]}, ...]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scnn::{Scnn, ScnnConfig};
use crate::tcnn::{Tcnn, TcnnConfig};
use crate::tensor::{pct, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_dir(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    step: u64,
    state: &[(String, Tensor<f32>)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(state.len());
    for (name, t) in state {
        let file = format!("{name}.pct");
        pct::write(t, dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        kind: kind.into(),
        config,
        step,
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ckpt_err(dir, format!("manifest: {e}")))
}

fn read_dir(dir: &Path, kind: &str) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let m = read_manifest(dir)?;
    if m.kind != kind {
        return Err(ckpt_err(dir, format!("holds a {} model, expected {kind}", m.kind)));
    }
    let mut state = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        if e.file.contains('/') || e.file.contains("..") {
            return Err(ckpt_err(dir, format!("tensor file {:?} escapes the directory", e.file)));
        }
        let t = pct::read(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(ckpt_err(
                dir,
                format!("{}: file shape {:?}, manifest {:?}", e.name, t.shape(), e.shape),
            ));
        }
        state.push((e.name.clone(), t));
    }
    Ok((m, state))
}

pub fn save_scnn(net: &Scnn<f32>, step: u64, dir: impl AsRef<Path>) -> Result<()> {
    write_dir(
        dir.as_ref(),
        "scnn",
        serde_json::to_value(net.config)?,
        step,
        &net.state(),
    )
}

pub fn save_tcnn(net: &Tcnn<f32>, step: u64, dir: impl AsRef<Path>) -> Result<()> {
    write_dir(
        dir.as_ref(),
        "tcnn",
        serde_json::to_value(net.config)?,
        step,
        &net.state(),
    )
}

/// Loads an S-CNN, rejecting it if its configuration differs from `expected`.
pub fn load_scnn(dir: impl AsRef<Path>, expected: &ScnnConfig) -> Result<Scnn<f32>> {
    let dir = dir.as_ref();
    let (m, state) = read_dir(dir, "scnn")?;
    let config: ScnnConfig = serde_json::from_value(m.config).map_err(|e| ckpt_err(dir, format!("config: {e}")))?;
    if config != *expected {
        return Err(ckpt_err(
            dir,
            format!("trained for {config:?}, run configured for {expected:?}"),
        ));
    }
    let mut net = Scnn::new(config, 0)?;
    net.load_state(&state).map_err(|e| ckpt_err(dir, e.to_string()))?;
    Ok(net)
}

pub fn load_tcnn(dir: impl AsRef<Path>, expected: &TcnnConfig) -> Result<Tcnn<f32>> {
    let dir = dir.as_ref();
    let (m, state) = read_dir(dir, "tcnn")?;
    let config: TcnnConfig = serde_json::from_value(m.config).map_err(|e| ckpt_err(dir, format!("config: {e}")))?;
    if config != *expected {
        return Err(ckpt_err(
            dir,
            format!("trained for {config:?}, run configured for {expected:?}"),
        ));
    }
    let mut net = Tcnn::new(config, 0)?;
    net.load_state(&state).map_err(|e| ckpt_err(dir, e.to_string()))?;
    Ok(net)
}

/// SHA-256 over the manifest and every tensor file, in manifest order.
pub fn digest(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let mut h = Sha256::new();
    let files: Vec<PathBuf> = std::iter::once(dir.join("manifest.json"))
        .chain(m.tensors.iter().map(|e| dir.join(&e.file)))
        .collect();
    for f in files {
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
