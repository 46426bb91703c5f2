//! Flat `key = value` configuration with two presets.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! A `preset` key, wherever it appears, selects the base values and every
//! other key overrides them in file order.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchmatch::{PatchSpec, SearchWindow};
use crate::scnn::ScnnConfig;
use crate::tcnn::TcnnConfig;
use crate::tensor::OptimizerSpec;
use crate::train::TrainSpec;
use crate::videoio::NoiseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (desk|paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Operating mode: full two-stage pipeline, spatial stage with the
/// configured temporal search, or spatial stage on single frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pacnet,
    Scnn3,
    Scnn0,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pacnet" => Ok(Self::Pacnet),
            "scnn3" => Ok(Self::Scnn3),
            "scnn0" => Ok(Self::Scnn0),
            _ => Err(Error::Config(format!("unknown mode {s:?} (pacnet|scnn3|scnn0)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pacnet => "pacnet",
            Self::Scnn3 => "scnn3",
            Self::Scnn0 => "scnn0",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub mode: Mode,
    pub patch: PatchSpec,
    pub window: SearchWindow,
    /// Neighbors per pixel, n (the frame copy is extra).
    pub neighbors: usize,
    pub channels: usize,
    pub scnn_kernel: usize,
    pub scnn_blocks: usize,
    pub tcnn: TcnnConfig,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub spatial_train: TrainSpec,
    pub temporal_train: TrainSpec,
    pub cache_dir: Option<PathBuf>,
}

fn train(steps: u64, crop: usize, margin: usize, lr: f64, seed: u64) -> TrainSpec {
    TrainSpec {
        steps,
        batch: 4,
        crop,
        margin,
        steps_per_epoch: 100,
        optimizer: OptimizerSpec::with_lr(lr),
        seed,
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            mode: Mode::Pacnet,
            patch: PatchSpec {
                search_side: 7,
                stitch_side: 3,
            },
            window: SearchWindow {
                side: 15,
                temporal_radius: 1,
            },
            neighbors: 4,
            channels: 1,
            scnn_kernel: 3,
            scnn_blocks: 5,
            tcnn: TcnnConfig {
                temporal_radius: 1,
                channels: 1,
                conv3d_channels: 8,
                conv2d_layers: 4,
                conv2d_channels: 16,
                kernel: 3,
                slope: 0.1,
            },
            noise: NoiseSpec::default(),
            seed: 0,
            spatial_train: train(1500, 24, 4, 5e-3, 1),
            temporal_train: train(500, 24, 4, 2e-3, 2),
            cache_dir: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            mode: Mode::Pacnet,
            patch: PatchSpec {
                search_side: 15,
                stitch_side: 7,
            },
            window: SearchWindow {
                side: 89,
                temporal_radius: 3,
            },
            neighbors: 14,
            channels: 3,
            scnn_kernel: 7,
            scnn_blocks: 5,
            tcnn: TcnnConfig::paper(),
            noise: NoiseSpec::default(),
            seed: 0,
            spatial_train: train(7000, 150, 43, 5e-3, 1),
            temporal_train: train(7000, 64, 0, 2e-3, 2),
            cache_dir: None,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a configuration file body, then applies `overrides` (`key=value`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?}: expected key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true|false, got {v:?}"))),
            }
        }
        let train_key = |rest: &str, spec: &mut TrainSpec| -> Result<()> {
            match rest {
                "steps" => spec.steps = num(key, value)?,
                "batch" => spec.batch = num(key, value)?,
                "crop" => spec.crop = num(key, value)?,
                "margin" => spec.margin = num(key, value)?,
                "steps_per_epoch" => spec.steps_per_epoch = num(key, value)?,
                "seed" => spec.seed = num(key, value)?,
                "lr" => spec.optimizer.learning_rate = num(key, value)?,
                "decay" => spec.optimizer.decay = num(key, value)?,
                "beta1" => spec.optimizer.beta1 = num(key, value)?,
                "beta2" => spec.optimizer.beta2 = num(key, value)?,
                "epsilon" => spec.optimizer.epsilon = num(key, value)?,
                "trust_ratio" => spec.optimizer.layerwise_trust_ratio = flag(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
            Ok(())
        };
        if let Some(rest) = key.strip_prefix("train.spatial.") {
            return train_key(rest, &mut self.spatial_train);
        }
        if let Some(rest) = key.strip_prefix("train.temporal.") {
            return train_key(rest, &mut self.temporal_train);
        }
        match key {
            "preset" => *self = Self::preset(value.parse()?),
            "mode" => self.mode = value.parse()?,
            "patch.search_side" => self.patch.search_side = num(key, value)?,
            "patch.stitch_side" => self.patch.stitch_side = num(key, value)?,
            "search.window" => self.window.side = num(key, value)?,
            "search.temporal_radius" => self.window.temporal_radius = num(key, value)?,
            "search.neighbors" => self.neighbors = num(key, value)?,
            "channels" => {
                self.channels = num(key, value)?;
                self.tcnn.channels = self.channels;
            }
            "scnn.kernel" => self.scnn_kernel = num(key, value)?,
            "scnn.blocks" => self.scnn_blocks = num(key, value)?,
            "tcnn.temporal_radius" => self.tcnn.temporal_radius = num(key, value)?,
            "tcnn.conv3d_channels" => self.tcnn.conv3d_channels = num(key, value)?,
            "tcnn.conv2d_layers" => self.tcnn.conv2d_layers = num(key, value)?,
            "tcnn.conv2d_channels" => self.tcnn.conv2d_channels = num(key, value)?,
            "tcnn.kernel" => self.tcnn.kernel = num(key, value)?,
            "tcnn.slope" => self.tcnn.slope = num(key, value)?,
            "noise.sigma" => self.noise.sigma = num(key, value)?,
            "noise.clipped" => self.noise.clipped = flag(key, value)?,
            "noise.seed" => self.noise.seed = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cache.dir" => {
                self.cache_dir = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.patch.validate().map_err(wrap)?;
        self.window.validate(&self.patch).map_err(wrap)?;
        if self.neighbors == 0 {
            return Err(Error::Config("search.neighbors must be at least 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.tcnn.channels != self.channels {
            return Err(Error::Config("tcnn channels differ from channels".into()));
        }
        if self.noise.sigma < 0.0 || !self.noise.sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise.sigma must be >= 0, got {}",
                self.noise.sigma
            )));
        }
        self.scnn_config().validate().map_err(wrap)?;
        self.tcnn.validate().map_err(wrap)?;
        self.spatial_train.validate().map_err(wrap)?;
        self.temporal_train.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn scnn_config(&self) -> ScnnConfig {
        ScnnConfig {
            neighbors: self.neighbors + 1,
            groups: self.patch.groups() + 1,
            channels: self.channels,
            kernel: self.scnn_kernel,
            blocks: self.scnn_blocks,
        }
    }

    /// Search window actually used by the current mode: single-frame for `scnn0`.
    pub fn effective_window(&self) -> SearchWindow {
        match self.mode {
            Mode::Scnn0 => SearchWindow {
                temporal_radius: 0,
                ..self.window
            },
            _ => self.window,
        }
    }

    /// Every key with its resolved value, one per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        kv("preset", self.preset.to_string());
        kv("mode", self.mode.to_string());
        kv("patch.search_side", self.patch.search_side.to_string());
        kv("patch.stitch_side", self.patch.stitch_side.to_string());
        kv("search.window", self.window.side.to_string());
        kv("search.temporal_radius", self.window.temporal_radius.to_string());
        kv("search.neighbors", self.neighbors.to_string());
        kv("channels", self.channels.to_string());
        kv("scnn.kernel", self.scnn_kernel.to_string());
        kv("scnn.blocks", self.scnn_blocks.to_string());
        kv("tcnn.temporal_radius", self.tcnn.temporal_radius.to_string());
        kv("tcnn.conv3d_channels", self.tcnn.conv3d_channels.to_string());
        kv("tcnn.conv2d_layers", self.tcnn.conv2d_layers.to_string());
        kv("tcnn.conv2d_channels", self.tcnn.conv2d_channels.to_string());
        kv("tcnn.kernel", self.tcnn.kernel.to_string());
        kv("tcnn.slope", self.tcnn.slope.to_string());
        kv("noise.sigma", self.noise.sigma.to_string());
        kv("noise.clipped", self.noise.clipped.to_string());
        kv("noise.seed", self.noise.seed.to_string());
        kv("seed", self.seed.to_string());
        for (name, t) in [("spatial", &self.spatial_train), ("temporal", &self.temporal_train)] {
            let p = format!("train.{name}.");
            kv(&format!("{p}steps"), t.steps.to_string());
            kv(&format!("{p}batch"), t.batch.to_string());
            kv(&format!("{p}crop"), t.crop.to_string());
            kv(&format!("{p}margin"), t.margin.to_string());
            kv(&format!("{p}steps_per_epoch"), t.steps_per_epoch.to_string());
            kv(&format!("{p}seed"), t.seed.to_string());
            kv(&format!("{p}lr"), t.optimizer.learning_rate.to_string());
            kv(&format!("{p}decay"), t.optimizer.decay.to_string());
            kv(&format!("{p}beta1"), t.optimizer.beta1.to_string());
            kv(&format!("{p}beta2"), t.optimizer.beta2.to_string());
            kv(&format!("{p}epsilon"), t.optimizer.epsilon.to_string());
            kv(
                &format!("{p}trust_ratio"),
                t.optimizer.layerwise_trust_ratio.to_string(),
            );
        }
        kv(
            "cache.dir",
            self.cache_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back_to_the_same_config() {
        for base in [PipelineConfig::desk(), PipelineConfig::paper()] {
            let mut c = base;
            c.mode = Mode::Scnn0;
            c.noise.clipped = true;
            c.cache_dir = Some("/tmp/x".into());
            let back = PipelineConfig::parse(&c.echo(), &[]).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# comment\nmode = scnn3   # trailing\n\nsearch.neighbors = 6\n";
        let c = PipelineConfig::parse(text, &["search.neighbors=2".into(), "noise.sigma=50".into()]).unwrap();
        assert_eq!(c.mode, Mode::Scnn3);
        assert_eq!(c.neighbors, 2);
        assert_eq!(c.noise.sigma, 50.0);
        assert_eq!(c.preset, Preset::Desk);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let c = PipelineConfig::parse("search.neighbors = 3\npreset = paper\n", &[]).unwrap();
        assert_eq!(c.neighbors, 3);
        assert_eq!(c.window.side, 89);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "nonsense",
            "bogus = 1",
            "search.neighbors = x",
            "mode = fast",
            "patch.stitch_side = 4",
        ] {
            let e = PipelineConfig::parse(text, &[]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}: {e}");
        }
    }

    #[test]
    fn scnn0_forces_single_frame_search() {
        let mut c = PipelineConfig::desk();
        c.mode = Mode::Scnn0;
        assert_eq!(c.effective_window().temporal_radius, 0);
        c.mode = Mode::Scnn3;
        assert_eq!(c.effective_window().temporal_radius, 1);
    }

    #[test]
    fn paper_scnn_shape() {
        let s = PipelineConfig::paper().scnn_config();
        assert_eq!((s.neighbors, s.groups, s.channels), (15, 50, 3));
        assert_eq!(s.neighbors * s.groups * s.channels, 2250);
    }
}
