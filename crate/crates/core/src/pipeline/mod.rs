//! End-to-end orchestration: configuration, caching, training drivers,
//! denoising in the three modes, and reports.

mod cache;
pub mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

pub use cache::{augment_cached, cache_key, AugmentCache, CacheStats};
pub use config::{Mode, PipelineConfig, Preset};

use crate::error::{Error, Result};
use crate::patchcraft::AugmentedInput;
use crate::patchmatch::SearchWindow;
use crate::scnn::{train_spatial, Scnn, SpatialSample};
use crate::tcnn::{train_temporal, Tcnn, TemporalClip};
use crate::tensor::Tensor;
use crate::train::LossPoint;
use crate::videoio::synthetic::{make_clip, ClipSpec, MotionKind};
use crate::videoio::{add_noise, psnr, FrameSequence, NoiseSpec};

pub const PAPER_SCNN_PARAMS: f64 = 1.34e6;
pub const PAPER_TCNN_PARAMS: f64 = 1.53e6;
pub const PAPER_TOTAL_PARAMS: f64 = 2.87e6;

/// Trained networks for a run. The T-CNN is only needed in `pacnet` mode.
pub struct Models {
    pub scnn: Scnn<f32>,
    pub tcnn: Option<Tcnn<f32>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub frames: usize,
    /// Per-frame PSNR of the output against the clean reference, if given.
    pub psnr: Vec<f64>,
    pub average_psnr: Option<f64>,
    pub timings: Vec<StageTiming>,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub cache_corrupted: usize,
    pub config: String,
}

impl RunReport {
    pub fn psnr_csv(&self) -> String {
        let mut s = String::from("frame,psnr\n");
        for (i, p) in self.psnr.iter().enumerate() {
            writeln!(s, "{i},{p:.6}").expect("write to string");
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "mode {}  frames {}", self.mode, self.frames).unwrap();
        for t in &self.timings {
            writeln!(s, "  {:<10} {:>9.3} s", t.stage, t.seconds).unwrap();
        }
        writeln!(
            s,
            "  cache: {} hits, {} misses, {} corrupted",
            self.cache_hits, self.cache_misses, self.cache_corrupted
        )
        .unwrap();
        for (i, p) in self.psnr.iter().enumerate() {
            writeln!(s, "  frame {i:>4}  {p:>8.3} dB").unwrap();
        }
        if let Some(a) = self.average_psnr {
            writeln!(s, "  average     {a:>8.3} dB").unwrap();
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Augmented inputs for every frame of `noisy`.
pub fn augment_sequence(
    noisy: &FrameSequence,
    config: &PipelineConfig,
    window: &SearchWindow,
    mut cache: Option<&mut AugmentCache>,
) -> Result<Vec<AugmentedInput>> {
    (0..noisy.len())
        .map(|t| augment_cached(cache.as_deref_mut(), noisy, t, &config.patch, window, config.neighbors))
        .collect()
}

/// Checks that the models fit the configuration and the input before any work.
fn check_models(noisy: &FrameSequence, models: &Models, config: &PipelineConfig) -> Result<()> {
    let expected = config.scnn_config();
    if models.scnn.config != expected {
        return Err(Error::Checkpoint {
            path: "<scnn>".into(),
            detail: format!("model is {:?}, configuration needs {expected:?}", models.scnn.config),
        });
    }
    let (c, _, _) = noisy.dims();
    if c != config.channels {
        return Err(Error::invalid(
            "denoise",
            format!("input has {c} channels, configuration {}", config.channels),
        ));
    }
    if config.mode == Mode::Pacnet {
        let t = models
            .tcnn
            .as_ref()
            .ok_or_else(|| Error::Config("pacnet mode needs a T-CNN checkpoint".into()))?;
        if t.config != config.tcnn {
            return Err(Error::Checkpoint {
                path: "<tcnn>".into(),
                detail: format!("model is {:?}, configuration needs {:?}", t.config, config.tcnn),
            });
        }
    }
    Ok(())
}

/// Runs the configured mode on `noisy`. Output values are clamped to `[0, 1]`.
pub fn denoise(
    noisy: &FrameSequence,
    models: &Models,
    config: &PipelineConfig,
    clean: Option<&FrameSequence>,
    mut cache: Option<&mut AugmentCache>,
) -> Result<(FrameSequence, RunReport)> {
    check_models(noisy, models, config)?;
    if let Some(c) = clean {
        if c.len() != noisy.len() || c.dims() != noisy.dims() {
            return Err(Error::shape(
                "denoise",
                "clean reference differs from the noisy input in shape",
            ));
        }
    }
    let before = cache.as_ref().map(|c| c.stats).unwrap_or_default();
    let mut timings = Vec::new();
    let window = config.effective_window();

    let t = Instant::now();
    let augs = augment_sequence(noisy, config, &window, cache.as_deref_mut())?;
    timings.push(StageTiming {
        stage: "augment".into(),
        seconds: t.elapsed().as_secs_f64(),
    });

    let t = Instant::now();
    let yhat = augs
        .iter()
        .map(|a| models.scnn.denoise(a))
        .collect::<Result<Vec<_>>>()?;
    timings.push(StageTiming {
        stage: "spatial".into(),
        seconds: t.elapsed().as_secs_f64(),
    });

    let out = if config.mode == Mode::Pacnet {
        let t = Instant::now();
        let tcnn = models.tcnn.as_ref().expect("checked above");
        let x = tcnn.refine(noisy, &yhat)?;
        timings.push(StageTiming {
            stage: "temporal".into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        x
    } else {
        yhat
    };
    for (i, f) in out.iter().enumerate() {
        if !f.all_finite() {
            return Err(Error::NonFinite {
                what: "denoised frame",
                detail: format!("frame {i}"),
            });
        }
    }
    let out = FrameSequence::new(out)?.clamped();
    let psnr_list = match clean {
        Some(c) => crate::videoio::psnr_per_frame(c, &out)?,
        None => Vec::new(),
    };
    let after = cache.as_ref().map(|c| c.stats).unwrap_or_default();
    let report = RunReport {
        mode: config.mode,
        frames: out.len(),
        average_psnr: (!psnr_list.is_empty()).then(|| mean(&psnr_list)),
        psnr: psnr_list,
        timings,
        cache_hits: after.hits - before.hits,
        cache_misses: after.misses - before.misses,
        cache_corrupted: after.corrupted - before.corrupted,
        config: config.echo(),
    };
    Ok((out, report))
}

/// Noise realization for the `index`-th clip of a dataset.
pub fn clip_noise(base: &NoiseSpec, index: usize) -> NoiseSpec {
    NoiseSpec {
        seed: crate::videoio::frame_key(base.seed, 0x5EED_0000 + index as u64),
        ..*base
    }
}

/// A clean clip, its noisy version and the augmented input of every frame.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub clean: FrameSequence,
    pub noisy: FrameSequence,
    pub augs: Vec<AugmentedInput>,
}

pub fn prepare_clips(
    clean: &[FrameSequence],
    config: &PipelineConfig,
    window: &SearchWindow,
    mut cache: Option<&mut AugmentCache>,
) -> Result<Vec<PreparedClip>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let noisy = add_noise(c, &clip_noise(&config.noise, i));
            let augs = augment_sequence(&noisy, config, window, cache.as_deref_mut())?;
            Ok(PreparedClip {
                clean: c.clone(),
                noisy,
                augs,
            })
        })
        .collect()
}

pub fn train_spatial_model(
    clips: &[PreparedClip],
    config: &PipelineConfig,
    on_epoch: impl FnMut(u64, &Scnn<f32>) -> Result<()>,
) -> Result<(Scnn<f32>, Vec<LossPoint>)> {
    let mut net = Scnn::new(config.scnn_config(), config.seed)?;
    let samples: Vec<SpatialSample> = clips
        .iter()
        .flat_map(|c| {
            c.augs.iter().zip(c.clean.frames()).map(|(a, f)| SpatialSample {
                aug: a.clone(),
                clean: f.clone(),
            })
        })
        .collect();
    let curve = train_spatial(&mut net, &samples, &config.spatial_train, on_epoch)?;
    Ok((net, curve))
}

/// Spatial outputs `ŷ` (unclamped) for every frame of a prepared clip.
pub fn spatial_outputs(scnn: &Scnn<f32>, clip: &PreparedClip) -> Result<Vec<Tensor<f32>>> {
    clip.augs.iter().map(|a| scnn.denoise(a)).collect()
}

pub fn train_temporal_model(
    clips: &[PreparedClip],
    scnn: &Scnn<f32>,
    config: &PipelineConfig,
    on_epoch: impl FnMut(u64, &Tcnn<f32>) -> Result<()>,
) -> Result<(Tcnn<f32>, Vec<LossPoint>)> {
    let temporal: Vec<TemporalClip> = clips
        .iter()
        .map(|c| {
            Ok(TemporalClip {
                noisy: c.noisy.clone(),
                yhat: spatial_outputs(scnn, c)?,
                clean: c.clean.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut net = Tcnn::new(config.tcnn, config.seed.wrapping_add(1))?;
    let curve = train_temporal(&mut net, &temporal, &config.temporal_train, on_epoch)?;
    Ok((net, curve))
}

/// Deterministic synthetic clips alternating translation and rotation.
pub fn synthetic_set(
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    (0..count)
        .map(|i| {
            make_clip(&ClipSpec {
                kind: if i % 2 == 0 {
                    MotionKind::Translate
                } else {
                    MotionKind::Rotate
                },
                frames,
                height,
                width,
                channels,
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            })
        })
        .collect()
}

/// Mean per-frame PSNR of `test` against `clean` for a list of clips.
pub fn mean_psnr(clean: &[FrameSequence], test: &[FrameSequence]) -> Result<f64> {
    let mut all = Vec::new();
    for (c, t) in clean.iter().zip(test) {
        for (a, b) in c.frames().iter().zip(t.frames()) {
            all.push(psnr(a, b)?);
        }
    }
    Ok(mean(&all))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub module: &'static str,
    pub part: String,
    pub closed_form: usize,
    pub enumerated: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub scnn_total: usize,
    pub tcnn_total: usize,
    pub total: usize,
    pub feature_maps: usize,
}

impl ParamReport {
    pub fn scnn_deviation(&self) -> f64 {
        (self.scnn_total as f64 - PAPER_SCNN_PARAMS) / PAPER_SCNN_PARAMS
    }

    pub fn tcnn_deviation(&self) -> f64 {
        (self.tcnn_total as f64 - PAPER_TCNN_PARAMS) / PAPER_TCNN_PARAMS
    }

    pub fn total_deviation(&self) -> f64 {
        (self.total as f64 - PAPER_TOTAL_PARAMS) / PAPER_TOTAL_PARAMS
    }

    pub fn consistent(&self) -> bool {
        self.rows.iter().all(|r| r.closed_form == r.enumerated)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<6} {:<22} {:>12} {:>12}",
            "module", "part", "closed-form", "enumerated"
        )
        .unwrap();
        for r in &self.rows {
            let flag = if r.closed_form == r.enumerated {
                ""
            } else {
                "  MISMATCH"
            };
            writeln!(
                s,
                "{:<6} {:<22} {:>12} {:>12}{flag}",
                r.module, r.part, r.closed_form, r.enumerated
            )
            .unwrap();
        }
        let line = |s: &mut String, name: &str, v: usize, paper: f64, dev: f64, tol: f64| {
            let flag = if dev.abs() <= tol { "within" } else { "OUTSIDE" };
            writeln!(
                s,
                "{name:<29} {v:>12}   published {paper:.3e}  deviation {:+.2}% ({flag} {:.0}%)",
                dev * 100.0,
                tol * 100.0
            )
            .unwrap();
        };
        line(
            &mut s,
            "S-CNN total",
            self.scnn_total,
            PAPER_SCNN_PARAMS,
            self.scnn_deviation(),
            0.01,
        );
        line(
            &mut s,
            "T-CNN total",
            self.tcnn_total,
            PAPER_TCNN_PARAMS,
            self.tcnn_deviation(),
            0.10,
        );
        line(
            &mut s,
            "total",
            self.total,
            PAPER_TOTAL_PARAMS,
            self.total_deviation(),
            0.10,
        );
        writeln!(s, "feature maps per frame        {:>12}", self.feature_maps).unwrap();
        s
    }
}

/// Closed-form and enumerated parameter counts for every layer.
pub fn param_report(config: &PipelineConfig) -> Result<ParamReport> {
    let sc = config.scnn_config();
    let scnn = Scnn::<f32>::new(sc, 0)?;
    let tcnn = Tcnn::<f32>::new(config.tcnn, 0)?;
    let count = |entries: &[crate::tensor::ParamEntry<f32>], prefix: &str| -> usize {
        entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    };
    let mut rows = Vec::new();
    for (b, lc) in sc.layer_configs().iter().enumerate() {
        let e = scnn.bank.entries();
        for (part, cf) in [("vh", lc.vh_count()), ("f", lc.f_count()), ("n", lc.n_count())] {
            rows.push(ParamRow {
                module: "S-CNN",
                part: format!("block{b}.{part} {}->{} f{}->{}", lc.n_in, lc.n_out, lc.f_in, lc.f_out),
                closed_form: cf,
                enumerated: count(e, &format!("block{b}.{part}.")),
            });
        }
        let bn = count(e, &format!("block{b}.bn."));
        if bn > 0 {
            rows.push(ParamRow {
                module: "S-CNN",
                part: format!("block{b}.bn"),
                closed_form: 2 * lc.n_out * lc.f_out * lc.c,
                enumerated: bn,
            });
        }
    }
    let k = config.tcnn.kernel;
    for (i, (cin, cout)) in config.tcnn.conv3d_widths().into_iter().enumerate() {
        rows.push(ParamRow {
            module: "T-CNN",
            part: format!("conv3d{i} {cin}->{cout}"),
            closed_form: cin * cout * k * k * k + cout,
            enumerated: count(tcnn.bank.entries(), &format!("conv3d{i}.")),
        });
    }
    for (i, (cin, cout)) in config.tcnn.conv2d_widths().into_iter().enumerate() {
        rows.push(ParamRow {
            module: "T-CNN",
            part: format!("conv2d{i} {cin}->{cout}"),
            closed_form: cin * cout * k * k + cout,
            enumerated: count(tcnn.bank.entries(), &format!("conv2d{i}.")),
        });
    }
    let scnn_total = sc.param_count();
    let tcnn_total = config.tcnn.param_count();
    Ok(ParamReport {
        rows,
        scnn_total,
        tcnn_total,
        total: scnn_total + tcnn_total,
        feature_maps: sc.neighbors * sc.groups * sc.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::desk();
        c.neighbors = 2;
        c.scnn_blocks = 3;
        c.window.side = 9;
        c.tcnn.conv2d_layers = 2;
        c.tcnn.conv3d_channels = 2;
        c.tcnn.conv2d_channels = 3;
        c
    }

    fn models(c: &PipelineConfig) -> Models {
        Models {
            scnn: Scnn::new(c.scnn_config(), 0).unwrap(),
            tcnn: Some(Tcnn::new(c.tcnn, 0).unwrap()),
        }
    }

    #[test]
    fn paper_report_matches_published_scale() {
        let r = param_report(&PipelineConfig::paper()).unwrap();
        assert!(r.consistent());
        assert!(r.scnn_deviation().abs() < 0.01);
        assert!(r.total_deviation().abs() < 0.10);
        assert_eq!(r.feature_maps, 2250);
        assert!(r.table().contains("S-CNN total"));
    }

    #[test]
    fn desk_report_is_self_consistent() {
        let r = param_report(&PipelineConfig::desk()).unwrap();
        assert!(r.consistent());
        let sum: usize = r.rows.iter().map(|r| r.enumerated).sum();
        assert_eq!(sum, r.total);
    }

    #[test]
    fn untrained_models_return_the_clamped_input() {
        let c = tiny_config();
        let clean = &synthetic_set(1, 3, 12, 12, 1, 0).unwrap()[0];
        let noisy = add_noise(clean, &c.noise);
        let (out, report) = denoise(&noisy, &models(&c), &c, Some(clean), None).unwrap();
        assert_eq!(out, noisy.clamped());
        assert_eq!(report.psnr.len(), 3);
    }

    #[test]
    fn single_frame_scnn0_equals_scnn3() {
        let mut c = tiny_config();
        let clean = &synthetic_set(1, 1, 12, 12, 1, 4).unwrap()[0];
        let noisy = add_noise(clean, &c.noise);
        let mut m = models(&c);
        for e in m.scnn.bank.entries_mut() {
            for v in e.value.data_mut() {
                *v += 0.01;
            }
        }
        c.mode = Mode::Scnn0;
        let a = denoise(&noisy, &m, &c, None, None).unwrap().0;
        c.mode = Mode::Scnn3;
        let b = denoise(&noisy, &m, &c, None, None).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn mismatches_are_rejected() {
        let c = tiny_config();
        let clean = &synthetic_set(1, 2, 12, 12, 1, 0).unwrap()[0];
        let mut m = models(&c);
        m.tcnn = None;
        assert_eq!(denoise(clean, &m, &c, None, None).unwrap_err().exit_code(), 1);
        let mut other = c.clone();
        other.neighbors = 3;
        assert!(matches!(
            denoise(clean, &models(&c), &other, None, None),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn cache_second_run_skips_search() {
        let c = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let mut cache = AugmentCache::open(dir.path()).unwrap();
        let clean = &synthetic_set(1, 2, 12, 12, 1, 0).unwrap()[0];
        let m = models(&c);
        let (a, r1) = denoise(clean, &m, &c, None, Some(&mut cache)).unwrap();
        let (b, r2) = denoise(clean, &m, &c, None, Some(&mut cache)).unwrap();
        assert_eq!(a, b);
        assert_eq!((r1.cache_misses, r2.cache_hits, r2.cache_misses), (2, 2, 0));
    }
}
