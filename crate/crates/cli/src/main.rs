use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pacnet::pipeline::{self, checkpoint, AugmentCache, Models, PipelineConfig};
use pacnet::train::write_loss_csv;
use pacnet::videoio::synthetic::{make_clip, ClipSpec, MotionKind};
use pacnet::videoio::{add_noise, psnr_per_frame, FrameSequence};
use pacnet::{Error, Result};

/// Patch-craft video denoising.
#[derive(Parser)]
#[command(name = "patchcraft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset (desk|paper); overrides the file's preset.
    #[arg(long)]
    preset: Option<String>,
    /// pacnet|scnn3|scnn0
    #[arg(long)]
    mode: Option<String>,
    /// Augmented-input cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic clip.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "translate")]
        kind: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add Gaussian noise as configured by `noise.*`.
    AddNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Search neighbors and write the augmented input of every frame to the cache.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the spatial network on clean clips (noise is synthesized).
    TrainSpatial {
        #[arg(long, num_args = 1.., required = true)]
        clean: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the temporal network with a frozen spatial network.
    TrainTemporal {
        #[arg(long, num_args = 1.., required = true)]
        clean: Vec<PathBuf>,
        #[arg(long)]
        scnn: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Denoise a sequence.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scnn: PathBuf,
        #[arg(long)]
        tcnn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference for PSNR reporting.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Per-frame PSNR CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-frame and average PSNR between two sequences.
    Psnr {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Closed-form and enumerated parameter counts.
    Params {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(p) = &common.preset {
        overrides.push(format!("preset={p}"));
    }
    if let Some(m) = &common.mode {
        overrides.push(format!("mode={m}"));
    }
    if let Some(c) = &common.cache {
        overrides.push(format!("cache.dir={}", c.display()));
    }
    overrides.extend(common.set.iter().cloned());
    let cfg = PipelineConfig::parse(&text, &overrides)?;
    eprintln!("# resolved configuration");
    for line in cfg.echo().lines() {
        eprintln!("#   {line}");
    }
    Ok(cfg)
}

fn open_cache(cfg: &PipelineConfig) -> Result<Option<AugmentCache>> {
    cfg.cache_dir.as_ref().map(AugmentCache::open).transpose()
}

fn report_cache(cache: &Option<AugmentCache>) {
    if let Some(c) = cache {
        eprintln!(
            "cache {}: {} hits, {} misses, {} corrupted entries recomputed",
            c.dir().display(),
            c.stats.hits,
            c.stats.misses,
            c.stats.corrupted
        );
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<FrameSequence>> {
    paths.iter().map(FrameSequence::load).collect()
}

fn write_curve(path: &Option<PathBuf>, curve: &[pacnet::train::LossPoint]) -> Result<()> {
    if let Some(p) = path {
        write_loss_csv(curve, p)?;
    }
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!(
            "training loss: step {} psnr {:.2} dB -> step {} psnr {:.2} dB",
            first.step, first.psnr, last.step, last.psnr
        );
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic {
            out,
            kind,
            frames,
            height,
            width,
            channels,
            seed,
        } => {
            let spec = ClipSpec {
                kind: kind.parse::<MotionKind>()?,
                frames,
                height,
                width,
                channels,
                seed,
            };
            let clip = make_clip(&spec)?;
            clip.save_dir(&out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::AddNoise { input, out, common } => {
            let cfg = resolve(&common)?;
            let seq = FrameSequence::load(&input)?;
            add_noise(&seq, &cfg.noise).save_dir(&out)?;
            println!("wrote {} noisy frames to {}", seq.len(), out.display());
        }
        Command::Augment { input, common } => {
            let cfg = resolve(&common)?;
            let mut cache =
                open_cache(&cfg)?.ok_or_else(|| Error::Config("augment needs --cache or cache.dir".into()))?;
            let seq = FrameSequence::load(&input)?;
            let window = cfg.effective_window();
            for t in 0..seq.len() {
                let aug = cache.get_or_compute(&seq, t, &cfg.patch, &window, cfg.neighbors)?;
                let key = pipeline::cache_key(&seq, t, &cfg.patch, &window, cfg.neighbors);
                println!(
                    "frame {t}: {:?} -> {}",
                    aug.tensor().shape(),
                    cache.entry_path(&key).display()
                );
            }
            report_cache(&Some(cache));
        }
        Command::TrainSpatial {
            clean,
            out,
            loss_csv,
            common,
        } => {
            let cfg = resolve(&common)?;
            let clips = load_all(&clean)?;
            let mut cache = open_cache(&cfg)?;
            let prepared = pipeline::prepare_clips(&clips, &cfg, &cfg.effective_window(), cache.as_mut())?;
            report_cache(&cache);
            let (net, curve) = pipeline::train_spatial_model(&prepared, &cfg, |step, net| {
                log::info!("epoch checkpoint at step {step}");
                checkpoint::save_scnn(net, step, &out)
            })?;
            checkpoint::save_scnn(&net, cfg.spatial_train.steps, &out)?;
            write_curve(&loss_csv, &curve)?;
            println!("spatial checkpoint: {}", out.display());
        }
        Command::TrainTemporal {
            clean,
            scnn,
            out,
            loss_csv,
            common,
        } => {
            let cfg = resolve(&common)?;
            let spatial = checkpoint::load_scnn(&scnn, &cfg.scnn_config())?;
            let clips = load_all(&clean)?;
            let mut cache = open_cache(&cfg)?;
            let prepared = pipeline::prepare_clips(&clips, &cfg, &cfg.effective_window(), cache.as_mut())?;
            report_cache(&cache);
            let (net, curve) = pipeline::train_temporal_model(&prepared, &spatial, &cfg, |step, net| {
                log::info!("epoch checkpoint at step {step}");
                checkpoint::save_tcnn(net, step, &out)
            })?;
            checkpoint::save_tcnn(&net, cfg.temporal_train.steps, &out)?;
            write_curve(&loss_csv, &curve)?;
            println!("temporal checkpoint: {}", out.display());
        }
        Command::Denoise {
            input,
            scnn,
            tcnn,
            out,
            clean,
            report,
            common,
        } => {
            let cfg = resolve(&common)?;
            let models = Models {
                scnn: checkpoint::load_scnn(&scnn, &cfg.scnn_config())?,
                tcnn: match (&tcnn, cfg.mode) {
                    (Some(p), pipeline::Mode::Pacnet) => Some(checkpoint::load_tcnn(p, &cfg.tcnn)?),
                    _ => None,
                },
            };
            let noisy = FrameSequence::load(&input)?;
            let clean = clean.as_deref().map(FrameSequence::load).transpose()?;
            let mut cache = open_cache(&cfg)?;
            let (seq, rep) = pipeline::denoise(&noisy, &models, &cfg, clean.as_ref(), cache.as_mut())?;
            seq.save_dir(&out)?;
            eprint!("{}", rep.table());
            if let Some(p) = report {
                fs::write(&p, rep.psnr_csv()).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
            if let Some(a) = rep.average_psnr {
                println!("average psnr: {} dB", fmt_db(a));
            }
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::Psnr { clean, test } => {
            let a = FrameSequence::load(&clean)?;
            let b = FrameSequence::load(&test)?;
            let v = psnr_per_frame(&a, &b)?;
            for (i, p) in v.iter().enumerate() {
                println!("frame {i}: {} dB", fmt_db(*p));
            }
            println!("average: {} dB", fmt_db(v.iter().sum::<f64>() / v.len() as f64));
        }
        Command::Params { common } => {
            let cfg = resolve(&common)?;
            let r = pipeline::param_report(&cfg)?;
            print!("{}", r.table());
            if !r.consistent() {
                eprintln!("error: closed-form and enumerated counts differ");
                std::process::exit(2);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
