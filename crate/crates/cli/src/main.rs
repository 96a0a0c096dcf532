use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use midframe::augment::{augment_dataset, timing_report, AugmentRequest, AugmentationManifest, MaskMode};
use midframe::data::{load_poses, DatasetSpec, Layout};
use midframe::flownet::{
    count_parameters, load_checkpoint, predict, save_checkpoint, Checkpoint, InitScheme, ModelWeights, NetConfig,
};
use midframe::imaging::{load_frame, save_frame, Frame};
use midframe::losses::BlockMatchingTeacher;
use midframe::metrics::{evaluate, EvalOptions};
use midframe::trainer::{train, RunConfig, TrainOptions};
use midframe::warp::write_flow;

#[derive(Parser)]
#[command(name = "midframe", version, about = "Flow-based video frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the frame at time t between two images.
    Interpolate {
        #[arg(long = "in", num_args = 2, value_names = ["A", "B"], required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write flow_t0.flo, flow_t1.flo and mask.png here.
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
    /// Insert interpolated frames into a directory of frames.
    Augment {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long, default_value = "none")]
        mask: MaskMode,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Camera poses, one per source frame (JSON lines or a JSON array).
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Reconstruction time in seconds; writes timing.json with the augmentation share.
        #[arg(long)]
        reconstruction_s: Option<f64>,
    },
    /// Score middle-frame predictions on a dataset; writes OUT.csv and OUT.json.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "triplet")]
        layout: Layout,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Clip list relative to the dataset root (triplet layout).
        #[arg(long)]
        list: Option<PathBuf>,
    },
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time single interpolations at several resolutions.
    Benchmark {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024x512,2048x1024,4096x2048")]
        sizes: Vec<Size>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// TOML file holding a net config; defaults to the standard widths.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Augmentation share of a finished augment run.
    Timing {
        /// Output directory of `augment`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        reconstruction_s: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Size {
    width: usize,
    height: usize,
}

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        let size = Size {
            width: parse(w)?,
            height: parse(h)?,
        };
        if size.width == 0 || size.height == 0 {
            return Err(format!("{s:?}: zero dimension"));
        }
        Ok(size)
    }
}

fn load_weights(path: &Path) -> Result<ModelWeights<f32>> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .weights)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Interpolate {
            inputs,
            t,
            out,
            ckpt,
            flow_dir,
        } => {
            let weights = load_weights(&ckpt)?;
            let f0: Frame<f32> = load_frame(&inputs[0])?;
            let f1: Frame<f32> = load_frame(&inputs[1])?;
            let pred = predict(&weights, &f0, &f1, t as f32)?;
            save_frame(&pred.frame, &out)?;
            if let Some(dir) = flow_dir {
                fs::create_dir_all(&dir)?;
                write_flow(&pred.output.flow_t0, dir.join("flow_t0.flo"))?;
                write_flow(&pred.output.flow_t1, dir.join("flow_t1.flo"))?;
                let m = &pred.output.mask.weights;
                let mask = Frame::new(m.broadcast((3, m.nrows(), m.ncols())).unwrap().to_owned())?;
                save_frame(&mask, dir.join("mask.png"))?;
            }
            info!("wrote {}", out.display());
        }
        Command::Augment {
            frames,
            factor,
            mask,
            ckpt,
            out,
            poses,
            reconstruction_s,
        } => {
            let weights = load_weights(&ckpt)?;
            let poses = poses.map(|p| load_poses(&p)).transpose()?;
            let spec = DatasetSpec::new(frames, Layout::FramesDir);
            let manifest = augment_dataset(&AugmentRequest {
                input: &spec,
                weights: &weights,
                checkpoint_id: ckpt.display().to_string(),
                factor,
                mask,
                output: out.clone(),
                poses,
            })?;
            let h = &manifest.header;
            println!(
                "inserted {} frames ({} failed) from {} sources in {:.2}s",
                h.inserted, h.failed, h.source_frames, h.total_wall_s
            );
            if let Some(recon) = reconstruction_s {
                let report = timing_report(&manifest, recon)?;
                write_json(&out.join("timing.json"), &report)?;
                println!("augmentation share {:.2}‰", report.proportion_permille);
            }
            if h.failed > 0 {
                bail!("{} insertions failed; see {}", h.failed, out.join("manifest.jsonl").display());
            }
        }
        Command::Eval {
            dataset,
            layout,
            ckpt,
            report,
            list,
        } => {
            let weights = load_weights(&ckpt)?;
            let mut spec = DatasetSpec::new(dataset, layout);
            if let Some(list) = list {
                spec = spec.with_list_file(list);
            }
            let result = evaluate(&weights, &ckpt.display().to_string(), &spec, &EvalOptions::default())?;
            let (csv, summary) = result.write(&report)?;
            let s = &result.summary;
            let psnr = s.psnr_mean.map_or("n/a".to_string(), |p| format!("{p:.3}"));
            println!("n {}  psnr {psnr}  ssim {:.4}  ie {:.3}", s.n, s.ssim_mean, s.ie_mean);
            info!("wrote {} and {}", csv.display(), summary.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let initial = cfg.initial_checkpoint()?;
            let data = cfg.build_data()?;
            let teacher = BlockMatchingTeacher::default();
            let options = TrainOptions {
                out_dir: Some(cfg.output.clone()),
                teacher: cfg.teacher.then_some(&teacher as _),
                ..Default::default()
            };
            fs::create_dir_all(&cfg.output)?;
            fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;
            let outcome = train(initial, data, &cfg.train, &options)?;
            if let Some(last) = outcome.log.last() {
                println!("step {} epoch {} loss {:.5}", last.step, last.epoch, last.total);
            }
            for p in &outcome.saved {
                info!("saved {}", p.display());
            }
        }
        Command::Benchmark {
            ckpt,
            sizes,
            report,
            repeats,
            warmup,
        } => {
            if repeats == 0 {
                bail!("--repeats must be at least 1");
            }
            let weights = load_weights(&ckpt)?;
            let mut rows = Vec::new();
            for size in &sizes {
                // content does not change the cost of a forward pass
                let f0 = Frame::constant(size.height, size.width, 0.25f32)?;
                let f1 = Frame::constant(size.height, size.width, 0.75f32)?;
                for _ in 0..warmup {
                    predict(&weights, &f0, &f1, 0.5)?;
                }
                let mut times = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let start = Instant::now();
                    predict(&weights, &f0, &f1, 0.5)?;
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                }
                let mean = times.iter().sum::<f64>() / repeats as f64;
                let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
                println!("{}x{}: mean {mean:.1} ms, min {min:.1} ms", size.width, size.height);
                rows.push(json!({
                    "width": size.width,
                    "height": size.height,
                    "megapixels": (size.width * size.height) as f64 / 1e6,
                    "repeats": repeats,
                    "mean_ms": mean,
                    "min_ms": min,
                    "times_ms": times,
                }));
            }
            let params = count_parameters(&weights);
            write_json(
                &report,
                &json!({
                    "checkpoint": ckpt.display().to_string(),
                    "parameters": params,
                    "parameters_m": params as f64 / 1e6,
                    "threads": 1,
                    "results": rows,
                }),
            )?;
        }
        Command::Init { out, net, seed } => {
            let config = match net {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<NetConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => NetConfig::default(),
            };
            let weights = ModelWeights::init(&config, InitScheme::ZeroHeads, seed)?;
            println!("{} parameters", count_parameters(&weights));
            save_checkpoint(&Checkpoint::new(weights, seed), &out)?;
        }
        Command::Timing {
            manifest,
            reconstruction_s,
        } => {
            let m = AugmentationManifest::read(&manifest)?;
            let report = timing_report(&m, reconstruction_s)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse().command)
}
