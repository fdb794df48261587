use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use patchctx_core::anomaly_map::{aggregate_pixels, fuse_scales, image_score, save_heatmap, save_raw, score_patches};
use patchctx_core::checkpoint::Checkpoint;
use patchctx_core::encoder::Scale;
use patchctx_core::harness::config::{parse_eta_range, ExperimentConfig};
use patchctx_core::harness::evaluate::{evaluate, run_mvtec_protocol, RunMeta, ScaleBanks};
use patchctx_core::harness::mvtec::{list_categories, load_mvtec_category, write_mvtec_category, IMAGE_SIDE};
use patchctx_core::harness::synthetic::{generate_synthetic_dataset, TextureFamily};
use patchctx_core::image::Image;
use patchctx_core::memory::MemoryBank;
use patchctx_core::training::{train, TrainEvent};
use patchctx_core::{Error, Result};

#[derive(Parser)]
#[command(name = "patchctx", version, about = "Patch-context defect inspection: train, index, inspect, evaluate")]
struct Cli {
    /// Experiment configuration (TOML). Defaults to the built-in full-size setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration preset to a file.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic texture dataset in the MVTec AD layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long, value_enum)]
        texture: Option<Texture>,
    },
    /// Train the encoder on a category's defect-free images.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON training report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Encode the training images into memory banks for both scales.
    BuildMemory {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving bank_64.bin and bank_32.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one image and write its fused anomaly heatmap.
    Inspect {
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        /// Heatmap PNG; a JSON sidecar and raw f64 scores are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detection and segmentation AUROC on a category's test split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Also sweep η over `a:b:step` from the cached neighbours.
        #[arg(long)]
        sweep_eta: Option<String>,
    },
    /// Sweep η without retraining or re-indexing and print AUROC per value.
    SweepEta {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        /// Range `a:b:step`.
        #[arg(long)]
        range: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, index and evaluate every category under a dataset root.
    Protocol {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated categories; defaults to all found under the root.
        #[arg(long, value_delimiter = ',')]
        categories: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root in the MVTec AD layout.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    category: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Texture {
    Stripes,
    Checkerboard,
    Blobs,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn bank_path(dir: &Path, scale: Scale) -> PathBuf {
    dir.join(format!("bank_{scale}.bin"))
}

fn load_banks(dir: &Path) -> Result<ScaleBanks> {
    Ok(ScaleBanks {
        large: MemoryBank::load(&bank_path(dir, Scale::Large64))?,
        small: MemoryBank::load(&bank_path(dir, Scale::Small32))?,
    })
}

fn log_event(event: &TrainEvent) {
    match event {
        TrainEvent::Epoch(_) => info!("{event}"),
        TrainEvent::Step { .. } => log::debug!("{event}"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Config { preset, out } => {
            let cfg = match preset {
                Preset::Full => ExperimentConfig::default(),
                Preset::Desk => ExperimentConfig::desk(),
            };
            cfg.save(&out)?;
            println!("wrote {} (hash {})", out.display(), cfg.hash()?);
        }
        Command::Synth {
            out,
            seed,
            train,
            test,
            texture,
        } => {
            let mut spec = cfg.synthetic.clone();
            if let Some(n) = train {
                spec.train_count = n;
            }
            if let Some(n) = test {
                spec.test_count = n;
            }
            if let Some(t) = texture {
                spec.texture = match t {
                    Texture::Stripes => TextureFamily::Stripes,
                    Texture::Checkerboard => TextureFamily::Checkerboard,
                    Texture::Blobs => TextureFamily::Blobs,
                };
            }
            let ds = generate_synthetic_dataset(&spec, seed.unwrap_or(cfg.data_seed))?;
            let dir = write_mvtec_category(&out, &ds)?;
            println!("wrote {} train / {} test images to {}", ds.train.len(), ds.test.len(), dir.display());
        }
        Command::Train { data, out, report } => {
            let ds = load_mvtec_category(&data.data, &data.category)?;
            let images = ds.train_images();
            info!("training on {} images of {}", images.len(), data.category);
            let (ckpt, rep) = train(&images, &cfg.training, &cfg.encoder, &cfg.pretext, &mut log_event)?;
            ckpt.save(&out)?;
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&rep)?).map_err(|source| Error::Io { path: path.clone(), source })?;
            }
            let acc = rep.final_accuracy();
            println!("wrote {} (held-out pretext accuracy {acc:.4})", out.display());
        }
        Command::BuildMemory { data, checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_mvtec_category(&data.data, &data.category)?;
            let banks = ScaleBanks::build(&ckpt.model, &ds.train_images(), &cfg.memory)?;
            create_dir(&out)?;
            for scale in Scale::ALL {
                let path = bank_path(&out, scale);
                banks.get(scale).save(&path)?;
                println!("wrote {} ({} rows)", path.display(), banks.get(scale).len());
            }
        }
        Command::Inspect {
            image,
            checkpoint,
            banks,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let banks = load_banks(&banks)?;
            let img = Image::load_resized(&image, IMAGE_SIDE)?;
            let eval = &cfg.evaluation;
            let mut maps = Vec::new();
            for scale in Scale::ALL {
                let grid = score_patches(&img, &ckpt.model, banks.get(scale), scale, eval.stride(scale), &eval.affinity)?;
                maps.push(aggregate_pixels(&grid));
            }
            let fused = fuse_scales(&maps[0], &maps[1], eval.fusion)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_heatmap(&fused, &out)?;
            save_raw(&fused, &out.with_extension("f64"))?;
            println!("score {:.6} heatmap {}", image_score(&fused), out.display());
        }
        Command::Evaluate {
            data,
            checkpoint,
            banks,
            out,
            sweep_eta,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let banks = load_banks(&banks)?;
            let ds = load_mvtec_category(&data.data, &data.category)?;
            let mut eval_cfg = cfg.evaluation.clone();
            if let Some(range) = sweep_eta {
                eval_cfg.sweep_eta = parse_eta_range(&range)?;
            }
            let meta = RunMeta {
                category: data.category.clone(),
                config_hash: cfg.hash()?,
                data_seed: None,
                train_seed: Some(cfg.training.seed),
                init_seed: Some(ckpt.model.config.init_seed),
            };
            let result = evaluate(&ckpt.model, &banks, &ds.test, &eval_cfg, meta)?;
            let (json, _) = result.report.write(&out, &data.category)?;
            print!("{}", result.report.render_text());
            println!("wrote {}", json.display());
        }
        Command::SweepEta {
            data,
            checkpoint,
            banks,
            range,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let banks = load_banks(&banks)?;
            let ds = load_mvtec_category(&data.data, &data.category)?;
            let mut eval_cfg = cfg.evaluation.clone();
            eval_cfg.sweep_eta = parse_eta_range(&range)?;
            let meta = RunMeta {
                category: data.category.clone(),
                config_hash: cfg.hash()?,
                ..RunMeta::default()
            };
            let result = evaluate(&ckpt.model, &banks, &ds.test, &eval_cfg, meta)?;
            println!("  eta  detection  segmentation");
            for p in &result.report.eta_sweep {
                println!("{:>5}  {:>9.4}  {:>12.4}", p.eta, p.detection_auroc, p.segmentation_auroc);
            }
            if let Some(dir) = out {
                result.report.write(&dir, &format!("{}_sweep", data.category))?;
            }
        }
        Command::Protocol { data, categories, out } => {
            let categories = if categories.is_empty() { list_categories(&data)? } else { categories };
            if categories.is_empty() {
                return Err(Error::Dataset(format!("no categories found under {}", data.display())));
            }
            let table = run_mvtec_protocol(&data, &categories, &cfg, &out, &mut |cat, ev| {
                if let TrainEvent::Epoch(_) = ev {
                    info!("[{cat}] {ev}");
                }
            })?;
            print!("{}", table.render_text());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "config" => 2,
        "input" | "shape" | "geometry" | "scale" => 3,
        "dataset" => 4,
        "io" | "format" => 5,
        "training" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(exit_code(&err))
        }
    }
}
