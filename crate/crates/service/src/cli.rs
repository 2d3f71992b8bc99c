//! `ehgan` subcommands. Exit codes: 0 success, 2 validation or usage error, 1 internal error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ehgan_core::checkpoint::Checkpoint;
use ehgan_core::dataset::{synthetic, DatasetIndex};
use ehgan_core::evaluation::{benchmark_runtime, evaluate_corpus, Embedder, PerceptualEmbedder, RandomProjectionEmbedder};
use ehgan_core::imaging::{load_image, load_mask_strict, save_image};
use ehgan_core::networks::{NetworkConfig, Networks, PerceptualConfig};
use ehgan_core::pipeline::{run_pipeline, Model, TransferRequest};
use ehgan_core::superres::{build_backend, upscale, SrConfig, SrKind};
use ehgan_core::training::{overfit_smoke, train, TrainConfig};
use serde_json::json;

use crate::{serve, ServiceConfig, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "ehgan", version, about = "Real-time hairstyle transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SrChoice {
    Bicubic,
    Pretrained,
}

impl From<SrChoice> for SrKind {
    fn from(c: SrChoice) -> Self {
        match c {
            SrChoice::Bicubic => SrKind::Bicubic,
            SrChoice::Pretrained => SrKind::PretrainedFaceRestorer,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EmbedderChoice {
    /// Seeded random projection; hermetic, not comparable with published FIDs.
    Random,
    /// Pooled VGG19 features; pass --vgg-weights for pretrained weights.
    Vgg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scale {
    Micro,
    Desk,
    Full,
}

impl Scale {
    fn config(self) -> NetworkConfig {
        match self {
            Scale::Micro => NetworkConfig::micro(),
            Scale::Desk => NetworkConfig::desk(),
            Scale::Full => NetworkConfig::default(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config; logs and checkpoints go to runs/<timestamp>/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint, appending to its run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Overfit a few training images and report PSNR before and after.
    Smoke {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID, PSNR and SSIM of pseudo-supervised reconstructions on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "random")]
        embedder: EmbedderChoice,
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
        /// Split fraction and seed used if the index has to be built.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median per-image time of generator + composite + super-resolution.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        timed: usize,
        #[arg(long, default_value = "cpu")]
        hardware_tag: String,
        #[arg(long, value_enum, default_value = "bicubic")]
        sr: SrChoice,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer the reference hairstyle onto the input portrait.
    Transfer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        ref_mask: PathBuf,
        #[arg(long)]
        target_mask: PathBuf,
        /// Hair mask of the input, for the coverage check.
        #[arg(long)]
        input_mask: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "bicubic")]
        sr: SrChoice,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write an untrained checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic portrait corpus (images plus .mask.png files).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build (or rebuild) the dataset index.
    Index {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ehgan_core::Error> for CliError {
    fn from(e: ehgan_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        CliError::Internal(e.to_string())
    }
}

/// Errors reading user-supplied inputs count as validation failures.
fn input<T>(r: ehgan_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Validation(e.to_string()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    match out {
        Some(p) => write_json(p, value),
        None => Ok(()),
    }
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, resume } => {
            let cfg = input(TrainConfig::load(&config))?;
            let run_dir = match &resume {
                Some(ckpt) => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
                None => cfg
                    .runs_dir
                    .join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()),
            };
            let outcome = train(&cfg, &run_dir, resume.as_deref())?;
            println!("{}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Smoke {
            config,
            images,
            steps,
            out,
        } => {
            let cfg = input(TrainConfig::load(&config))?;
            let report = overfit_smoke(&cfg, images, steps)?;
            let summary = json!({
                "n_images": report.n_images,
                "n_steps": report.n_steps,
                "initial_psnr": report.initial_psnr,
                "final_psnr": report.final_psnr,
                "improved": report.improved(),
                "final": report.reports.last(),
            });
            emit(&summary, out.as_deref())?;
            if steps > 0 && !report.improved() {
                return Err(CliError::Internal("reconstruction PSNR did not improve".into()));
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            n,
            out,
            embedder,
            vgg_weights,
            split,
            seed,
        } => {
            let model = Model::load(&ckpt)?;
            let index = DatasetIndex::open_or_build(&data, split, seed)?;
            let embedder: Box<dyn Embedder> = match embedder {
                EmbedderChoice::Random => Box::new(RandomProjectionEmbedder::new(seed)),
                EmbedderChoice::Vgg => Box::new(PerceptualEmbedder::new(&PerceptualConfig {
                    weights_path: vgg_weights,
                    ..PerceptualConfig::default()
                })?),
            };
            let report = evaluate_corpus(&model, &index, n, embedder.as_ref(), seed)?;
            emit(&report, out.as_deref())
        }
        Command::Bench {
            ckpt,
            warmup,
            timed,
            hardware_tag,
            sr,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let backend = build_backend(&SrConfig {
                kind: sr.into(),
                ..SrConfig::default()
            })?;
            let (img, mask) = synthetic::portrait(1, 128);
            let (reference, ref_mask) = synthetic::portrait(2, 128);
            let prepared = model.prepare(&TransferRequest {
                input_image: img,
                reference_image: reference,
                reference_mask: ref_mask,
                target_mask: mask,
                input_mask: None,
                seed: Some(0),
            })?;
            let report = benchmark_runtime(
                || {
                    let low = model.synthesize(&prepared)?;
                    upscale(&low, backend.as_ref()).map(drop)
                },
                warmup,
                timed,
                &hardware_tag,
            )?;
            emit(&report, out.as_deref())
        }
        Command::Transfer {
            input: input_path,
            reference,
            ref_mask,
            target_mask,
            input_mask,
            ckpt,
            out,
            seed,
            sr,
        } => {
            let req = TransferRequest {
                input_image: input(load_image(&input_path))?,
                reference_image: input(load_image(&reference))?,
                reference_mask: input(load_mask_strict(&ref_mask))?,
                target_mask: input(load_mask_strict(&target_mask))?,
                input_mask: input_mask.map(|p| input(load_mask_strict(&p))).transpose()?,
                seed,
            };
            let model = Model::load(&ckpt)?;
            let backend = build_backend(&SrConfig {
                kind: sr.into(),
                ..SrConfig::default()
            })?;
            let result = run_pipeline(&req, &model, backend.as_ref())?;
            save_image(&result.output_image, &out)?;
            if let Some(w) = &result.coverage_warning {
                eprintln!("warning: {w}");
            }
            write_json(
                &out.with_extension("json"),
                &json!({
                    "output": out,
                    "resolution": result.output_image.resolution(),
                    "seed": result.seed,
                    "coverage_warning": result.coverage_warning,
                    "timing": result.timing,
                }),
            )
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(&config)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(serve(cfg))?;
            Ok(())
        }
        Command::Init { out, scale, seed } => {
            let nets = Networks::new(&scale.config(), seed, candle_dtype(), &candle_device())?;
            Checkpoint::from_networks(&nets)?.save(&out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Synth { out, n, size, seed } => {
            let names = synthetic::write_corpus(&out, n, size, seed)?;
            println!("wrote {} portraits to {}", names.len(), out.display());
            Ok(())
        }
        Command::Index { data, split, seed } => {
            let (index, report) = DatasetIndex::build(&data, split, seed)?;
            let path = index.save()?;
            println!(
                "{}: {} entries ({} train, {} test); {} without mask, {} unreadable",
                path.display(),
                index.len(),
                index.train_ids().len(),
                index.test_ids().len(),
                report.missing_masks.len(),
                report.unreadable.len()
            );
            Ok(())
        }
    }
}

fn candle_dtype() -> ehgan_core::candle::DType {
    ehgan_core::candle::DType::F32
}

fn candle_device() -> ehgan_core::candle::Device {
    ehgan_core::candle::Device::Cpu
}
