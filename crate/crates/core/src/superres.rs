//! 4x super-resolution applied to the composited 128x128 output, inference only.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, resample, resize_image, save_image, Filter, PortraitImage, ResizePolicy};
use crate::networks::IMAGE_RESOLUTION;
use crate::training::in_training_step;

pub const SR_SCALE: usize = 4;
pub const SR_OUTPUT_RESOLUTION: usize = IMAGE_RESOLUTION * SR_SCALE;
/// Overrides `superres.weights_path` when set.
pub const SR_WEIGHTS_ENV: &str = "EHGAN_SR_WEIGHTS";
/// Overrides `superres.command` when set.
pub const SR_COMMAND_ENV: &str = "EHGAN_SR_COMMAND";

const DOWNLOAD_HINT: &str = "download the GFPGAN v1.4 weights (GFPGANv1.4.pth) from the GFPGAN project releases \
     and point superres.weights_path or EHGAN_SR_WEIGHTS at the file";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrKind {
    #[default]
    Bicubic,
    #[serde(alias = "pretrained")]
    PretrainedFaceRestorer,
}

impl std::str::FromStr for SrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(SrKind::Bicubic),
            "pretrained" | "pretrained_face_restorer" => Ok(SrKind::PretrainedFaceRestorer),
            other => Err(Error::Config(format!(
                "unknown super-resolution backend {other:?} (expected bicubic or pretrained)"
            ))),
        }
    }
}

/// `superres` section of the service and CLI configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub kind: SrKind,
    pub weights_path: Option<PathBuf>,
    /// Restorer executable, invoked as
    /// `<command> --weights <w> --input <in.png> --output <out.png> --upscale 4`.
    pub command: Option<String>,
}

/// A 128 -> 512 upscaler. Implementations are immutable and shareable.
pub trait SuperResolver: Send + Sync {
    fn name(&self) -> &str;

    /// Backend-specific work; callers go through [`upscale`].
    fn upscale_unchecked(&self, image: &PortraitImage) -> Result<PortraitImage>;
}

/// Keys cubic (`a = -0.5`) interpolation, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bicubic;

impl SuperResolver for Bicubic {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn upscale_unchecked(&self, image: &PortraitImage) -> Result<PortraitImage> {
        let (h, w) = image.resolution();
        let target = (h * SR_SCALE, w * SR_SCALE);
        let data = resample(image.pixels(), (h, w), 3, target, Filter::Cubic);
        Ok(PortraitImage::from_raw_clamped(target.0, target.1, data))
    }
}

/// Pretrained face restorer run as an external process over PNG files.
#[derive(Debug, Clone)]
pub struct ExternalRestorer {
    weights: PathBuf,
    command: String,
}

impl ExternalRestorer {
    pub fn new(weights: PathBuf, command: String) -> Result<Self> {
        if !weights.is_file() {
            return Err(Error::Config(format!(
                "super-resolution weights not found at {}: {DOWNLOAD_HINT}",
                weights.display()
            )));
        }
        Ok(Self { weights, command })
    }

    pub fn weights(&self) -> &Path {
        &self.weights
    }
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl SuperResolver for ExternalRestorer {
    fn name(&self) -> &str {
        "pretrained_face_restorer"
    }

    fn upscale_unchecked(&self, image: &PortraitImage) -> Result<PortraitImage> {
        let id = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("ehgan-sr-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let input = dir.join("in.png");
        let output = dir.join("out.png");
        let result = (|| {
            save_image(image, &input)?;
            let status = Command::new(&self.command)
                .arg("--weights")
                .arg(&self.weights)
                .arg("--input")
                .arg(&input)
                .arg("--output")
                .arg(&output)
                .arg("--upscale")
                .arg(SR_SCALE.to_string())
                .status()
                .map_err(|e| Error::Config(format!("cannot run restorer {:?}: {e}", self.command)))?;
            if !status.success() {
                return Err(Error::io(&output, format!("restorer exited with {status}")));
            }
            let restored = load_image(&output)?;
            let (h, w) = image.resolution();
            // Restorers may emit a different size; the contract is exactly 4x.
            resize_image(&restored, (h * SR_SCALE, w * SR_SCALE), ResizePolicy::AREA)
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

/// Build the configured backend. Environment variables take precedence.
pub fn build_backend(config: &SrConfig) -> Result<Box<dyn SuperResolver>> {
    match config.kind {
        SrKind::Bicubic => Ok(Box::new(Bicubic)),
        SrKind::PretrainedFaceRestorer => {
            let weights = std::env::var_os(SR_WEIGHTS_ENV)
                .map(PathBuf::from)
                .or_else(|| config.weights_path.clone())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "pretrained super-resolution needs superres.weights_path or {SR_WEIGHTS_ENV}: {DOWNLOAD_HINT}"
                    ))
                })?;
            let command = std::env::var(SR_COMMAND_ENV)
                .ok()
                .or_else(|| config.command.clone())
                .unwrap_or_else(|| "gfpgan-restore".to_string());
            Ok(Box::new(ExternalRestorer::new(weights, command)?))
        }
    }
}

/// 128x128 in, 512x512 out in `[0, 1]`. Refuses to run inside a training step.
pub fn upscale(image: &PortraitImage, backend: &dyn SuperResolver) -> Result<PortraitImage> {
    if in_training_step() {
        return Err(Error::TrainingGuard);
    }
    if image.resolution() != (IMAGE_RESOLUTION, IMAGE_RESOLUTION) {
        return Err(Error::Dimension(format!(
            "super-resolution expects {IMAGE_RESOLUTION}x{IMAGE_RESOLUTION}, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let out = backend.upscale_unchecked(image)?;
    if out.resolution() != (SR_OUTPUT_RESOLUTION, SR_OUTPUT_RESOLUTION) {
        return Err(Error::Dimension(format!(
            "{} produced {}x{}, expected {SR_OUTPUT_RESOLUTION}x{SR_OUTPUT_RESOLUTION}",
            backend.name(),
            out.height(),
            out.width()
        )));
    }
    Ok(out)
}
