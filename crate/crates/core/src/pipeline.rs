//! End-to-end transfer: `I_out = SR(G(z, M_t, I_bg, E(H_ref)))`.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::imaging::{extract_background, extract_hair_region, resize_image, resize_mask, HairMask, PortraitImage, ResizePolicy};
use crate::networks::{Networks, IMAGE_RESOLUTION};
use crate::nn::{image_to_tensor, mask_to_tensor, tensor_to_images};
use crate::superres::{upscale, SuperResolver};

/// Fraction of the input's hair left outside the target mask above which a warning is attached.
pub const COVERAGE_TOLERANCE: f32 = 0.01;

#[derive(Debug, Clone)]
pub struct TransferRequest {
    pub input_image: PortraitImage,
    pub reference_image: PortraitImage,
    pub reference_mask: HairMask,
    pub target_mask: HairMask,
    /// Hair mask of the input portrait, used only for the coverage check.
    /// When absent and the reference is the input itself, the reference mask stands in.
    pub input_mask: Option<HairMask>,
    /// Pins the noise `z`; fresh entropy otherwise.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferTiming {
    /// Validation, resizing, region extraction and tensor setup. Not part of inference.
    pub preprocess_ms: f64,
    /// Style encoding, generation, blending and composite.
    pub generator_ms: f64,
    pub superres_ms: f64,
    /// `generator_ms + superres_ms`: inference plus post-processing.
    pub inference_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub output_image: PortraitImage,
    pub low_res_image: PortraitImage,
    pub timing: TransferTiming,
    pub coverage_warning: Option<String>,
    pub seed: u64,
}

/// Request contents at model resolution, ready for the timed section.
#[derive(Debug, Clone)]
pub struct PreparedTransfer {
    pub input: PortraitImage,
    pub background: PortraitImage,
    pub target_mask: HairMask,
    pub coverage_warning: Option<String>,
    pub seed: u64,
    hair_t: Tensor,
    background_t: Tensor,
    mask_t: Tensor,
    noise_t: Tensor,
}

/// Loaded generator stack. Immutable; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    nets: Networks,
    source: String,
}

impl Model {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path, &Device::Cpu)?;
        Ok(Self {
            nets: ck.networks(DType::F32, &Device::Cpu)?,
            source: path.display().to_string(),
        })
    }

    pub fn from_networks(nets: Networks, source: impl Into<String>) -> Self {
        Self {
            nets,
            source: source.into(),
        }
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn device_name(&self) -> String {
        match self.nets.device() {
            Device::Cpu => "cpu".into(),
            other => format!("{other:?}"),
        }
    }

    /// Validate and bring a request to model resolution.
    pub fn prepare(&self, req: &TransferRequest) -> Result<PreparedTransfer> {
        validate(req)?;
        let r = (IMAGE_RESOLUTION, IMAGE_RESOLUTION);
        let input = resize_image(&req.input_image, r, ResizePolicy::AREA)?;
        let reference = resize_image(&req.reference_image, r, ResizePolicy::AREA)?;
        let ref_mask = resize_mask(&req.reference_mask, r)?;
        let target_mask = resize_mask(&req.target_mask, r)?;
        let hair = extract_hair_region(&reference, &ref_mask)?;
        let background = extract_background(&input, &target_mask)?;

        let input_hair = match &req.input_mask {
            Some(m) => Some(resize_mask(m, r)?),
            None if req.reference_image == req.input_image => Some(ref_mask.clone()),
            None => None,
        };
        let coverage_warning = input_hair.and_then(|h| coverage_warning(&h, &target_mask));

        let seed = req.seed.unwrap_or_else(rand::random);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dtype, device) = (self.nets.dtype(), self.nets.device());
        Ok(PreparedTransfer {
            hair_t: image_to_tensor(&hair, dtype, device)?,
            background_t: image_to_tensor(&background, dtype, device)?,
            mask_t: mask_to_tensor(&target_mask, dtype, device)?,
            noise_t: self.nets.sample_noise(&mut rng, 1)?,
            input,
            background,
            target_mask,
            coverage_warning,
            seed,
        })
    }

    /// Low-resolution output for a prepared request: the timed model section.
    pub fn synthesize(&self, p: &PreparedTransfer) -> Result<PortraitImage> {
        let style = self.nets.encode_style(&p.hair_t)?;
        let out = self
            .nets
            .generator
            .forward(&p.noise_t, &p.mask_t, &p.background_t, &style)?;
        Ok(tensor_to_images(&out.image.detach())?.remove(0))
    }

    /// Pseudo-supervised reconstructions of a batch with seeded noise.
    pub fn reconstruct(&self, batch: &Batch, seed: u64) -> Result<Vec<PortraitImage>> {
        let t = batch.to_tensors(self.nets.dtype(), self.nets.device())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.nets.sample_noise(&mut rng, batch.len())?;
        let style = self.nets.encode_style(&t.hair)?;
        let out = self
            .nets
            .generator
            .forward(&noise, &t.target_mask, &t.background, &style)?;
        tensor_to_images(&out.image.detach())
    }
}

fn validate(req: &TransferRequest) -> Result<()> {
    for (img, name) in [(&req.input_image, "input"), (&req.reference_image, "reference")] {
        if !img.is_square() {
            return Err(Error::Dimension(format!(
                "{name} image must be square, got {}x{}",
                img.height(),
                img.width()
            )));
        }
    }
    let masks = [
        (&req.reference_mask, "ref_mask", req.reference_image.resolution()),
        (&req.target_mask, "target_mask", req.input_image.resolution()),
    ];
    for (mask, name, expected) in masks.into_iter().chain(
        req.input_mask
            .as_ref()
            .map(|m| (m, "input_mask", req.input_image.resolution())),
    ) {
        if mask.resolution() != expected {
            return Err(Error::Dimension(format!(
                "{name} is {:?}, its image is {expected:?}",
                mask.resolution()
            )));
        }
        if !mask.is_binary() {
            return Err(Error::Argument(format!("{name} must be binary (0 or 255)")));
        }
    }
    Ok(())
}

/// Warning text when the target mask leaves part of the input's hair uncovered.
pub fn coverage_warning(input_hair: &HairMask, target: &HairMask) -> Option<String> {
    let hair = input_hair.values().iter().filter(|v| **v >= 0.5).count();
    if hair == 0 {
        return None;
    }
    let uncovered = input_hair
        .values()
        .iter()
        .zip(target.values())
        .filter(|(h, t)| **h >= 0.5 && **t < 0.5)
        .count();
    let fraction = uncovered as f32 / hair as f32;
    (fraction > COVERAGE_TOLERANCE).then(|| {
        format!(
            "target mask leaves {:.1}% of the original hair uncovered; uncovered hair is kept as is (no inpainting)",
            100.0 * fraction
        )
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline(req: &TransferRequest, model: &Model, sr: &dyn SuperResolver) -> Result<TransferResult> {
    let start = Instant::now();
    let prepared = model.prepare(req)?;
    let preprocess_ms = ms_since(start);

    let t = Instant::now();
    let low_res_image = model.synthesize(&prepared)?;
    let generator_ms = ms_since(t);

    let t = Instant::now();
    let output_image = upscale(&low_res_image, sr)?;
    let superres_ms = ms_since(t);

    Ok(TransferResult {
        output_image,
        low_res_image,
        coverage_warning: prepared.coverage_warning,
        seed: prepared.seed,
        timing: TransferTiming {
            preprocess_ms,
            generator_ms,
            superres_ms,
            inference_ms: generator_ms + superres_ms,
            total_ms: ms_since(start),
        },
    })
}
