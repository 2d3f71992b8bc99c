//! The trainable networks (style encoder, generator, discriminator) and the
//! frozen perceptual extractor.

pub mod adain;
pub mod discriminator;
pub mod encoder;
pub mod generator;
pub mod perceptual;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VarBuilder;

pub use adain::{adain_apply, AdaIn, AdaInResBlock, ADAIN_EPS};
pub use discriminator::Discriminator;
pub use encoder::StyleEncoder;
pub use generator::{composite_tensors, dilate_mask, downsample_mask, Generator, GeneratorOutput, HairBlendingBlock};
pub use perceptual::{FeaturePyramid, PerceptualConfig, PerceptualExtractor};

pub const STYLE_DIM: usize = 512;
pub const IMAGE_RESOLUTION: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Residual blocks in the style encoder.
    pub encoder_blocks: usize,
    /// Upsampling AdaIN blocks in the generator (one extra block runs at the start resolution).
    pub generator_blocks: usize,
    /// Generator channels at the start resolution; halved per upsampling block.
    pub base_channels: usize,
    pub encoder_channels: usize,
    pub discriminator_channels: usize,
    /// Channel cap for the encoder.
    pub max_channels: usize,
    pub start_resolution: usize,
    pub image_resolution: usize,
    pub style_dim: usize,
    /// Paste generated pixels only inside the dilated target mask.
    pub hard_composite: bool,
    pub composite_dilation: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 6,
            generator_blocks: 4,
            base_channels: 512,
            encoder_channels: 64,
            discriminator_channels: 64,
            max_channels: 512,
            start_resolution: 8,
            image_resolution: IMAGE_RESOLUTION,
            style_dim: STYLE_DIM,
            hard_composite: true,
            composite_dilation: 2,
        }
    }
}

impl NetworkConfig {
    /// Narrow variant for CPU-bound training runs (same depth and resolutions).
    pub fn desk() -> Self {
        Self {
            base_channels: 128,
            encoder_channels: 16,
            discriminator_channels: 16,
            max_channels: 128,
            ..Self::default()
        }
    }

    /// Smallest variant, for fast tests.
    pub fn micro() -> Self {
        Self {
            base_channels: 32,
            encoder_channels: 8,
            discriminator_channels: 8,
            max_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_dim != STYLE_DIM {
            return Err(Error::Config(format!(
                "style_dim must be {STYLE_DIM}, got {}",
                self.style_dim
            )));
        }
        if self.start_resolution << self.generator_blocks != self.image_resolution {
            return Err(Error::Config(format!(
                "start_resolution {} x 2^{} != image_resolution {}",
                self.start_resolution, self.generator_blocks, self.image_resolution
            )));
        }
        if self.encoder_blocks == 0
            || self.base_channels >> self.generator_blocks == 0
            || self.encoder_channels == 0
            || self.discriminator_channels == 0
        {
            return Err(Error::Config(
                "block counts and channel widths must be positive at every level".into(),
            ));
        }
        if self.image_resolution / 8 < 4 {
            return Err(Error::Config(
                "image_resolution too small for the patch discriminator".into(),
            ));
        }
        Ok(())
    }
}

/// Named trainable parameters of one network.
pub type NamedParams = Vec<(String, Var)>;

/// Style encoder, generator and discriminator built from one config.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetworkConfig,
    pub encoder: StyleEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    encoder_params: NamedParams,
    generator_params: NamedParams,
    discriminator_params: NamedParams,
    dtype: DType,
    device: Device,
}

impl Networks {
    pub fn new(config: &NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut vb = VarBuilder::new(seed.wrapping_mul(3), dtype, device);
        let encoder = vb.scoped("encoder", |vb| StyleEncoder::new(vb, config))?;
        let encoder_params = vb.into_params();

        let mut vb = VarBuilder::new(seed.wrapping_mul(3).wrapping_add(1), dtype, device);
        let generator = vb.scoped("generator", |vb| Generator::new(vb, config))?;
        let generator_params = vb.into_params();

        let mut vb = VarBuilder::new(seed.wrapping_mul(3).wrapping_add(2), dtype, device);
        let discriminator = vb.scoped("discriminator", |vb| Discriminator::new(vb, config))?;
        let discriminator_params = vb.into_params();

        Ok(Self {
            config: config.clone(),
            encoder,
            generator,
            discriminator,
            encoder_params,
            generator_params,
            discriminator_params,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encoder_params(&self) -> &NamedParams {
        &self.encoder_params
    }

    pub fn generator_params(&self) -> &NamedParams {
        &self.generator_params
    }

    pub fn discriminator_params(&self) -> &NamedParams {
        &self.discriminator_params
    }

    /// Encoder and generator parameters: the set updated by the generator step.
    pub fn synthesis_params(&self) -> NamedParams {
        self.encoder_params
            .iter()
            .chain(&self.generator_params)
            .cloned()
            .collect()
    }

    pub fn all_params(&self) -> NamedParams {
        self.synthesis_params()
            .into_iter()
            .chain(self.discriminator_params.iter().cloned())
            .collect()
    }

    /// Overwrite parameters by name; every parameter must be present.
    pub fn load_params(&self, tensors: &std::collections::HashMap<String, Tensor>, include_discriminator: bool) -> Result<()> {
        let params = if include_discriminator {
            self.all_params()
        } else {
            self.synthesis_params()
        };
        for (name, var) in params {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// `s = E(hair)` for a `(N, 3, R, R)` masked hair batch.
    pub fn encode_style(&self, hair: &Tensor) -> Result<Tensor> {
        let s = self.encoder.forward(hair)?;
        crate::nn::ensure_finite(&s, "style")?;
        Ok(s)
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R, batch: usize) -> Result<Tensor> {
        sample_noise(rng, batch, self.config.style_dim, self.dtype, &self.device)
    }
}

/// i.i.d. standard normal `(batch, dim)` noise.
pub fn sample_noise<R: Rng>(
    rng: &mut R,
    batch: usize,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let values: Vec<f32> = (0..batch * dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, (batch, dim), device)?.to_dtype(dtype)?)
}

pub fn param_count(params: &NamedParams) -> usize {
    params.iter().map(|(_, v)| v.elem_count()).sum()
}
