//! Mask-gated decoder and the hair blending block.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::networks::adain::AdaInResBlock;
use crate::networks::NetworkConfig;
use crate::nn::{ensure_finite, leaky_relu, Conv2d, Linear, VarBuilder};

/// Outputs of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Final gated block activation; zero wherever the target mask is zero.
    pub hair_features: Tensor,
    /// Blended image before the hard composite, in `[0, 1]`.
    pub blended: Tensor,
    /// The synthesized image (`blended`, hard-composited when enabled).
    pub image: Tensor,
}

/// Area-downsample a `(N, 1, R, R)` mask by an integer factor.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(mask.clone());
    }
    Ok(mask.avg_pool2d(factor)?)
}

/// Grayscale dilation of a `(N, 1, H, W)` mask with a `(2r+1)^2` square.
pub fn dilate_mask(mask: &Tensor, radius: usize) -> Result<Tensor> {
    if radius == 0 {
        return Ok(mask.clone());
    }
    // Masks are nonnegative, so zero padding is neutral for max.
    Ok(mask
        .detach()
        .pad_with_zeros(2, radius, radius)?
        .pad_with_zeros(3, radius, radius)?
        .max_pool2d_with_stride(2 * radius + 1, 1)?)
}

/// `hair * mask + background * (1 - mask)`.
pub fn composite_tensors(hair: &Tensor, background: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let inv = (mask.ones_like()? - mask)?;
    Ok((hair.broadcast_mul(mask)? + background.broadcast_mul(&inv)?)?)
}

/// Fuses synthesized hair features with the embedded background and target mask.
#[derive(Debug, Clone)]
pub struct HairBlendingBlock {
    background_embed: Conv2d,
    mask_embed: Conv2d,
    fuse: AdaInResBlock,
    to_rgb: Conv2d,
}

impl HairBlendingBlock {
    pub fn new(vb: &mut VarBuilder, style_dim: usize, channels: usize) -> Result<Self> {
        vb.scoped("hbb", |vb| {
            Ok(Self {
                background_embed: Conv2d::new(vb, "background_embed", 3, channels, 3, 1, 1, true)?,
                mask_embed: Conv2d::new(vb, "mask_embed", 1, channels, 3, 1, 1, true)?,
                fuse: AdaInResBlock::new(vb, "fuse", style_dim, 3 * channels, channels, false)?,
                to_rgb: Conv2d::new(vb, "to_rgb", channels, 3, 3, 1, 1, true)?,
            })
        })
    }

    /// Blended image in `[0, 1]`, before any hard composite.
    pub fn forward(
        &self,
        hair_features: &Tensor,
        background: &Tensor,
        mask: &Tensor,
        style: &Tensor,
    ) -> Result<Tensor> {
        let (n, _, h, w) = hair_features.dims4()?;
        for (t, c, name) in [(background, 3, "background"), (mask, 1, "mask")] {
            if t.dims4()? != (n, c, h, w) {
                return Err(Error::Dimension(format!(
                    "hair blending: {name} is {:?}, expected ({n}, {c}, {h}, {w})",
                    t.dims()
                )));
            }
        }
        let bg = leaky_relu(&self.background_embed.forward(background)?)?;
        let m = leaky_relu(&self.mask_embed.forward(mask)?)?;
        let x = Tensor::cat(&[hair_features, &bg, &m], 1)?;
        let x = self.fuse.forward(&x, style)?;
        let rgb = self.to_rgb.forward(&leaky_relu(&x)?)?;
        Ok(((rgb.tanh()? + 1.0)? * 0.5)?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    project: Linear,
    blocks: Vec<AdaInResBlock>,
    hbb: HairBlendingBlock,
    start_channels: usize,
    start_resolution: usize,
    resolution: usize,
    noise_dim: usize,
    style_dim: usize,
    hard_composite: bool,
    dilation: usize,
}

impl Generator {
    pub fn new(vb: &mut VarBuilder, config: &NetworkConfig) -> Result<Self> {
        let start_channels = config.base_channels;
        let s = config.start_resolution;
        let project = Linear::new(vb, "project", config.style_dim, start_channels * s * s)?;
        let mut blocks = Vec::with_capacity(config.generator_blocks + 1);
        let mut channels = start_channels;
        // One block at the start resolution, then one per 2x upsampling step.
        blocks.push(AdaInResBlock::new(
            vb,
            "blocks.0",
            config.style_dim,
            channels,
            channels,
            false,
        )?);
        for i in 0..config.generator_blocks {
            let out = (channels / 2).max(1);
            blocks.push(AdaInResBlock::new(
                vb,
                &format!("blocks.{}", i + 1),
                config.style_dim,
                channels,
                out,
                true,
            )?);
            channels = out;
        }
        let hbb = HairBlendingBlock::new(vb, config.style_dim, channels)?;
        Ok(Self {
            project,
            blocks,
            hbb,
            start_channels,
            start_resolution: s,
            resolution: config.image_resolution,
            noise_dim: config.style_dim,
            style_dim: config.style_dim,
            hard_composite: config.hard_composite,
            dilation: config.composite_dilation,
        })
    }

    /// Spatial resolution of each gated block's output.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut res = self.start_resolution;
        self.blocks
            .iter()
            .map(|b| {
                if b.upsamples() {
                    res *= 2;
                }
                res
            })
            .collect()
    }

    pub fn blocks(&self) -> &[AdaInResBlock] {
        &self.blocks
    }

    pub fn hair_blending(&self) -> &HairBlendingBlock {
        &self.hbb
    }

    pub fn hard_composite(&self) -> bool {
        self.hard_composite
    }

    pub fn set_hard_composite(&mut self, on: bool) {
        self.hard_composite = on;
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    fn check_inputs(&self, noise: &Tensor, mask: &Tensor, style: &Tensor) -> Result<usize> {
        let (n, zd) = noise.dims2()?;
        if zd != self.noise_dim {
            return Err(Error::Dimension(format!(
                "noise must be (N, {}), got {:?}",
                self.noise_dim,
                noise.dims()
            )));
        }
        if style.dims() != [n, self.style_dim] {
            return Err(Error::Dimension(format!(
                "style must be ({n}, {}), got {:?}",
                self.style_dim,
                style.dims()
            )));
        }
        let r = self.resolution;
        if mask.dims4()? != (n, 1, r, r) {
            return Err(Error::Dimension(format!(
                "target mask must be ({n}, 1, {r}, {r}), got {:?}",
                mask.dims()
            )));
        }
        Ok(n)
    }

    /// Every gated block activation, lowest resolution first. The last one is the hair feature map.
    pub fn gated_activations(&self, noise: &Tensor, mask: &Tensor, style: &Tensor) -> Result<Vec<Tensor>> {
        let n = self.check_inputs(noise, mask, style)?;
        let s = self.start_resolution;
        let mut x = self
            .project
            .forward(noise)?
            .reshape((n, self.start_channels, s, s))?;
        ensure_finite(&x, "generator.project")?;
        let mut acts = Vec::with_capacity(self.blocks.len());
        for (i, (block, res)) in self.blocks.iter().zip(self.block_resolutions()).enumerate() {
            let gate = downsample_mask(mask, self.resolution / res)?;
            x = block.forward_masked(&x, &gate, style)?;
            ensure_finite(&x, &format!("generator.blocks.{i}"))?;
            acts.push(x.clone());
        }
        Ok(acts)
    }

    pub fn hair_features(&self, noise: &Tensor, mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        let mut acts = self.gated_activations(noise, mask, style)?;
        Ok(acts.pop().expect("generator has at least one block"))
    }

    /// Blend hair features into the background; hard-composite if enabled.
    pub fn blend(
        &self,
        hair_features: &Tensor,
        background: &Tensor,
        mask: &Tensor,
        style: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let blended = self.hbb.forward(hair_features, background, mask, style)?;
        ensure_finite(&blended, "generator.hbb")?;
        let image = if self.hard_composite {
            composite_tensors(&blended, background, &dilate_mask(mask, self.dilation)?)?
        } else {
            blended.clone()
        };
        Ok((blended, image))
    }

    /// Full generator pass: `noise (N, D)`, `mask (N, 1, R, R)`, `background (N, 3, R, R)`, `style (N, D)`.
    pub fn forward(
        &self,
        noise: &Tensor,
        mask: &Tensor,
        background: &Tensor,
        style: &Tensor,
    ) -> Result<GeneratorOutput> {
        let hair_features = self.hair_features(noise, mask, style)?;
        let (blended, image) = self.blend(&hair_features, background, mask, style)?;
        Ok(GeneratorOutput {
            hair_features,
            blended,
            image,
        })
    }
}
