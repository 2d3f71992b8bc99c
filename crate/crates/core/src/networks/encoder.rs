use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::nn::{leaky_relu, Conv2d, Linear, VarBuilder};

/// Pre-activation residual block with optional 2x average-pool downsampling.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    downsample: bool,
}

impl ResBlock {
    fn new(vb: &mut VarBuilder, name: &str, cin: usize, cout: usize, downsample: bool) -> Result<Self> {
        vb.scoped(name, |vb| {
            Ok(Self {
                conv1: Conv2d::new(vb, "conv1", cin, cin, 3, 1, 1, true)?,
                conv2: Conv2d::new(vb, "conv2", cin, cout, 3, 1, 1, true)?,
                shortcut: if cin != cout {
                    Some(Conv2d::new(vb, "shortcut", cin, cout, 1, 1, 0, false)?)
                } else {
                    None
                },
                downsample,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut r = self.conv1.forward(&leaky_relu(x)?)?;
        if self.downsample {
            r = r.avg_pool2d(2)?;
        }
        let r = self.conv2.forward(&leaky_relu(&r)?)?;

        let mut s = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        if self.downsample {
            s = s.avg_pool2d(2)?;
        }
        Ok(((r + s)? / std::f64::consts::SQRT_2)?)
    }
}

/// Hair style encoder: masked hair image -> style vector.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
    resolution: usize,
}

impl StyleEncoder {
    pub fn new(vb: &mut VarBuilder, config: &NetworkConfig) -> Result<Self> {
        let mut channels = config.encoder_channels;
        let stem = Conv2d::new(vb, "stem", 3, channels, 3, 1, 1, true)?;
        let mut blocks = Vec::with_capacity(config.encoder_blocks);
        let mut res = config.image_resolution;
        for i in 0..config.encoder_blocks {
            let downsample = res > 4;
            let out = (channels * 2).min(config.max_channels);
            blocks.push(ResBlock::new(vb, &format!("blocks.{i}"), channels, out, downsample)?);
            channels = out;
            if downsample {
                res /= 2;
            }
        }
        let head = Linear::new(vb, "head", channels, config.style_dim)?;
        Ok(Self {
            stem,
            blocks,
            head,
            resolution: config.image_resolution,
        })
    }

    /// `(N, 3, R, R)` -> `(N, style_dim)`.
    pub fn forward(&self, hair: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = hair.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Dimension(format!(
                "style encoder expects 3x{r}x{r}, got {c}x{h}x{w}",
                r = self.resolution
            )));
        }
        let mut x = self.stem.forward(hair)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = leaky_relu(&x)?.flatten_from(2)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }
}
