//! Adaptive instance normalization and the AdaIN residual block.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, spatial_mean, upsample2x, Conv2d, Linear, VarBuilder};

/// Denominator guard: `(x - mu) / (sigma + EPS)`.
pub const ADAIN_EPS: f64 = 1e-5;

/// Normalize each channel of `x` to zero mean / unit std over space, then
/// apply per-sample, per-channel `gamma` and `beta` of shape `(N, C)`.
pub fn adain_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("AdaIN on an empty spatial extent".into()));
    }
    if gamma.dims() != [n, c] || beta.dims() != [n, c] {
        return Err(Error::Dimension(format!(
            "AdaIN affine must be ({n}, {c}), got {:?} and {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let mean = spatial_mean(x)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = spatial_mean(&centered.sqr()?)?;
    // sqrt(var + eps^2) keeps the derivative finite on constant channels.
    let sigma = (var + ADAIN_EPS * ADAIN_EPS)?.sqrt()?;
    let normed = centered.broadcast_div(&(sigma + ADAIN_EPS)?)?;
    Ok(normed
        .broadcast_mul(&gamma.reshape((n, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((n, c, 1, 1))?)?)
}

/// Style-conditioned instance normalization. The affine layer predicts
/// `(gamma - 1, beta)` so a zero-initialized head is the identity transform.
#[derive(Debug, Clone)]
pub struct AdaIn {
    affine: Linear,
    channels: usize,
}

impl AdaIn {
    pub fn new(vb: &mut VarBuilder, name: &str, style_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            affine: Linear::new(vb, name, style_dim, 2 * channels)?,
            channels,
        })
    }

    pub fn affine_params(&self, style: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.affine.forward(style)?;
        let gamma = (h.narrow(D::Minus1, 0, self.channels)? + 1.0)?;
        let beta = h.narrow(D::Minus1, self.channels, self.channels)?;
        Ok((gamma, beta))
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.affine_params(style)?;
        adain_apply(x, &gamma, &beta)
    }

    pub fn affine(&self) -> &Linear {
        &self.affine
    }
}

/// Residual block with AdaIN normalizations and an optional 2x nearest upsample.
#[derive(Debug, Clone)]
pub struct AdaInResBlock {
    norm1: AdaIn,
    conv1: Conv2d,
    norm2: AdaIn,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    upsample: bool,
}

impl AdaInResBlock {
    pub fn new(
        vb: &mut VarBuilder,
        name: &str,
        style_dim: usize,
        in_channels: usize,
        out_channels: usize,
        upsample: bool,
    ) -> Result<Self> {
        vb.scoped(name, |vb| {
            Ok(Self {
                norm1: AdaIn::new(vb, "norm1", style_dim, in_channels)?,
                conv1: Conv2d::new(vb, "conv1", in_channels, out_channels, 3, 1, 1, true)?,
                norm2: AdaIn::new(vb, "norm2", style_dim, out_channels)?,
                conv2: Conv2d::new(vb, "conv2", out_channels, out_channels, 3, 1, 1, true)?,
                shortcut: if in_channels != out_channels {
                    Some(Conv2d::new(vb, "shortcut", in_channels, out_channels, 1, 1, 0, false)?)
                } else {
                    None
                },
                upsample,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn upsamples(&self) -> bool {
        self.upsample
    }

    /// Block output before any mask gating.
    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let mut r = leaky_relu(&self.norm1.forward(x, style)?)?;
        if self.upsample {
            r = upsample2x(&r)?;
        }
        let r = self.conv1.forward(&r)?;
        let r = leaky_relu(&self.norm2.forward(&r, style)?)?;
        let r = self.conv2.forward(&r)?;

        let mut s = x.clone();
        if self.upsample {
            s = upsample2x(&s)?;
        }
        if let Some(conv) = &self.shortcut {
            s = conv.forward(&s)?;
        }
        Ok(((r + s)? / std::f64::consts::SQRT_2)?)
    }

    /// `mask * block(x)`; `mask` is `(N, 1, H, W)` at the block's output resolution.
    pub fn forward_masked(&self, x: &Tensor, mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        let out = self.forward(x, style)?;
        let (_, _, h, w) = out.dims4()?;
        let (_, mc, mh, mw) = mask.dims4()?;
        if (mh, mw) != (h, w) || mc != 1 {
            return Err(Error::Dimension(format!(
                "gate mask is {mc}x{mh}x{mw}, block output is {h}x{w}"
            )));
        }
        Ok(out.broadcast_mul(mask)?)
    }
}
