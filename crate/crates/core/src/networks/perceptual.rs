//! Frozen VGG19-layout feature extractor for the perceptual hair loss.
//!
//! Pretrained weights are read from a safetensors file using torchvision's
//! `features.{i}.weight` / `features.{i}.bias` naming. For hermetic runs a
//! seeded random-weight extractor with the same topology (optionally
//! narrowed by `width_divisor`) stands in.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, Conv2d, VarBuilder};

/// Convolutions per stage and stage widths of VGG19's first four stages.
const STAGE_CONVS: [usize; 4] = [2, 2, 4, 4];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Pretrained VGG19 weights. `None` selects the seeded random extractor.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Number of tapped stages (1..=4); each tap is the activation ending a stage.
    #[serde(default = "default_taps")]
    pub taps: usize,
    /// Channel divisor for the random extractor; must be 1 with pretrained weights.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_taps() -> usize {
    4
}

fn default_divisor() -> usize {
    1
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            weights_path: None,
            taps: 4,
            width_divisor: 1,
            seed: 0,
        }
    }
}

/// Ordered feature maps, one per tapped stage.
pub type FeaturePyramid = Vec<Tensor>;

#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    stages: Vec<Vec<Conv2d>>,
    mean: Tensor,
    std: Tensor,
}

impl PerceptualExtractor {
    pub fn new(config: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        if !(1..=4).contains(&config.taps) {
            return Err(Error::Config(format!(
                "perceptual taps must be in 1..=4, got {}",
                config.taps
            )));
        }
        match &config.weights_path {
            Some(path) => Self::load(path, config.taps, dtype, device),
            None => Self::random(config, dtype, device),
        }
    }

    fn normalization(dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok((mean, std))
    }

    fn random(config: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        let div = config.width_divisor.max(1);
        let mut vb = VarBuilder::new(config.seed ^ 0x5647_4731_3900, dtype, device);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (s, (&n, &width)) in STAGE_CONVS.iter().zip(&STAGE_WIDTHS).take(config.taps).enumerate() {
            let cout = (width / div).max(1);
            let mut convs = Vec::with_capacity(n);
            for i in 0..n {
                convs.push(Conv2d::new(&mut vb, &format!("stage{s}.{i}"), cin, cout, 3, 1, 1, true)?);
                cin = cout;
            }
            stages.push(convs);
        }
        let (mean, std) = Self::normalization(dtype, device)?;
        Ok(Self { stages, mean, std })
    }

    fn load(path: &PathBuf, taps: usize, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "perceptual extractor weights not found at {}",
                path.display()
            )));
        }
        let tensors: HashMap<String, Tensor> =
            candle_core::safetensors::load(path, device).map_err(|e| Error::io(path, e))?;
        let mut index = 0usize;
        let mut stages = Vec::new();
        for &n in STAGE_CONVS.iter().take(taps) {
            let mut convs = Vec::with_capacity(n);
            for _ in 0..n {
                let fetch = |suffix: &str| -> Result<Tensor> {
                    let key = format!("features.{index}.{suffix}");
                    let t = tensors.get(&key).ok_or_else(|| {
                        Error::Config(format!("{} is missing tensor {key}", path.display()))
                    })?;
                    Ok(t.to_dtype(dtype)?)
                };
                convs.push(Conv2d::from_tensors(fetch("weight")?, Some(fetch("bias")?), 1, 1)?);
                // conv + relu occupy two slots in torchvision's `features`.
                index += 2;
            }
            // max-pool slot
            index += 1;
            stages.push(convs);
        }
        let (mean, std) = Self::normalization(dtype, device)?;
        Ok(Self { stages, mean, std })
    }

    pub fn taps(&self) -> usize {
        self.stages.len()
    }

    /// Features for `(N, 3, H, W)` images in `[0, 1]`. Gradients flow to the
    /// input only; the extractor weights are treated as constants.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut x = images
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                x = max_pool2x2(&x)?;
            }
            for conv in convs {
                x = conv.forward_frozen(&x)?.relu()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Snapshot of every weight, for frozen-ness checks.
    pub fn weights_snapshot(&self) -> Result<Vec<Vec<f32>>> {
        self.stages
            .iter()
            .flatten()
            .map(|c| Ok(c.weight_values()?))
            .collect()
    }
}
