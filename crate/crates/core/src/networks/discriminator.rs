use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::nn::{leaky_relu, Conv2d, VarBuilder};

/// One PatchGAN branch: three stride-2 and one stride-1 4x4 convolutions,
/// then a 4x4 head producing one logit per patch.
#[derive(Debug, Clone)]
struct PatchBranch {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchBranch {
    fn new(vb: &mut VarBuilder, name: &str, base: usize) -> Result<Self> {
        vb.scoped(name, |vb| {
            let widths = [3, base, base * 2, base * 4, base * 8];
            let strides = [2, 2, 2, 1];
            let convs = (0..4)
                .map(|i| {
                    Conv2d::new(
                        vb,
                        &format!("convs.{i}"),
                        widths[i],
                        widths[i + 1],
                        4,
                        strides[i],
                        1,
                        true,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let head = Conv2d::new(vb, "head", base * 8, 1, 4, 1, 1, true)?;
            Ok(Self { convs, head })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        self.head.forward(&h)
    }
}

/// Two-scale patch discriminator: full resolution and a 2x average-pooled copy.
#[derive(Debug, Clone)]
pub struct Discriminator {
    branches: Vec<PatchBranch>,
    resolution: usize,
}

impl Discriminator {
    pub const SCALES: usize = 2;

    pub fn new(vb: &mut VarBuilder, config: &NetworkConfig) -> Result<Self> {
        let branches = (0..Self::SCALES)
            .map(|i| PatchBranch::new(vb, &format!("scales.{i}"), config.discriminator_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            resolution: config.image_resolution,
        })
    }

    /// Patch logit maps `(N, 1, h_k, w_k)`, full resolution first.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Dimension(format!(
                "discriminator expects 3x{r}x{r}, got {c}x{h}x{w}",
                r = self.resolution
            )));
        }
        let mut scores = Vec::with_capacity(self.branches.len());
        let mut x = image.clone();
        for (i, branch) in self.branches.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            scores.push(branch.forward(&x)?);
        }
        Ok(scores)
    }
}
