//! Minimal layer toolkit on top of candle tensors.
//!
//! Convolutions run as an explicit im2col/col2im pair of custom ops followed
//! by a single GEMM, so both the forward and the backward pass are
//! matmul-bound on CPU. Parameters are drawn from a seeded ChaCha stream,
//! which makes network construction reproducible bit for bit.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{HairMask, PortraitImage};

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

/// `(N, C, H, W)` -> `(C*k*k, N*Ho*Wo)`.
struct Unfold {
    geom: Geometry,
}

/// Inverse scatter-add of [`Unfold`]: `(C*k*k, N*Ho*Wo)` -> `(N, C, H, W)`.
struct Fold {
    geom: Geometry,
    batch: usize,
}

fn unfold_slice<T: Copy + Default>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let cols = batch * ho * wo;
    let mut out = vec![T::default(); g.channels * k * k * cols];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let plane = &src[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        let dst = &mut dst_row[(n * ho + oh) * wo..][..wo];
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.width..][..g.width];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold_slice<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    batch: usize,
    g: Geometry,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let cols = batch * ho * wo;
    let mut out = vec![T::default(); batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &src[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let plane =
                        &mut out[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let s = &src_row[(n * ho + oh) * wo..][..wo];
                        let dst_row = &mut plane[ih as usize * g.width..][..g.width];
                        for (ow, v) in s.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col ops expect contiguous inputs"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = layout.shape().dims()[0];
        let g = self.geom;
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((g.channels * g.kernel * g.kernel, batch * ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(unfold_slice(contiguous_slice(d, layout)?, batch, g)),
            CpuStorage::F64(d) => CpuStorage::F64(unfold_slice(contiguous_slice(d, layout)?, batch, g)),
            _ => candle_core::bail!("unfold: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(storage)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let batch = arg.dim(0)?;
        let grad = grad_res.contiguous()?.apply_op1(Fold {
            geom: self.geom,
            batch,
        })?;
        Ok(Some(grad))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom;
        let shape = Shape::from((self.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(fold_slice(contiguous_slice(d, layout)?, self.batch, g)),
            CpuStorage::F64(d) => CpuStorage::F64(fold_slice(contiguous_slice(d, layout)?, self.batch, g)),
            _ => candle_core::bail!("fold: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(storage)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?.apply_op1(Unfold { geom: self.geom })?;
        Ok(Some(grad))
    }
}

/// Seeded parameter factory. Every parameter is registered under a dotted path.
pub struct VarBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    prefix: Vec<String>,
    params: Vec<(String, Var)>,
}

impl VarBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            prefix: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Run `f` with `name` pushed onto the parameter path.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn path(&self, name: &str) -> String {
        let mut p = self.prefix.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(name);
        p
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    fn register(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((self.path(name), var.clone()));
        Ok(var)
    }

    /// Parameters registered so far, in creation order.
    pub fn into_params(self) -> Vec<(String, Var)> {
        self.params
    }
}

/// He-uniform bound for leaky-ReLU networks.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / ((1.0 + LRELU_SLOPE * LRELU_SLOPE) * fan_in as f64)).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        vb: &mut VarBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        vb.scoped(name, |vb| {
            let fan_in = in_channels * kernel * kernel;
            let weight = vb.uniform(
                "weight",
                &[out_channels, in_channels, kernel, kernel],
                he_bound(fan_in),
            )?;
            let bias = if bias {
                Some(vb.constant("bias", &[out_channels], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                kernel,
                stride,
                padding,
                in_channels,
                out_channels,
            })
        })
    }

    /// Build from fixed (non-trainable) tensors, e.g. a frozen pretrained extractor.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let (out_channels, in_channels, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::Dimension(format!("non-square kernel {kh}x{kw}")));
        }
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: bias.map(|b| Var::from_tensor(&b)).transpose()?,
            kernel: kh,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn weight_values(&self) -> Result<Vec<f32>> {
        Ok(self
            .weight
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()))
    }

    /// Forward pass that treats the weights as constants (no gradient to them).
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().detach();
        let b = self.bias.as_ref().map(|b| b.as_tensor().detach());
        self.forward_with(x, &w, b.as_ref())
    }

    fn forward_with(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Dimension(format!(
                "{h}x{w} input too small for kernel {}",
                self.kernel
            )));
        }
        let geom = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let (ho, wo) = geom.out_hw();
        let k = c * self.kernel * self.kernel;
        let w2 = weight.reshape((self.out_channels, k))?;
        let y = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            // (N, C, HW) -> batched 1x1 projection.
            let xs = x.reshape((n, c, h * w))?;
            w2.broadcast_left(n)?.contiguous()?.matmul(&xs.contiguous()?)?.reshape((n, self.out_channels, ho, wo))?
        } else {
            let cols = x.contiguous()?.apply_op1(Unfold { geom })?;
            w2.matmul(&cols)?
                .reshape((self.out_channels, n, ho, wo))?
                .transpose(0, 1)?
                .contiguous()?
        };
        Ok(match bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(vb: &mut VarBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        vb.scoped(name, |vb| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            Ok(Self {
                weight: vb.uniform("weight", &[out_dim, in_dim], bound)?,
                bias: vb.constant("bias", &[out_dim], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2x2 max pooling, flooring odd sizes. The backward pass routes the whole
/// gradient to the maximum; candle's `max_pool2d` backward scales it by the
/// tie fraction instead (1/4 for a unique maximum).
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("{h}x{w} input too small for 2x2 pooling")));
    }
    Ok(x.narrow(2, 0, 2 * oh)?
        .narrow(3, 0, 2 * ow)?
        .contiguous()?
        .reshape((n, c, oh, 2, ow, 2))?
        .max(5)?
        .max(3)?)
}

/// Per-sample, per-channel spatial mean over `(N, C, H, W)`, shaped `(N, C, 1, 1)`.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    Ok(x.flatten_from(2)?.mean_keepdim(D::Minus1)?.reshape((n, c, 1, 1))?)
}

/// Error if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    // NaN and +/-inf all poison the sum.
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(what))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stack images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&PortraitImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (h, w) = first.resolution();
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.resolution() != (h, w) {
            return Err(Error::Dimension("images in a batch must share resolution".into()));
        }
        let px = img.pixels();
        for c in 0..3 {
            data.extend(px.iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn image_to_tensor(image: &PortraitImage, dtype: DType, device: &Device) -> Result<Tensor> {
    images_to_tensor(&[image], dtype, device)
}

/// Stack masks into an `(N, 1, H, W)` tensor.
pub fn masks_to_tensor(masks: &[&HairMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("empty mask batch".into()))?;
    let (h, w) = first.resolution();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.resolution() != (h, w) {
            return Err(Error::Dimension("masks in a batch must share resolution".into()));
        }
        data.extend_from_slice(m.values());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub fn mask_to_tensor(mask: &HairMask, dtype: DType, device: &Device) -> Result<Tensor> {
    masks_to_tensor(&[mask], dtype, device)
}

/// Split an `(N, 3, H, W)` tensor back into images (values clamped to `[0, 1]`).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<PortraitImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|b| {
            let plane = &flat[b * 3 * h * w..(b + 1) * 3 * h * w];
            let mut data = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for ch in 0..3 {
                    data.push(plane[ch * h * w + p]);
                }
            }
            PortraitImage::from_raw_clamped(h, w, data)
        })
        .collect())
}

pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<HairMask>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("expected 1 channel, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks_exact(h * w)
        .take(n)
        .map(|d| HairMask::new(h, w, d.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .collect()
}
