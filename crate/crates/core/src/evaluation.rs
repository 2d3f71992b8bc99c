//! Image-quality metrics and the runtime benchmark protocol.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_pseudo_supervised_batch, DatasetIndex};
use crate::error::{Error, Result};
use crate::imaging::{resize_image, PortraitImage, ResizePolicy};
use crate::networks::{PerceptualConfig, PerceptualExtractor};
use crate::nn::{images_to_tensor, spatial_mean};
use crate::pipeline::Model;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Negative eigenvalues of the covariance product down to this (relative) size are rounding noise.
pub const FID_EIGEN_TOLERANCE: f64 = 1e-3;
pub const MIN_TIMED_RUNS: usize = 30;
/// Reference per-image time and throughput on an RTX 2080 class GPU.
pub const REFERENCE_SECONDS_PER_IMAGE: f64 = 0.0862;
pub const REFERENCE_FPS: f64 = 11.6;
/// Bound asserted on reference-class hardware: twice the published time, rounded.
pub const REFERENCE_BOUND_SECONDS: f64 = 0.18;

fn check_pair(a: &PortraitImage, b: &PortraitImage, what: &str) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &PortraitImage, b: &PortraitImage) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| plane[i * w + j + t] * k[t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| rows[(i + t) * ow + j] * k[t]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows and channels, dynamic range 1.
pub fn ssim(a: &PortraitImage, b: &PortraitImage) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (h, w) = a.resolution();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = a.pixels().iter().skip(ch).step_by(3).map(|v| f64::from(*v)).collect();
        let y: Vec<f64> = b.pixels().iter().skip(ch).step_by(3).map(|v| f64::from(*v)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn mean_and_covariance(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len();
    let m = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).add_scalar_mut(-mu);
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    (mean, cov)
}

/// Eigenvalues of a symmetric PSD matrix with rounding negatives clamped to zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -FID_EIGEN_TOLERANCE * scale {
                return Err(Error::numeric(format!("fid: {what} is not positive semidefinite ({v})")));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Fréchet distance between Gaussians fitted to two embedding sets
/// (unbiased covariances).
///
/// `Tr((S_a S_b)^{1/2})` is evaluated as `Tr((A S_b A)^{1/2})` with
/// `A = S_a^{1/2}`; the inner matrix is symmetric PSD, so its square root
/// is real and is taken by eigendecomposition.
pub fn compute_fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    for (set, name) in [(features_a, "first"), (features_b, "second")] {
        if set.len() < 2 {
            return Err(Error::Argument(format!(
                "fid: {name} set has {} samples, covariance needs at least 2",
                set.len()
            )));
        }
    }
    let d = features_a[0].len();
    if d == 0 || features_a.iter().chain(features_b).any(|v| v.len() != d) {
        return Err(Error::Dimension("fid: embeddings must share one nonzero dimension".into()));
    }
    if features_a.iter().chain(features_b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fid: non-finite embedding"));
    }
    let (mu_a, cov_a) = mean_and_covariance(features_a);
    let (mu_b, cov_b) = mean_and_covariance(features_b);

    let eig_a = psd_eigen(cov_a.clone(), "first covariance")?;
    let sqrt_vals = eig_a.eigenvalues.map(f64::sqrt);
    let sqrt_a = &eig_a.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig_a.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let tr_sqrt: f64 = psd_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();

    let diff = mu_a - mu_b;
    let fid = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    // Cancellation can leave a tiny negative for near-identical sets.
    Ok(fid.max(0.0))
}

/// Maps an image to a fixed-length feature vector for FID.
pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, images: &[PortraitImage]) -> Result<Vec<Vec<f64>>>;
}

/// Area-downsample to 16x16 and apply a seeded Gaussian projection.
/// Deterministic and download-free; not comparable with published FIDs.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    side: usize,
    projection: DMatrix<f64>,
    seed: u64,
}

impl RandomProjectionEmbedder {
    pub const SIDE: usize = 16;
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        let side = Self::SIDE;
        let input = side * side * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input as f64).sqrt();
        let projection = DMatrix::from_fn(Self::DIM, input, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        Self { side, projection, seed }
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn name(&self) -> String {
        format!("random-projection-{}x{}-d{}-seed{}", self.side, self.side, Self::DIM, self.seed)
    }

    fn embed(&self, images: &[PortraitImage]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| {
                let small = resize_image(img, (self.side, self.side), ResizePolicy::AREA)?;
                let x = DVector::from_iterator(small.pixels().len(), small.pixels().iter().map(|v| f64::from(*v)));
                Ok((&self.projection * x).iter().copied().collect())
            })
            .collect()
    }
}

/// Globally pooled deepest tap of the (optionally pretrained) perceptual extractor.
#[derive(Debug, Clone)]
pub struct PerceptualEmbedder {
    extractor: PerceptualExtractor,
    pretrained: bool,
}

impl PerceptualEmbedder {
    pub fn new(config: &PerceptualConfig) -> Result<Self> {
        Ok(Self {
            extractor: PerceptualExtractor::new(config, DType::F32, &Device::Cpu)?,
            pretrained: config.weights_path.is_some(),
        })
    }
}

impl Embedder for PerceptualEmbedder {
    fn name(&self) -> String {
        let kind = if self.pretrained { "pretrained" } else { "random" };
        format!("vgg19-{kind}-tap{}", self.extractor.taps())
    }

    fn embed(&self, images: &[PortraitImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let refs: Vec<_> = chunk.iter().collect();
            let x = images_to_tensor(&refs, DType::F32, &Device::Cpu)?;
            let feats = self.extractor.forward(&x)?;
            let last = feats.last().expect("at least one tap");
            let pooled: Tensor = spatial_mean(last)?.flatten_from(1)?;
            let rows: Vec<Vec<f32>> = pooled.to_dtype(DType::F32)?.to_vec2()?;
            out.extend(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<f64>>()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub embedder: String,
    /// Which images the metrics compare.
    pub protocol: String,
}

/// Pseudo-supervised reconstruction of `n` seeded-random test images,
/// scored against their sources.
pub fn evaluate_corpus(
    model: &Model,
    index: &DatasetIndex,
    n: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<MetricReport> {
    if n < 2 {
        return Err(Error::Argument(format!("evaluation needs at least 2 images for FID, got {n}")));
    }
    let test = index.test_ids();
    if n > test.len() {
        return Err(Error::Argument(format!("{n} images requested, test split has {}", test.len())));
    }
    let ids = crate::training::epoch_order(&test, seed, 0);
    let mut originals = Vec::with_capacity(n);
    let mut fakes = Vec::with_capacity(n);
    for (k, chunk) in ids[..n].chunks(8).enumerate() {
        let batch = make_pseudo_supervised_batch(index, chunk)?;
        let out = model.reconstruct(&batch, seed.wrapping_add(k as u64))?;
        originals.extend(batch.samples.into_iter().map(|s| s.image));
        fakes.extend(out);
    }
    let mut report = score_pairs(&originals, &fakes, embedder)?;
    report.protocol = "reconstruction vs original, test split".into();
    Ok(report)
}

/// FID between the two sets plus mean paired PSNR and SSIM.
pub fn score_pairs(originals: &[PortraitImage], outputs: &[PortraitImage], embedder: &dyn Embedder) -> Result<MetricReport> {
    if originals.len() != outputs.len() {
        return Err(Error::Argument("paired metrics need equally sized sets".into()));
    }
    let n = originals.len();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (a, b) in originals.iter().zip(outputs) {
        psnr_sum += psnr(a, b)?;
        ssim_sum += ssim(a, b)?;
    }
    let fid = compute_fid(&embedder.embed(originals)?, &embedder.embed(outputs)?)?;
    Ok(MetricReport {
        fid,
        psnr_db: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        n_images: n,
        embedder: embedder.name(),
        protocol: "paired".into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub seconds_per_image: f64,
    pub fps: f64,
    pub n_warmup: usize,
    pub n_timed: usize,
    pub hardware_tag: String,
    pub reference_seconds_per_image: f64,
    pub reference_fps: f64,
    /// `Some(median <= 0.18 s)` when `hardware_tag` names reference-class hardware.
    pub within_reference_bound: Option<bool>,
}

/// True for tags naming an RTX 2080 class GPU.
pub fn is_reference_hardware(tag: &str) -> bool {
    let t = tag.to_ascii_lowercase();
    t.contains("2080")
}

/// Median wall time of `n_timed` calls after `n_warmup` discarded ones.
pub fn benchmark_runtime(
    mut timed: impl FnMut() -> Result<()>,
    n_warmup: usize,
    n_timed: usize,
    hardware_tag: &str,
) -> Result<TimingReport> {
    if n_timed < MIN_TIMED_RUNS {
        return Err(Error::Argument(format!(
            "benchmark needs at least {MIN_TIMED_RUNS} timed runs, got {n_timed}"
        )));
    }
    for _ in 0..n_warmup {
        timed()?;
    }
    let mut samples = Vec::with_capacity(n_timed);
    for _ in 0..n_timed {
        let start = Instant::now();
        timed()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let median = median(&mut samples);
    // Clock granularity can report 0 for a no-op; one nanosecond is the floor.
    let seconds_per_image = median.max(1e-9);
    Ok(TimingReport {
        seconds_per_image,
        fps: 1.0 / seconds_per_image,
        n_warmup,
        n_timed,
        hardware_tag: hardware_tag.to_string(),
        reference_seconds_per_image: REFERENCE_SECONDS_PER_IMAGE,
        reference_fps: REFERENCE_FPS,
        within_reference_bound: is_reference_hardware(hardware_tag)
            .then_some(seconds_per_image <= REFERENCE_BOUND_SECONDS),
    })
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}
