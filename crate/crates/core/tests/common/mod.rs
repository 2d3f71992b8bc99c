//! Criterion checks shared by the acceptance target and the integration tests.
//! Each check returns a one-line detail on success and a reason on failure.
#![allow(dead_code)]

use std::error::Error as StdError;
use std::path::Path;
use std::time::Instant;

use ehgan_core::candle::{DType, Device, Tensor, Var};
use ehgan_core::dataset::{make_pseudo_supervised_batch, synthetic, Batch, DatasetIndex};
use ehgan_core::evaluation::{
    benchmark_runtime, compute_fid, is_reference_hardware, psnr, ssim, TimingReport,
    REFERENCE_BOUND_SECONDS,
};
use ehgan_core::imaging::{HairMask, PortraitImage};
use ehgan_core::losses::{
    adversarial_loss_d, adversarial_loss_g, hair_loss, pixel_loss, style_reconstruction_loss_with,
    total_generator_objective, GeneratorAdversarial, GeneratorTerms, LossReport, LossWeights,
};
use ehgan_core::networks::{
    adain_apply, downsample_mask, NetworkConfig, Networks, PerceptualConfig, PerceptualExtractor,
};
use ehgan_core::pipeline::{Model, TransferRequest};
use ehgan_core::superres::{upscale, Bicubic};
use ehgan_core::training::{overfit_smoke, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type R<T> = Result<T, Box<dyn StdError>>;

pub fn ensure(cond: bool, msg: impl Into<String>) -> R<()> {
    if cond {
        Ok(())
    } else {
        Err(msg.into().into())
    }
}

pub fn scalar(t: &Tensor) -> R<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn values(t: &Tensor) -> R<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Seeded uniform tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64, dtype: DType) -> R<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn normal_samples(n: usize, mean: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Micro network layout plus the narrowest perceptual extractor: the CPU test scale.
pub fn tiny_config(data_root: &Path) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        data_root: data_root.to_path_buf(),
        split_fraction: 1.0,
        network: NetworkConfig::micro(),
        perceptual: PerceptualConfig {
            width_divisor: 16,
            ..PerceptualConfig::default()
        },
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- losses

/// Worst relative error between the autograd gradient of `f` at `x0` and
/// central differences (h = 1e-3) over `probes` seeded coordinates.
pub fn gradient_probe(
    x0: &Tensor,
    f: impl Fn(&Tensor) -> ehgan_core::Result<Tensor>,
    probes: usize,
    seed: u64,
) -> R<f64> {
    const H: f64 = 1e-3;
    let var = Var::from_tensor(x0)?;
    let grads = f(var.as_tensor())?.backward()?;
    let analytic = values(grads.get(var.as_tensor()).ok_or("no gradient reached the input")?)?;
    let base = values(x0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..base.len());
        let eval = |delta: f64| -> R<f64> {
            let mut v = base.clone();
            v[i] += delta;
            scalar(&f(&Tensor::from_vec(v, x0.shape(), &Device::Cpu)?)?)
        };
        let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn narrow_extractor(taps: usize) -> R<PerceptualExtractor> {
    Ok(PerceptualExtractor::new(
        &PerceptualConfig {
            taps,
            width_divisor: 8,
            seed: 4,
            ..PerceptualConfig::default()
        },
        DType::F64,
        &Device::Cpu,
    )?)
}

/// The closed-form examples of the loss module, each against an independent oracle.
pub fn derived_loss_examples() -> R<String> {
    let dev = Device::Cpu;
    let zeros = |shape: &[usize]| Tensor::zeros(shape, DType::F64, &dev);

    // logit 0 is probability 0.5 at both scales.
    let even = vec![zeros(&[1, 1, 14, 14])?, zeros(&[1, 1, 6, 6])?];
    let d = scalar(&adversarial_loss_d(&even, &even)?)?;
    let d_oracle = -(0.5f64.ln() + (1.0f64 - 0.5).ln());
    ensure((d - d_oracle).abs() <= 1e-4, format!("adv_d at p=0.5: {d} vs {d_oracle}"))?;

    let g = scalar(&adversarial_loss_g(&even, GeneratorAdversarial::NonSaturating)?)?;
    let g_oracle = -(0.5f64.ln());
    ensure((g - g_oracle).abs() <= 1e-4, format!("adv_g at p=0.5: {g} vs {g_oracle}"))?;

    let ones = Tensor::ones((1, 3, 8, 8), DType::F64, &dev)?;
    let blank = ones.zeros_like()?;
    let hair_pixel = 2.5;
    let weights = LossWeights {
        hair_perceptual: 0.0,
        hair_pixel,
        ..LossWeights::default()
    };
    let h = scalar(&hair_loss(&ones, &blank, &narrow_extractor(1)?, &weights)?)?;
    ensure((h - hair_pixel * 1.0).abs() <= 1e-12, format!("pixel-only hair term: {h}"))?;

    let p = scalar(&pixel_loss(&ones, &blank)?)?;
    let p_oracle = values(&ones)?.iter().map(|v| v.abs()).sum::<f64>() / 192.0;
    ensure((p - p_oracle).abs() <= 1e-12, format!("pix all-1 vs all-0: {p}"))?;

    // Two-pass oracle: encode each image separately, then mean |a - b| by hand.
    let nets = Networks::new(&NetworkConfig::micro(), 2, DType::F64, &dev)?;
    let a = uniform(&[2, 3, 128, 128], 0.0, 1.0, 1, DType::F64)?;
    let b = uniform(&[2, 3, 128, 128], 0.0, 1.0, 2, DType::F64)?;
    let s = scalar(&style_reconstruction_loss_with(&a, &b, &nets.encoder)?)?;
    let (ea, eb) = (values(&nets.encoder.forward(&a)?)?, values(&nets.encoder.forward(&b)?)?);
    let s_oracle = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ea.len() as f64;
    ensure((s - s_oracle).abs() <= 1e-12 * s_oracle.max(1.0), format!("style: {s} vs {s_oracle}"))?;

    let term = |v: f64| Tensor::new(v, &dev);
    let terms = GeneratorTerms {
        pix: term(0.5)?,
        hair: term(0.2)?,
        adv: term(0.1)?,
        style: term(0.3)?,
    };
    let (total, report) = total_generator_objective(&terms, &LossWeights::default())?;
    let t_oracle = 0.5 + 0.2 + 0.1 + 0.3;
    ensure((scalar(&total)? - t_oracle).abs() <= 1e-12, "weighted total")?;
    ensure((report.total_g - t_oracle).abs() <= 1e-12, "reported total")?;
    Ok(format!("adv_d {d:.4}, adv_g {g:.4}, total {:.1}", report.total_g))
}

/// Gradient-vs-finite-difference probes, 5 per loss, relative error <= 1e-2.
pub fn loss_gradients() -> R<String> {
    const PROBES: usize = 5;
    const TOL: f64 = 1e-2;
    let image = |seed| uniform(&[1, 3, 4, 4], 0.0, 1.0, seed, DType::F64);
    let logits = |seed| uniform(&[1, 1, 4, 4], -2.0, 2.0, seed, DType::F64);
    let mut worst = Vec::new();

    let target = image(10)?;
    worst.push(("pix", gradient_probe(&image(11)?, |x| pixel_loss(&target, x), PROBES, 1)?));

    let ext = narrow_extractor(3)?;
    let weights = LossWeights::default();
    worst.push((
        "hair",
        gradient_probe(&image(13)?, |x| hair_loss(&target, x, &ext, &weights), PROBES, 2)?,
    ));

    // The encoder only accepts generator-resolution images.
    let nets = Networks::new(&NetworkConfig::micro(), 2, DType::F64, &Device::Cpu)?;
    let reference = uniform(&[1, 3, 128, 128], 0.0, 1.0, 14, DType::F64)?;
    let x = uniform(&[1, 3, 128, 128], 0.0, 1.0, 15, DType::F64)?;
    worst.push((
        "style",
        gradient_probe(&x, |x| style_reconstruction_loss_with(&reference, x, &nets.encoder), PROBES, 3)?,
    ));

    let fake = vec![logits(16)?];
    worst.push((
        "adv_d/real",
        gradient_probe(&logits(17)?, |r| adversarial_loss_d(&[r.clone()], &fake), PROBES, 4)?,
    ));
    let real = vec![logits(18)?];
    worst.push((
        "adv_d/fake",
        gradient_probe(&logits(19)?, |f| adversarial_loss_d(&real, &[f.clone()]), PROBES, 5)?,
    ));
    worst.push((
        "adv_g",
        gradient_probe(
            &logits(20)?,
            |f| adversarial_loss_g(&[f.clone()], GeneratorAdversarial::NonSaturating),
            PROBES,
            6,
        )?,
    ));

    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e <= TOL)).collect();
    ensure(bad.is_empty(), format!("relative error above {TOL}: {bad:?}"))?;
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("{} losses x {PROBES} probes, worst rel err {max:.1e}", worst.len()))
}

pub fn loss_oracle_suite() -> R<String> {
    let a = derived_loss_examples()?;
    let b = loss_gradients()?;
    Ok(format!("{a}; {b}"))
}

// ---------------------------------------------------------------- networks

/// 1 on the right half, exactly 0 on the left half.
pub fn half_mask(n: usize, res: usize, dtype: DType) -> R<Tensor> {
    let row: Vec<f32> = (0..res).map(|c| if c < res / 2 { 0.0 } else { 1.0 }).collect();
    let data: Vec<f32> = (0..n * res).flat_map(|_| row.clone()).collect();
    Ok(Tensor::from_vec(data, (n, 1, res, res), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn mask_gating() -> R<String> {
    let nets = Networks::new(&NetworkConfig::micro(), 1, DType::F32, &Device::Cpu)?;
    let g = &nets.generator;
    let resolutions = g.block_resolutions();
    ensure(resolutions == [8, 16, 32, 64, 128], format!("block resolutions {resolutions:?}"))?;

    let mask = half_mask(2, 128, DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = nets.sample_noise(&mut rng, 2)?;
    let style = nets.encode_style(&uniform(&[2, 3, 128, 128], 0.0, 1.0, 3, DType::F32)?)?;
    let acts = g.gated_activations(&noise, &mask, &style)?;
    for (i, (act, &res)) in acts.iter().zip(&resolutions).enumerate() {
        let gate = downsample_mask(&mask, 128 / res)?;
        let v = act.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut right_nonzero = false;
        for (k, x) in v.iter().enumerate() {
            let col = k % res;
            if col < res / 2 {
                ensure(*x == 0.0, format!("block {i} ({res}px): {x} at column {col}"))?;
            } else if *x != 0.0 {
                right_nonzero = true;
            }
        }
        ensure(right_nonzero, format!("block {i} ({res}px) is zero everywhere"))?;
        // Oracle: the ungated block output multiplied by the resized mask.
        if i > 0 {
            let oracle = g.blocks()[i].forward(&acts[i - 1], &style)?.broadcast_mul(&gate)?;
            let diff = (oracle - act)?.abs()?.max_all()?.to_scalar::<f32>()?;
            ensure(diff == 0.0, format!("block {i}: differs from ungated output x mask by {diff}"))?;
        }
    }
    Ok(format!("zero left half at {resolutions:?}"))
}

/// Per-(sample, channel) population mean and std, in f64.
pub fn channel_stats(t: &Tensor) -> R<Vec<(f64, f64)>> {
    let (n, c, h, w) = t.dims4()?;
    let v = values(t)?;
    let hw = h * w;
    Ok((0..n * c)
        .map(|k| {
            let s = &v[k * hw..(k + 1) * hw];
            let mean = s.iter().sum::<f64>() / hw as f64;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hw as f64;
            (mean, var.sqrt())
        })
        .collect())
}

/// Channels with distinct offsets and scales. Stds stay at or above 0.5, since
/// the denominator epsilon alone shifts the output std by about eps / std.
pub fn skewed_features(n: usize, c: usize, res: usize, seed: u64) -> R<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * c * res * res);
    for _ in 0..n {
        for ch in 0..c {
            let (offset, scale) = (ch as f64 * 0.3 - 9.0, 0.5 + ch as f64 * 0.05);
            for _ in 0..res * res {
                data.push((offset + scale * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(data, (n, c, res, res), &Device::Cpu)?)
}

pub fn adain_statistics() -> R<String> {
    let x = skewed_features(2, 64, 16, 5)?;
    let dev = Device::Cpu;
    let mut detail = String::new();
    for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
        let g = Tensor::full(gamma as f32, (2, 64), &dev)?;
        let b = Tensor::full(beta as f32, (2, 64), &dev)?;
        let stats = channel_stats(&adain_apply(&x, &g, &b)?)?;
        let worst_mu = stats.iter().map(|(m, _)| (m - beta).abs()).fold(0.0, f64::max);
        let worst_sd = stats.iter().map(|(_, s)| (s - gamma).abs()).fold(0.0, f64::max);
        ensure(
            worst_mu <= 1e-4 && worst_sd <= 1e-4,
            format!("gamma {gamma}, beta {beta}: |mu - beta| {worst_mu:.2e}, |sd - gamma| {worst_sd:.2e}"),
        )?;
        if detail.is_empty() {
            detail = format!("identity affine: max |mu| {worst_mu:.1e}, max |sd-1| {worst_sd:.1e}");
        }
    }
    Ok(detail)
}

// ---------------------------------------------------------------- pipeline

pub fn untrained_model(seed: u64) -> R<Model> {
    let nets = Networks::new(&NetworkConfig::micro(), seed, DType::F32, &Device::Cpu)?;
    Ok(Model::from_networks(nets, "untrained-micro"))
}

pub fn random_request(i: u64, size: usize) -> TransferRequest {
    let (input_image, input_mask) = synthetic::portrait(1000 + i, size);
    let (reference_image, reference_mask) = synthetic::portrait(2000 + i, size);
    let (_, target_mask) = synthetic::portrait(3000 + i, size);
    TransferRequest {
        input_image,
        reference_image,
        reference_mask,
        target_mask,
        input_mask: Some(input_mask),
        seed: Some(i),
    }
}

pub fn non_hair_preservation() -> R<String> {
    let model = untrained_model(5)?;
    ensure(model.networks().generator.hard_composite(), "hard composite is off")?;
    let radius = model.networks().generator.dilation();
    let mut compared = 0usize;
    for i in 0..20u64 {
        let size = if i % 2 == 0 { 128 } else { 256 };
        let p = model.prepare(&random_request(i, size))?;
        let out = model.synthesize(&p)?;
        let keep = p.target_mask.dilate(radius);
        let mut inside_changed = false;
        for r in 0..128 {
            for c in 0..128 {
                for ch in 0..3 {
                    let (o, bg) = (out.get(r, c, ch), p.background.get(r, c, ch));
                    if keep.get(r, c) == 0.0 {
                        ensure(
                            o.to_bits() == bg.to_bits() && bg.to_bits() == p.input.get(r, c, ch).to_bits(),
                            format!("request {i}: ({r},{c},{ch}) is {o}, background {bg}"),
                        )?;
                        compared += 1;
                    } else if o != bg {
                        inside_changed = true;
                    }
                }
            }
        }
        ensure(inside_changed, format!("request {i}: nothing synthesized inside the mask"))?;
    }
    Ok(format!("20 requests, {compared} values bitwise equal to I_bg"))
}

// ---------------------------------------------------------------- training

pub fn tiny_overfit() -> R<String> {
    let dir = tempfile::tempdir()?;
    synthetic::write_corpus(dir.path(), 4, 128, 11)?;
    let config = tiny_config(dir.path());
    ensure(config.weights == LossWeights::default(), "smoke must use unit weights")?;
    let start = Instant::now();
    let report = overfit_smoke(&config, 4, 500)?;
    let secs = start.elapsed().as_secs_f64();
    let early = report.pix_moving_average(50, 50).ok_or("fewer than 50 steps")?;
    let late = report.pix_moving_average(500, 50).ok_or("fewer than 500 steps")?;
    let detail = format!(
        "PSNR {:.3} -> {:.3} dB, L_pix MA50 {early:.4} @50 -> {late:.4} @500, {secs:.0}s",
        report.initial_psnr, report.final_psnr
    );
    ensure(report.final_psnr > report.initial_psnr, format!("PSNR did not improve: {detail}"))?;
    ensure(late < early, format!("L_pix moving average did not fall: {detail}"))?;
    ensure(secs <= 3600.0, format!("over the 60 min CPU budget: {detail}"))?;
    Ok(detail)
}

/// An 8-image corpus indexed with every image in the training split.
pub fn training_corpus(n: usize, seed: u64) -> R<(tempfile::TempDir, Vec<Batch>)> {
    let dir = tempfile::tempdir()?;
    synthetic::write_corpus(dir.path(), n, 128, seed)?;
    let index = DatasetIndex::open_or_build(dir.path(), 1.0, 0)?;
    let ids = index.train_ids();
    let batches = ids
        .chunks(4)
        .map(|c| Ok(make_pseudo_supervised_batch(&index, c)?))
        .collect::<R<Vec<_>>>()?;
    Ok((dir, batches))
}

pub fn run_steps(trainer: &mut Trainer, batches: &[Batch], n: usize) -> R<Vec<LossReport>> {
    (0..n)
        .map(|_| {
            let b = &batches[trainer.step() as usize % batches.len()];
            Ok(trainer.train_step(b)?)
        })
        .collect()
}

pub fn determinism_and_resume() -> R<String> {
    let (dir, batches) = training_corpus(8, 3)?;
    let config = tiny_config(dir.path());

    let reference = run_steps(&mut Trainer::new(config.clone())?, &batches, 5)?;
    let replay = run_steps(&mut Trainer::new(config.clone())?, &batches, 5)?;
    ensure(reference == replay, "pinned-seed runs produced different LossReports")?;
    ensure(reference.iter().all(LossReport::is_finite), "non-finite report")?;

    let mut first = Trainer::new(config.clone())?;
    run_steps(&mut first, &batches, 2)?;
    let path = dir.path().join("resume.ckpt");
    first.checkpoint()?.save(&path)?;
    drop(first);
    let ckpt = ehgan_core::checkpoint::Checkpoint::load(&path, &Device::Cpu)?;
    let mut resumed = Trainer::from_checkpoint(&ckpt, config)?;
    let next = run_steps(&mut resumed, &batches, 3)?;
    ensure(next == reference[2..], format!("resumed steps {next:?} vs {:?}", &reference[2..]))?;
    Ok("5 replayed steps identical; steps 3..=5 after resume identical".into())
}

// ---------------------------------------------------------------- metrics

pub fn metric_self_consistency() -> R<String> {
    let a: Vec<Vec<f64>> = (0..200).map(|i| normal_samples(16, 0.0, i)).collect();
    let same = compute_fid(&a, &a)?;
    ensure(same <= 1e-6, format!("FID(A, A) = {same:e}"))?;

    let x: Vec<Vec<f64>> = normal_samples(100_000, 0.0, 1).into_iter().map(|v| vec![v]).collect();
    let y: Vec<Vec<f64>> = normal_samples(100_000, 1.0, 2).into_iter().map(|v| vec![v]).collect();
    let gauss = compute_fid(&x, &y)?;
    ensure((gauss - 1.0).abs() <= 0.05, format!("N(0,1) vs N(1,1) FID = {gauss}"))?;

    let black = PortraitImage::zeros(32, 32);
    let white = PortraitImage::filled(32, 32, 1.0);
    let p = psnr(&black, &white)?;
    ensure(p.abs() <= 1e-6, format!("PSNR(all-0, all-1) = {p}"))?;

    let (img, _) = synthetic::portrait(4, 128);
    let s = ssim(&img, &img)?;
    ensure((s - 1.0).abs() <= 1e-6, format!("SSIM(a, a) = {s}"))?;
    Ok(format!("FID(A,A) {same:.1e}, Gaussian FID {gauss:.4}, PSNR {p:.1e} dB, SSIM {s:.6}"))
}

// ---------------------------------------------------------------- runtime

pub const HARDWARE_TAG_ENV: &str = "EHGAN_HARDWARE_TAG";

pub fn runtime_protocol() -> R<String> {
    let tag = std::env::var(HARDWARE_TAG_ENV).unwrap_or_else(|_| "cpu".into());
    let model = untrained_model(0)?;
    let mut req = random_request(0, 128);
    req.input_mask = None;
    let prepared = model.prepare(&req)?;
    let once = || -> ehgan_core::Result<()> {
        let low = model.synthesize(&prepared)?;
        upscale(&low, &Bicubic).map(drop)
    };
    // Interleaved rounds; load spikes only add time, so the fastest median per side
    // is the least contaminated estimate.
    let (mut single, mut double) = (None::<TimingReport>, None::<TimingReport>);
    for _ in 0..3 {
        let one = benchmark_runtime(once, 5, 30, &tag)?;
        let two = benchmark_runtime(
            || {
                once()?;
                once()
            },
            5,
            30,
            &tag,
        )?;
        if single.as_ref().is_none_or(|b| one.seconds_per_image < b.seconds_per_image) {
            single = Some(one);
        }
        if double.as_ref().is_none_or(|b| two.seconds_per_image < b.seconds_per_image) {
            double = Some(two);
        }
    }
    let (single, double) = (single.ok_or("no rounds")?, double.ok_or("no rounds")?);
    let s = single.seconds_per_image;
    ensure(s.is_finite() && s > 0.0, format!("median {s}"))?;
    let ratio = double.seconds_per_image / s;
    ensure((1.6..=2.4).contains(&ratio), format!("double-pipeline ratio {ratio:.3}"))?;
    ensure(
        single.reference_seconds_per_image == 0.0862 && single.reference_fps == 11.6,
        "reference target missing from report",
    )?;
    match (is_reference_hardware(&tag), single.within_reference_bound) {
        (true, Some(true)) | (false, None) => {}
        (true, _) => {
            return Err(format!("{s:.4} s/image exceeds {REFERENCE_BOUND_SECONDS} s on {tag}").into())
        }
        (false, Some(_)) => return Err("reference bound asserted on undeclared hardware".into()),
    }
    Ok(format!(
        "{:.1} ms/image ({:.1} FPS) on {tag}, double/single {ratio:.2}",
        s * 1e3,
        single.fps
    ))
}

pub fn hair_mask_from_tensor(t: &Tensor) -> R<HairMask> {
    let (_, _, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(HairMask::new(h, w, v)?)
}
