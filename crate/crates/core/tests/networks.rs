mod common;

use common::{half_mask, hair_mask_from_tensor, uniform, values};
use ehgan_core::candle::{DType, Device, Tensor};
use ehgan_core::dataset::synthetic;
use ehgan_core::imaging::resize_mask;
use ehgan_core::losses::{adversarial_loss_d, adversarial_loss_g, hair_loss, pixel_loss, style_reconstruction_loss};
use ehgan_core::losses::{GeneratorAdversarial, LossWeights};
use ehgan_core::networks::{
    composite_tensors, dilate_mask, downsample_mask, param_count, NetworkConfig, Networks, PerceptualConfig,
    PerceptualExtractor,
};
use ehgan_core::nn::mask_to_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro(seed: u64) -> Networks {
    Networks::new(&NetworkConfig::micro(), seed, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn mask_gating_at_every_block_resolution() {
    common::mask_gating().unwrap();
}

#[test]
fn adain_statistics_with_forced_affine() {
    common::adain_statistics().unwrap();
}

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn adain_block(style: usize, cin: usize, cout: usize) -> usize {
    linear(style, 2 * cin)
        + conv(cin, cout, 3, true)
        + linear(style, 2 * cout)
        + conv(cout, cout, 3, true)
        + if cin != cout { conv(cin, cout, 1, false) } else { 0 }
}

/// Parameter counts from the layer recipe alone.
fn expected_counts(c: &NetworkConfig) -> (usize, usize, usize) {
    let s = c.style_dim;
    let mut ch = c.encoder_channels;
    let mut enc = conv(3, ch, 3, true);
    for _ in 0..c.encoder_blocks {
        let out = (2 * ch).min(c.max_channels);
        enc += conv(ch, ch, 3, true) + conv(ch, out, 3, true);
        if ch != out {
            enc += conv(ch, out, 1, false);
        }
        ch = out;
    }
    enc += linear(ch, s);

    let mut ch = c.base_channels;
    let mut gen = linear(s, ch * c.start_resolution * c.start_resolution) + adain_block(s, ch, ch);
    for _ in 0..c.generator_blocks {
        gen += adain_block(s, ch, ch / 2);
        ch /= 2;
    }
    gen += conv(3, ch, 3, true) + conv(1, ch, 3, true) + adain_block(s, 3 * ch, ch) + conv(ch, 3, 3, true);

    let b = c.discriminator_channels;
    let branch = conv(3, b, 4, true)
        + conv(b, 2 * b, 4, true)
        + conv(2 * b, 4 * b, 4, true)
        + conv(4 * b, 8 * b, 4, true)
        + conv(8 * b, 1, 4, true);
    (enc, gen, 2 * branch)
}

#[test]
fn parameter_counts_match_the_layer_recipe() {
    for config in [NetworkConfig::micro(), NetworkConfig::desk()] {
        let nets = Networks::new(&config, 0, DType::F32, &Device::Cpu).unwrap();
        let got = (
            param_count(nets.encoder_params()),
            param_count(nets.generator_params()),
            param_count(nets.discriminator_params()),
        );
        assert_eq!(got, expected_counts(&config), "{config:?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let nets = micro(4);
    let ext = PerceptualExtractor::new(
        &PerceptualConfig {
            width_divisor: 16,
            ..PerceptualConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let (img, mask) = synthetic::portrait(8, 128);
    let input = ehgan_core::nn::image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
    let m = mask_to_tensor(&mask, DType::F32, &Device::Cpu).unwrap();
    let hair = input.broadcast_mul(&m).unwrap();
    let background = input.broadcast_mul(&(1.0 - &m).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = nets.sample_noise(&mut rng, 1).unwrap();

    let style = nets.encode_style(&hair).unwrap();
    let fake = nets.generator.forward(&noise, &m, &background, &style).unwrap().image;
    let hair_fake = fake.broadcast_mul(&m).unwrap();
    let total = (adversarial_loss_g(&nets.discriminator.forward(&fake).unwrap(), GeneratorAdversarial::NonSaturating)
        .unwrap()
        + hair_loss(&hair, &hair_fake, &ext, &LossWeights::default()).unwrap()
        + pixel_loss(&input, &fake).unwrap()
        + style_reconstruction_loss(&style, &nets.encoder.forward(&hair_fake).unwrap()).unwrap())
    .unwrap();
    let grads = total.backward().unwrap();
    for (name, var) in nets.synthesis_params() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(values(g).unwrap().iter().any(|v| *v != 0.0), "{name}: all-zero gradient");
    }

    let loss_d = adversarial_loss_d(
        &nets.discriminator.forward(&input).unwrap(),
        &nets.discriminator.forward(&fake.detach()).unwrap(),
    )
    .unwrap();
    let grads = loss_d.backward().unwrap();
    for (name, var) in nets.discriminator_params() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(values(g).unwrap().iter().any(|v| *v != 0.0), "{name}: all-zero gradient");
    }
    for (name, var) in nets.synthesis_params() {
        assert!(grads.get(var.as_tensor()).is_none(), "{name} reached by the detached D loss");
    }
}

#[test]
fn discriminator_score_maps() {
    let nets = micro(0);
    let x = uniform(&[2, 3, 128, 128], 0.0, 1.0, 1, DType::F32).unwrap();
    let dims: Vec<_> = nets
        .discriminator
        .forward(&x)
        .unwrap()
        .iter()
        .map(|s| s.dims().to_vec())
        .collect();
    assert_eq!(dims, vec![vec![2, 1, 14, 14], vec![2, 1, 6, 6]]);
    let wrong = uniform(&[1, 3, 64, 64], 0.0, 1.0, 1, DType::F32).unwrap();
    assert!(nets.discriminator.forward(&wrong).is_err());
}

#[test]
fn style_vectors_are_512_wide() {
    let nets = micro(0);
    let x = uniform(&[3, 3, 128, 128], 0.0, 1.0, 2, DType::F32).unwrap();
    assert_eq!(nets.encode_style(&x).unwrap().dims(), [3, 512]);
}

#[test]
fn hard_composite_keeps_background_outside_dilated_mask() {
    let mut nets = micro(6);
    let (_, mask) = synthetic::portrait(3, 128);
    let m = mask_to_tensor(&mask, DType::F32, &Device::Cpu).unwrap();
    let bg = uniform(&[1, 3, 128, 128], 0.0, 1.0, 7, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = nets.sample_noise(&mut rng, 1).unwrap();
    let style = nets.encode_style(&bg).unwrap();

    let out = nets.generator.forward(&noise, &m, &bg, &style).unwrap();
    let keep = dilate_mask(&m, nets.generator.dilation()).unwrap();
    let oracle = composite_tensors(&out.blended, &bg, &keep).unwrap();
    let (img, oracle, keep, bgv, blended) = (
        values(&out.image).unwrap(),
        values(&oracle).unwrap(),
        values(&keep).unwrap(),
        values(&bg).unwrap(),
        values(&out.blended).unwrap(),
    );
    assert_eq!(img, oracle);
    let hw = 128 * 128;
    for (i, v) in img.iter().enumerate() {
        if keep[i % hw] == 0.0 {
            assert_eq!(v.to_bits(), bgv[i].to_bits());
        } else if keep[i % hw] == 1.0 {
            assert_eq!(v.to_bits(), blended[i].to_bits());
        }
    }

    nets.generator.set_hard_composite(false);
    let soft = nets.generator.forward(&noise, &m, &bg, &style).unwrap();
    assert_eq!(values(&soft.image).unwrap(), blended);
}

#[test]
fn tensor_and_image_mask_ops_agree() {
    let (_, mask) = synthetic::portrait(12, 128);
    let t = mask_to_tensor(&mask, DType::F32, &Device::Cpu).unwrap();
    for factor in [1, 2, 4, 8, 16] {
        let res = 128 / factor;
        let a = hair_mask_from_tensor(&downsample_mask(&t, factor).unwrap()).unwrap();
        let b = resize_mask(&mask, (res, res)).unwrap();
        let worst = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "factor {factor}: {worst}");
    }
    for radius in [0, 1, 2, 3] {
        let a = hair_mask_from_tensor(&dilate_mask(&t, radius).unwrap()).unwrap();
        assert_eq!(a, mask.dilate(radius), "radius {radius}");
    }
    let half = half_mask(1, 128, DType::F32).unwrap();
    let small = values(&downsample_mask(&half, 16).unwrap()).unwrap();
    assert_eq!(small.iter().filter(|v| **v == 0.0).count(), 32);
    assert_eq!(small.iter().filter(|v| **v == 1.0).count(), 32);
}

#[test]
fn networks_reject_bad_inputs() {
    let nets = micro(0);
    let wrong = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert!(nets.encode_style(&wrong).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = nets.sample_noise(&mut rng, 1).unwrap();
    let style = Tensor::zeros((1, 512), DType::F32, &Device::Cpu).unwrap();
    let small_mask = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let bg = Tensor::zeros((1, 3, 128, 128), DType::F32, &Device::Cpu).unwrap();
    let err = nets.generator.forward(&noise, &small_mask, &bg, &style).unwrap_err();
    assert!(err.is_validation(), "{err}");

    let bad = NetworkConfig {
        start_resolution: 16,
        ..NetworkConfig::micro()
    };
    assert!(Networks::new(&bad, 0, DType::F32, &Device::Cpu).is_err());
}
