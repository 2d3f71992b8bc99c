mod common;

use common::scalar;
use ehgan_core::candle::{Device, Tensor};
use ehgan_core::losses::{
    adversarial_loss_d, hair_loss, pixel_loss, total_generator_objective, GeneratorTerms, LossWeights,
};
use ehgan_core::networks::{PerceptualConfig, PerceptualExtractor};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use proptest::collection::vec;

#[test]
fn derived_examples() {
    common::derived_loss_examples().unwrap();
}

#[test]
fn gradients_match_central_differences() {
    common::loss_gradients().unwrap();
}

fn img(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v, (1, 3, 4, 4), &Device::Cpu).unwrap()
}

fn extractor() -> PerceptualExtractor {
    let config = PerceptualConfig {
        taps: 3,
        width_divisor: 16,
        ..PerceptualConfig::default()
    };
    PerceptualExtractor::new(&config, ehgan_core::candle::DType::F64, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pixel_loss_is_symmetric_and_homogeneous(
        a in vec(0.0f64..1.0, 48),
        b in vec(0.0f64..1.0, 48),
        alpha in 0.0f64..1.0,
    ) {
        let (ta, tb) = (img(a), img(b));
        let ab = scalar(&pixel_loss(&ta, &tb).unwrap()).unwrap();
        let ba = scalar(&pixel_loss(&tb, &ta).unwrap()).unwrap();
        prop_assert!(ab >= 0.0 && (ab - ba).abs() <= 1e-12);
        let scaled = scalar(&pixel_loss(&(&ta * alpha).unwrap(), &(&tb * alpha).unwrap()).unwrap()).unwrap();
        prop_assert!((scaled - alpha * ab).abs() <= 1e-12);
        prop_assert!(scalar(&pixel_loss(&ta, &ta).unwrap()).unwrap() == 0.0);
    }

    #[test]
    fn hair_loss_is_symmetric_and_zero_on_equal(
        a in vec(0.0f64..1.0, 48),
        b in vec(0.0f64..1.0, 48),
    ) {
        let ext = extractor();
        let w = LossWeights::default();
        let (ta, tb) = (img(a), img(b));
        let ab = scalar(&hair_loss(&ta, &tb, &ext, &w).unwrap()).unwrap();
        let ba = scalar(&hair_loss(&tb, &ta, &ext, &w).unwrap()).unwrap();
        prop_assert!(ab > 0.0 && (ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(scalar(&hair_loss(&ta, &ta, &ext, &w).unwrap()).unwrap() == 0.0);
    }

    #[test]
    fn objective_is_linear_in_each_weight(
        terms in vec(0.0f64..5.0, 4),
        weights in vec(0.0f64..3.0, 4),
        k in 0.0f64..4.0,
        which in 0usize..4,
    ) {
        let t = |i: usize| Tensor::new(terms[i], &Device::Cpu).unwrap();
        let g = GeneratorTerms { pix: t(0), hair: t(1), adv: t(2), style: t(3) };
        let base = LossWeights {
            pix: weights[0],
            hair: weights[1],
            adv: weights[2],
            style: weights[3],
            ..LossWeights::default()
        };
        let total = |w: &LossWeights| total_generator_objective(&g, w).unwrap().1.total_g;
        let mut bumped = base;
        match which {
            0 => bumped.pix += k,
            1 => bumped.hair += k,
            2 => bumped.adv += k,
            _ => bumped.style += k,
        }
        prop_assert!((total(&bumped) - total(&base) - k * terms[which]).abs() <= 1e-9);
        prop_assert!((total(&base.scaled(2.0)) - 2.0 * total(&base)).abs() <= 1e-9);
        prop_assert!((total(&base) - base.combine(terms[0], terms[1], terms[2], terms[3])).abs() <= 1e-9);
    }

    #[test]
    fn discriminator_loss_is_monotone_in_scores(r in -6.0f64..6.0, f in -6.0f64..6.0, d in 0.01f64..2.0) {
        let s = |v: f64| vec![Tensor::new(&[[[[v]]]], &Device::Cpu).unwrap()];
        let loss = |r: f64, f: f64| scalar(&adversarial_loss_d(&s(r), &s(f)).unwrap()).unwrap();
        prop_assert!(loss(r + d, f) < loss(r, f));
        prop_assert!(loss(r, f - d) < loss(r, f));
    }
}
