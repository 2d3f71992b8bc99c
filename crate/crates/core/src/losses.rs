//! Training losses. Every L1 norm is a mean, not a sum.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{PerceptualExtractor, StyleEncoder};
use crate::nn::scalar;

/// Lower clamp on probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pix: f64,
    pub hair: f64,
    pub adv: f64,
    pub style: f64,
    pub hair_perceptual: f64,
    pub hair_pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 1.0,
            hair: 1.0,
            adv: 1.0,
            style: 1.0,
            hair_perceptual: 1.0,
            hair_pixel: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("pix", self.pix),
            ("hair", self.hair),
            ("adv", self.adv),
            ("style", self.style),
            ("hair_perceptual", self.hair_perceptual),
            ("hair_pixel", self.hair_pixel),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// `pix * L_pix + hair * L_hair + adv * L_adv + style * L_style` on plain numbers.
    pub fn combine(&self, pix: f64, hair: f64, adv: f64, style: f64) -> f64 {
        self.pix * pix + self.hair * hair + self.adv * adv + self.style * style
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            pix: self.pix * k,
            hair: self.hair * k,
            adv: self.adv * k,
            style: self.style * k,
            hair_perceptual: self.hair_perceptual * k,
            hair_pixel: self.hair_pixel * k,
        }
    }
}

/// Generator side of the adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorAdversarial {
    /// Minimize `-log D(G(..))`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(G(..)))`, the literal minimax form.
    Saturating,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub hair: f64,
    pub pix: f64,
    pub style: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.hair, self.pix, self.style, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form: saturates without overflowing exp() in either direction.
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(LOG_EPS, 1.0)?.log()?)
}

fn check_scales(real: &[Tensor], what: &str) -> Result<()> {
    if real.is_empty() {
        return Err(Error::Argument(format!("{what}: no score maps")));
    }
    for s in real {
        crate::nn::ensure_finite(s, what)?;
    }
    Ok(())
}

/// Mean over scales of the per-scale patch mean.
fn mean_over_scales(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    let sum = terms
        .into_iter()
        .reduce(|a, b| (a + b).expect("scalar add"))
        .expect("non-empty");
    Ok((sum / n)?)
}

/// Discriminator loss `-[log D(real) + log(1 - D(fake))]` on patch logits.
pub fn adversarial_loss_d(real_scores: &[Tensor], fake_scores: &[Tensor]) -> Result<Tensor> {
    check_scales(real_scores, "adv_d")?;
    check_scales(fake_scores, "adv_d")?;
    if real_scores.len() != fake_scores.len() {
        return Err(Error::Argument(format!(
            "adv_d: {} real scales vs {} fake scales",
            real_scores.len(),
            fake_scores.len()
        )));
    }
    let terms = real_scores
        .iter()
        .zip(fake_scores)
        .map(|(r, f)| {
            let real = clamped_log(&sigmoid(r)?)?.mean_all()?;
            let fake = clamped_log(&(1.0 - sigmoid(f)?)?)?.mean_all()?;
            Ok((real + fake)?.neg()?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// Generator adversarial loss on fake patch logits.
pub fn adversarial_loss_g(fake_scores: &[Tensor], mode: GeneratorAdversarial) -> Result<Tensor> {
    check_scales(fake_scores, "adv_g")?;
    let terms = fake_scores
        .iter()
        .map(|f| {
            let p = sigmoid(f)?;
            Ok(match mode {
                GeneratorAdversarial::NonSaturating => clamped_log(&p)?.mean_all()?.neg()?,
                GeneratorAdversarial::Saturating => clamped_log(&(1.0 - p)?)?.mean_all()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims(a, b, "l1")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean over tap layers of the per-layer mean absolute feature difference.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    same_dims(a, b, "perceptual")?;
    let fa = extractor.forward(a)?;
    let fb = extractor.forward(b)?;
    let n = fa.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = l1(x, y)?;
        acc = Some(match acc {
            Some(s) => (s + d)?,
            None => d,
        });
    }
    Ok((acc.expect("at least one tap") / n)?)
}

/// `hair_perceptual * perceptual(H_ref, H_fake) + hair_pixel * L1(H_ref, H_fake)`.
pub fn hair_loss(
    hair_ref: &Tensor,
    hair_fake: &Tensor,
    extractor: &PerceptualExtractor,
    weights: &LossWeights,
) -> Result<Tensor> {
    same_dims(hair_ref, hair_fake, "hair")?;
    let pixel = (l1(hair_ref, hair_fake)? * weights.hair_pixel)?;
    if weights.hair_perceptual == 0.0 {
        return Ok(pixel);
    }
    let perceptual = (perceptual_distance(hair_ref, hair_fake, extractor)? * weights.hair_perceptual)?;
    Ok((perceptual + pixel)?)
}

pub fn pixel_loss(input: &Tensor, fake: &Tensor) -> Result<Tensor> {
    same_dims(input, fake, "pix")?;
    l1(input, fake)
}

/// Mean absolute difference of two style batches `(N, D)`.
pub fn style_reconstruction_loss(style_ref: &Tensor, style_fake: &Tensor) -> Result<Tensor> {
    same_dims(style_ref, style_fake, "style")?;
    l1(style_ref, style_fake)
}

/// Encode both hair images and compare their styles.
pub fn style_reconstruction_loss_with(
    hair_ref: &Tensor,
    hair_fake: &Tensor,
    encoder: &StyleEncoder,
) -> Result<Tensor> {
    let a = encoder.forward(hair_ref)?;
    let b = encoder.forward(hair_fake)?;
    style_reconstruction_loss(&a, &b)
}

/// The four generator-side terms computed on one batch.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub pix: Tensor,
    pub hair: Tensor,
    pub adv: Tensor,
    pub style: Tensor,
}

/// Weighted generator objective plus the scalar report (step/epoch/adv_d left zero).
pub fn total_generator_objective(
    terms: &GeneratorTerms,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let pix = scalar(&terms.pix)?;
    let hair = scalar(&terms.hair)?;
    let adv = scalar(&terms.adv)?;
    let style = scalar(&terms.style)?;
    for (name, v) in [("pix", pix), ("hair", hair), ("adv_g", adv), ("style", style)] {
        if !v.is_finite() {
            return Err(Error::numeric(name));
        }
    }
    let total = ((&terms.pix * weights.pix)?
        + (&terms.hair * weights.hair)?
        + (&terms.adv * weights.adv)?
        + (&terms.style * weights.style)?)?;
    let total_g = scalar(&total)?;
    if !total_g.is_finite() {
        return Err(Error::numeric("total_g"));
    }
    Ok((
        total,
        LossReport {
            adv_g: adv,
            hair,
            pix,
            style,
            total_g,
            ..LossReport::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn d_loss_at_even_odds() {
        // logit 0 -> p = 0.5 -> -(log .5 + log .5)
        let s = vec![filled(&[1, 1, 14, 14], 0.0), filled(&[1, 1, 6, 6], 0.0)];
        let v = scalar(&adversarial_loss_d(&s, &s).unwrap()).unwrap();
        assert!((v - 1.3863).abs() < 1e-4, "{v}");
        let single = scalar(&adversarial_loss_d(&s[..1], &s[..1]).unwrap()).unwrap();
        assert!((v - single).abs() < 1e-12);
    }

    #[test]
    fn d_loss_confident_correct_goes_to_zero() {
        let real = vec![filled(&[2, 1, 3, 3], 40.0)];
        let fake = vec![filled(&[2, 1, 3, 3], -40.0)];
        let v = scalar(&adversarial_loss_d(&real, &fake).unwrap()).unwrap();
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn g_loss_values() {
        let half = vec![filled(&[1, 1, 4, 4], 0.0)];
        let v = scalar(&adversarial_loss_g(&half, GeneratorAdversarial::NonSaturating).unwrap()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-4);
        let sure = vec![filled(&[1, 1, 4, 4], 40.0)];
        let v = scalar(&adversarial_loss_g(&sure, GeneratorAdversarial::NonSaturating).unwrap()).unwrap();
        assert!(v.abs() < 1e-6);
        let hopeless = vec![filled(&[1, 1, 4, 4], -1e4)];
        let v = scalar(&adversarial_loss_g(&hopeless, GeneratorAdversarial::NonSaturating).unwrap()).unwrap();
        assert!(v.is_finite() && v <= -(LOG_EPS.ln()) + 1e-9, "{v}");
    }

    #[test]
    fn nan_scores_are_numeric_errors() {
        let bad = vec![Tensor::from_vec(vec![f32::NAN, 0.0], (1, 1, 1, 2), &Device::Cpu).unwrap()];
        assert!(matches!(adversarial_loss_d(&bad, &bad), Err(Error::Numeric { .. })));
        assert!(matches!(
            adversarial_loss_g(&bad, GeneratorAdversarial::NonSaturating),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn d_loss_monotone_in_scalar_scores() {
        let d = |r: f64, f: f64| {
            scalar(&adversarial_loss_d(&[filled(&[1], r)], &[filled(&[1], f)]).unwrap()).unwrap()
        };
        let grid = [-3.0, -1.0, 0.0, 0.5, 2.0, 4.0];
        for w in grid.windows(2) {
            assert!(d(w[1], 0.0) < d(w[0], 0.0));
            assert!(d(0.0, w[0]) < d(0.0, w[1]));
        }
    }

    #[test]
    fn pixel_loss_cases() {
        let ones = filled(&[1, 3, 4, 4], 1.0);
        let zeros = filled(&[1, 3, 4, 4], 0.0);
        assert_eq!(scalar(&pixel_loss(&ones, &ones).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&pixel_loss(&ones, &zeros).unwrap()).unwrap(), 1.0);
        let a = Tensor::arange(0u32, 48, &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let a = (a / 48.0).unwrap().reshape((1, 3, 4, 4)).unwrap();
        let b = (1.0 - &a).unwrap();
        let base = scalar(&pixel_loss(&a, &b).unwrap()).unwrap();
        for alpha in [0.0, 0.3, 1.0] {
            let scaled = scalar(&pixel_loss(&(&a * alpha).unwrap(), &(&b * alpha).unwrap()).unwrap()).unwrap();
            assert!((scaled - alpha * base).abs() < 1e-12);
        }
        assert!(matches!(
            pixel_loss(&ones, &filled(&[1, 3, 4, 5], 0.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn style_loss_nonnegative_and_zero_on_equal() {
        let a = Tensor::arange(0f64, 512.0, &Device::Cpu).unwrap().reshape((1, 512)).unwrap();
        assert_eq!(scalar(&style_reconstruction_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let b = (&a * -0.5).unwrap();
        assert!(scalar(&style_reconstruction_loss(&a, &b).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn total_objective_arithmetic() {
        let t = |v: f64| filled(&[], v);
        let terms = GeneratorTerms {
            pix: t(0.5),
            hair: t(0.2),
            adv: t(0.1),
            style: t(0.3),
        };
        let (total, report) = total_generator_objective(&terms, &LossWeights::default()).unwrap();
        assert!((scalar(&total).unwrap() - 1.1).abs() < 1e-12);
        assert_eq!(report.pix, 0.5);
        let zero = LossWeights::default().scaled(0.0);
        assert_eq!(total_generator_objective(&terms, &zero).unwrap().1.total_g, 0.0);
        let doubled = total_generator_objective(&terms, &LossWeights::default().scaled(2.0)).unwrap();
        assert!((doubled.1.total_g - 2.2).abs() < 1e-12);
    }

    #[test]
    fn total_objective_names_bad_term() {
        let t = |v: f64| filled(&[], v);
        let terms = GeneratorTerms {
            pix: t(0.5),
            hair: t(f64::NAN),
            adv: t(0.1),
            style: t(0.3),
        };
        match total_generator_objective(&terms, &LossWeights::default()) {
            Err(Error::Numeric { term, .. }) => assert_eq!(term, "hair"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            adv: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
