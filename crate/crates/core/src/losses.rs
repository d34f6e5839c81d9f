//! Training losses: conditional adversarial terms, L1 pixel loss, feature
//! reconstruction loss, Gram-matrix style loss and the weighted generator
//! objective. Each loss has a value function and, where the trainer needs
//! it, a gradient function with respect to its first argument.

use serde::{Deserialize, Serialize};
use xmodal_nn::{Shape, Tensor};

use crate::error::{Error, Result};

/// Embedding output. `dims = (C, H, W)` of the feature map it came from;
/// pooled vectors have `H = W = 1` so the normalizer `C*H*W` is `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    dims: (usize, usize, usize),
}

impl FeatureVector {
    /// A pooled `d`-vector.
    pub fn pooled(values: Vec<f64>) -> Result<Self> {
        let d = values.len();
        Self::from_map(values, (d, 1, 1))
    }

    /// A `C x H x W` feature map stored channel-major.
    pub fn from_map(values: Vec<f64>, dims: (usize, usize, usize)) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("feature vector must be non-empty".into()));
        }
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Shape(format!(
                "{} feature values for dims {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "feature vector".into(),
            });
        }
        Ok(Self { values, dims })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `C_j * H_j * W_j`.
    pub fn normalizer(&self) -> f64 {
        (self.dims.0 * self.dims.1 * self.dims.2) as f64
    }

    pub fn scaled(&self, c: f64) -> FeatureVector {
        FeatureVector {
            values: self.values.iter().map(|v| v * c).collect(),
            dims: self.dims,
        }
    }

    fn check_pair(&self, other: &FeatureVector) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "feature dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Row-major `C x C` Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.dim + b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pixel (L1) weight.
    pub lambda: f64,
    /// Feature reconstruction weight.
    pub beta: f64,
    /// Style reconstruction weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            beta: 0.25,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted generator-side terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub adversarial_g: f64,
    pub pixel: f64,
    pub feature: f64,
    pub style: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub pixel: f64,
    pub feature: f64,
    pub style: f64,
    pub total_g: f64,
}

fn check_logits(logits: &Tensor, what: &str) -> Result<()> {
    if logits.data().is_empty() {
        return Err(Error::Empty(format!("{what} logits")));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            component: format!("{what} logits"),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of `logits` against a constant `target`, and
/// its gradient. Computed in the overflow-free form
/// `max(x, 0) - x t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> (f64, Tensor) {
    let n = logits.data().len() as f64;
    let mut loss = 0.0;
    let grad = logits.map(|x| {
        let sig = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        (sig - target) / n
    });
    for &x in logits.data() {
        loss += x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
    }
    (loss / n, grad)
}

/// Discriminator loss: BCE of real logits against 1 plus BCE of fake
/// logits against 0, each averaged over patches and batch.
pub fn adversarial_loss_d(real_logits: &Tensor, fake_logits: &Tensor) -> Result<f64> {
    Ok(adversarial_loss_d_grad(real_logits, fake_logits)?.0)
}

/// [`adversarial_loss_d`] with gradients for the real and fake logits.
pub fn adversarial_loss_d_grad(
    real_logits: &Tensor,
    fake_logits: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    check_logits(real_logits, "real")?;
    check_logits(fake_logits, "fake")?;
    let (lr, gr) = bce_with_logits(real_logits, 1.0);
    let (lf, gf) = bce_with_logits(fake_logits, 0.0);
    Ok((lr + lf, gr, gf))
}

/// Non-saturating generator loss: BCE of fake logits against 1.
pub fn adversarial_loss_g(fake_logits: &Tensor) -> Result<f64> {
    Ok(adversarial_loss_g_grad(fake_logits)?.0)
}

pub fn adversarial_loss_g_grad(fake_logits: &Tensor) -> Result<(f64, Tensor)> {
    check_logits(fake_logits, "fake")?;
    Ok(bce_with_logits(fake_logits, 1.0))
}

fn check_same_shape(a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} vs {b}")));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn pixel_loss(fake: &Tensor, real: &Tensor) -> Result<f64> {
    check_same_shape(fake.shape(), real.shape())?;
    let n = fake.data().len() as f64;
    Ok(fake
        .data()
        .iter()
        .zip(real.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Gradient of [`pixel_loss`] with respect to `fake` (`sign(0) = 0`).
pub fn pixel_loss_grad(fake: &Tensor, real: &Tensor) -> Result<Tensor> {
    check_same_shape(fake.shape(), real.shape())?;
    let n = fake.data().len() as f64;
    let data = fake
        .data()
        .iter()
        .zip(real.data())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(fake.shape(), data)?)
}

/// Squared Euclidean distance divided by `C*H*W`.
pub fn feature_loss(fake: &FeatureVector, real: &FeatureVector) -> Result<f64> {
    fake.check_pair(real)?;
    let sq: f64 = fake
        .values
        .iter()
        .zip(&real.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / fake.normalizer())
}

pub fn feature_loss_grad(fake: &FeatureVector, real: &FeatureVector) -> Result<Vec<f64>> {
    fake.check_pair(real)?;
    let k = 2.0 / fake.normalizer();
    Ok(fake
        .values
        .iter()
        .zip(&real.values)
        .map(|(a, b)| k * (a - b))
        .collect())
}

/// `F F^T / (C*H*W)` where `F` is the `C x (H*W)` feature map; for pooled
/// features this is the outer product divided by `d`.
pub fn gram(feat: &FeatureVector) -> GramMatrix {
    let (c, h, w) = feat.dims;
    let hw = h * w;
    let norm = feat.normalizer();
    let mut values = vec![0.0; c * c];
    xmodal_nn::gemm(
        false,
        true,
        c,
        c,
        hw,
        &feat.values,
        &feat.values,
        0.0,
        &mut values,
    );
    values.iter_mut().for_each(|v| *v /= norm);
    // exact symmetry regardless of the kernel's summation order
    for a in 0..c {
        for b in (a + 1)..c {
            values[b * c + a] = values[a * c + b];
        }
    }
    GramMatrix { dim: c, values }
}

/// Squared Frobenius norm of `gram(fake) - gram(real)`.
pub fn style_loss(fake: &FeatureVector, real: &FeatureVector) -> Result<f64> {
    fake.check_pair(real)?;
    let gf = gram(fake);
    let gr = gram(real);
    Ok(gf
        .values
        .iter()
        .zip(&gr.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Gradient of [`style_loss`] with respect to the fake feature map:
/// `4 (G_fake - G_real) F_fake / (C*H*W)`.
pub fn style_loss_grad(fake: &FeatureVector, real: &FeatureVector) -> Result<Vec<f64>> {
    fake.check_pair(real)?;
    let (c, h, w) = fake.dims;
    let hw = h * w;
    let gf = gram(fake);
    let gr = gram(real);
    let diff: Vec<f64> = gf
        .values
        .iter()
        .zip(&gr.values)
        .map(|(a, b)| a - b)
        .collect();
    let mut out = vec![0.0; c * hw];
    xmodal_nn::gemm(false, false, c, hw, c, &diff, &fake.values, 0.0, &mut out);
    let k = 4.0 / fake.normalizer();
    out.iter_mut().for_each(|v| *v *= k);
    Ok(out)
}

/// Weighted generator objective
/// `adversarial_g + lambda*pixel + beta*feature + gamma*style`.
/// `adversarial_d` of the result is zero; the trainer fills it in.
pub fn composite_generator_loss(parts: &GeneratorTerms, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    for (name, v) in [
        ("adversarial_g", parts.adversarial_g),
        ("pixel", parts.pixel),
        ("feature", parts.feature),
        ("style", parts.style),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
            });
        }
    }
    Ok(LossBreakdown {
        adversarial_g: parts.adversarial_g,
        adversarial_d: 0.0,
        pixel: parts.pixel,
        feature: parts.feature,
        style: parts.style,
        total_g: parts.adversarial_g
            + w.lambda * parts.pixel
            + w.beta * parts.feature
            + w.gamma * parts.style,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data.to_vec()).unwrap()
    }

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::pooled(values.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2_per_term() {
        let z = t(&[0.0; 4]);
        let d = adversarial_loss_d(&z, &z).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((adversarial_loss_g(&z).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_and_generator_limits() {
        let real = t(&[1e3, 800.0]);
        let fake = t(&[-1e3, -900.0]);
        assert!(adversarial_loss_d(&real, &fake).unwrap() < 1e-300);
        assert!(adversarial_loss_g(&t(&[1e3, 1e3])).unwrap() < 1e-300);
    }

    #[test]
    fn nan_logits_are_rejected() {
        let bad = t(&[f64::NAN]);
        assert!(matches!(
            adversarial_loss_d(&bad, &t(&[0.0])),
            Err(Error::NonFinite { .. })
        ));
        assert!(adversarial_loss_g(&bad).is_err());
    }

    #[test]
    fn pixel_loss_analytic_values() {
        let zeros = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let ones = Tensor::full(Shape::new(2, 3, 4, 4), 1.0);
        assert_eq!(pixel_loss(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(pixel_loss(&ones, &ones).unwrap(), 0.0);
        assert!(pixel_loss(&zeros, &Tensor::zeros(Shape::new(1, 3, 4, 4))).is_err());
    }

    #[test]
    fn feature_loss_hand_values() {
        assert_eq!(
            feature_loss(&fv(&[0.0, 0.0]), &fv(&[3.0, 4.0])).unwrap(),
            12.5
        );
        let d = 2048;
        let mut unit = vec![0.0; d];
        unit[17] = 1.0;
        let l = feature_loss(&fv(&vec![0.0; d]), &fv(&unit)).unwrap();
        assert_eq!(l, 1.0 / 2048.0);
        assert!(feature_loss(&fv(&[1.0]), &fv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn gram_hand_values() {
        let g = gram(&fv(&[1.0, 2.0]));
        assert_eq!(g.values, vec![0.5, 1.0, 1.0, 2.0]);
        assert!(gram(&fv(&[0.0, 0.0, 0.0])).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_loss_hand_value() {
        assert_eq!(style_loss(&fv(&[2.0]), &fv(&[1.0])).unwrap(), 9.0);
        assert_eq!(
            style_loss(&fv(&[1.0, -3.0]), &fv(&[1.0, -3.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn composite_examples() {
        let parts = GeneratorTerms {
            adversarial_g: 0.7,
            pixel: 0.2,
            feature: 0.4,
            style: 1.0,
        };
        let b = composite_generator_loss(&parts, &LossWeights::default()).unwrap();
        assert!((b.total_g - 2.9).abs() < 1e-12);
        let zero =
            composite_generator_loss(&GeneratorTerms::default(), &LossWeights::default()).unwrap();
        assert_eq!(zero.total_g, 0.0);
        let w0 = LossWeights {
            lambda: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(composite_generator_loss(&parts, &w0).unwrap().total_g, 0.7);
        let neg = LossWeights {
            lambda: -1.0,
            ..LossWeights::default()
        };
        assert!(composite_generator_loss(&parts, &neg).is_err());
    }

    #[test]
    fn spatial_gram_uses_full_normalizer() {
        // C=2, H=1, W=2: F = [[1, 2], [3, 4]]
        let f = FeatureVector::from_map(vec![1.0, 2.0, 3.0, 4.0], (2, 1, 2)).unwrap();
        let g = gram(&f);
        assert_eq!(
            g.values,
            vec![5.0 / 4.0, 11.0 / 4.0, 11.0 / 4.0, 25.0 / 4.0]
        );
    }
}
