//! Training objectives for the tokenizer, image decoder and discriminators.
//!
//! All norm terms reduce by elementwise mean, so weights do not depend on the
//! image resolution. Every function works on any float dtype.

pub mod plugins;

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

pub use plugins::{FeatureNet, RandomConvFeatures, RandomPatchTeacher, ScaledIdentity, Teacher};

pub const SSL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub codebook: f64,
    pub ssl: f64,
    pub generator: f64,
    /// Commitment weight inside the codebook loss.
    pub beta: f64,
    /// Generator and discriminator terms are inactive before this step.
    pub adversarial_start_step: u64,
}

impl LossWeights {
    /// Starting point of the ablations: the GAIA-1 weights.
    pub fn gaia_seed() -> Self {
        Self {
            l1: 0.2,
            l2: 2.0,
            perceptual: 0.1,
            codebook: 1.0,
            ssl: 0.1,
            generator: 1.0,
            beta: 0.25,
            adversarial_start_step: 20_000,
        }
    }

    /// Final tokenizer recipe: perceptual and generator weights raised to 1.
    pub fn proposed() -> Self {
        Self {
            perceptual: 1.0,
            generator: 1.0,
            ..Self::gaia_seed()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("perceptual", self.perceptual),
            ("codebook", self.codebook),
            ("ssl", self.ssl),
            ("generator", self.generator),
            ("beta", self.beta),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn adversarial_active(&self, step: u64) -> bool {
        self.generator > 0.0 && step >= self.adversarial_start_step
    }

    /// Zeroes the weight of one term.
    pub fn without(mut self, term: LossTerm) -> Self {
        match term {
            LossTerm::Ssl => self.ssl = 0.0,
            LossTerm::Perceptual => self.perceptual = 0.0,
            LossTerm::L2 => self.l2 = 0.0,
            LossTerm::Generator => self.generator = 0.0,
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Ssl,
    Perceptual,
    L2,
    Generator,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Ssl, LossTerm::Perceptual, LossTerm::L2, LossTerm::Generator];

    pub fn label(self) -> &'static str {
        match self {
            LossTerm::Ssl => "-J_SSL",
            LossTerm::Perceptual => "-J'",
            LossTerm::L2 => "-J_L2",
            LossTerm::Generator => "-J_G",
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: shapes differ {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "l1")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "l2")?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// `sum_l mean((phi_l(x_hat) - phi_l(x))^2)`.
pub fn perceptual_loss(x_hat: &Tensor, x: &Tensor, phi: &dyn FeatureNet) -> Result<Tensor> {
    check_same(x_hat, x, "perceptual")?;
    if phi.num_layers() == 0 {
        return Err(Error::Config(format!("feature net {} declares no layers", phi.name())));
    }
    let fa = phi.features(x_hat)?;
    let fb = phi.features(x)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let term = mse_loss(a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `l1 * mean|x_hat - x| + l2 * mean(x_hat - x)^2 + perceptual * J'`.
/// Terms with zero weight are not evaluated.
pub fn reconstruction_loss(
    x_hat: &Tensor,
    x: &Tensor,
    w: &LossWeights,
    phi: Option<&dyn FeatureNet>,
) -> Result<Tensor> {
    check_same(x_hat, x, "reconstruction")?;
    let mut total = x_hat.zeros_like()?.sum_all()?;
    if w.l1 > 0.0 {
        total = (total + (l1_loss(x_hat, x)? * w.l1)?)?;
    }
    if w.l2 > 0.0 {
        total = (total + (mse_loss(x_hat, x)? * w.l2)?)?;
    }
    if w.perceptual > 0.0 {
        let phi = phi.ok_or_else(|| {
            Error::Config("perceptual weight > 0 but no feature network configured".into())
        })?;
        total = (total + (perceptual_loss(x_hat, x, phi)? * w.perceptual)?)?;
    }
    Ok(total)
}

/// `mean(sg(z~) - z)^2 + beta * mean(z~ - sg(z))^2`: the first term moves the
/// codebook, the second commits the encoder.
pub fn codebook_loss(quantized: &Tensor, latents: &Tensor, beta: f64) -> Result<Tensor> {
    check_same(quantized, latents, "codebook")?;
    let embedding = mse_loss(&latents.detach(), quantized)?;
    let commitment = mse_loss(latents, &quantized.detach())?;
    Ok((embedding + (commitment * beta)?)?)
}

/// Mean over positions of `1 - <t, z> / max(|t| |z|, eps)` for `[N, D]` rows.
pub fn cosine_distillation_loss(adapted: &Tensor, teacher: &Tensor, eps: f64) -> Result<Tensor> {
    if adapted.dims() != teacher.dims() {
        return Err(Error::Config(format!(
            "teacher features {:?} do not match adapter output {:?}",
            teacher.dims(),
            adapted.dims()
        )));
    }
    let last = adapted.rank() - 1;
    let dot = (adapted * teacher)?.sum(last)?;
    let na = adapted.sqr()?.sum(last)?.sqrt()?;
    let nt = teacher.sqr()?.sum(last)?.sqrt()?;
    let denom = (na * nt)?.clamp(eps, f64::INFINITY)?;
    let cos = (dot / denom)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Fully connected adapter from token space (`d`) to teacher space.
#[derive(Debug, Clone)]
pub struct SslAdapter {
    fc: Linear,
    out_dim: usize,
}

impl SslAdapter {
    pub fn new(vs: &Scope, code_dim: usize, teacher_dim: usize) -> Result<Self> {
        let bound = 1.0 / (code_dim as f64).sqrt();
        let w = vs.get("weight", &[teacher_dim, code_dim], Init::Uniform(bound))?;
        let b = vs.get("bias", &[teacher_dim], Init::Zeros)?;
        Ok(Self {
            fc: Linear::new(w, Some(b)),
            out_dim: teacher_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `[B, d, h, w]` tokens to `[B, h*w, D]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = tokens.dims4()?;
        let rows = tokens.permute((0, 2, 3, 1))?.reshape((b, h * w, d))?;
        Ok(self.fc.forward(&rows)?)
    }
}

/// Distillation loss through the adapter: `tokens` are the quantized tokens,
/// `teacher` the `[B, n, D]` teacher features.
pub fn ssl_loss(adapter: &SslAdapter, tokens: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let adapted = adapter.forward(tokens)?;
    cosine_distillation_loss(&adapted, teacher, SSL_EPS)
}

/// `-mean(D(x_hat))`.
pub fn generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// `0.5 * (mean ReLU(1 - D(x)) + mean ReLU(1 + D(x_hat)))`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = real_logits.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_logits.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Component values feeding [`total_loss`]; `None` means not evaluated.
#[derive(Debug, Clone, Default)]
pub struct LossComponents {
    pub reconstruction: Option<Tensor>,
    pub codebook: Option<Tensor>,
    pub ssl: Option<Tensor>,
    pub generator: Option<Tensor>,
}

/// `J_rec + l_cb J_cb + l_ssl J_ssl + l_g J_g`, with `l_g` forced to 0 before
/// the adversarial start step. NaN components abort with the component's name.
pub fn total_loss(c: &LossComponents, w: &LossWeights, step: u64) -> Result<Tensor> {
    let generator_weight = if w.adversarial_active(step) { w.generator } else { 0.0 };
    let terms = [
        ("reconstruction", &c.reconstruction, 1.0),
        ("codebook", &c.codebook, w.codebook),
        ("ssl", &c.ssl, w.ssl),
        ("generator", &c.generator, generator_weight),
    ];
    let mut total: Option<Tensor> = None;
    for (name, value, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let value = value.as_ref().ok_or_else(|| {
            Error::Config(format!("{name} term has weight {weight} but was not evaluated"))
        })?;
        let v = value.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Numerical {
                component: name.to_string(),
                reason: format!("value {v}"),
            });
        }
        let term = (value * weight)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::Config("every loss term is disabled".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn reconstruction_closed_forms() {
        let x = rand(&[2, 3, 4, 4], 1);
        let w = LossWeights { perceptual: 0.0, ..LossWeights::gaia_seed() };
        assert_eq!(scalar(&reconstruction_loss(&x, &x, &w, None).unwrap()), 0.0);
        let shifted = (&x + 1.0).unwrap();
        let v = scalar(&reconstruction_loss(&shifted, &x, &w, None).unwrap());
        assert!((v - 2.2).abs() < 1e-12, "{v}");
        let needs_phi = LossWeights::gaia_seed();
        assert!(matches!(
            reconstruction_loss(&shifted, &x, &needs_phi, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn perceptual_reductions() {
        let a = rand(&[1, 3, 4, 4], 2);
        let b = rand(&[1, 3, 4, 4], 3);
        let one = ScaledIdentity { scales: vec![1.0] };
        let mse = scalar(&mse_loss(&a, &b).unwrap());
        assert!((scalar(&perceptual_loss(&a, &b, &one).unwrap()) - mse).abs() < 1e-12);
        let two = ScaledIdentity { scales: vec![1.0, 2.0] };
        assert!((scalar(&perceptual_loss(&a, &b, &two).unwrap()) - 5.0 * mse).abs() < 1e-12);
        assert_eq!(scalar(&perceptual_loss(&a, &a, &two).unwrap()), 0.0);
        let none = ScaledIdentity { scales: vec![] };
        assert!(perceptual_loss(&a, &b, &none).is_err());
    }

    #[test]
    fn codebook_closed_form() {
        let z = rand(&[2, 4, 3, 3], 4);
        let delta = rand(&[2, 4, 3, 3], 5);
        assert_eq!(scalar(&codebook_loss(&z, &z, 0.25).unwrap()), 0.0);
        let zt = (&z + &delta).unwrap();
        let expect = 1.25 * scalar(&delta.sqr().unwrap().mean_all().unwrap());
        assert!((scalar(&codebook_loss(&z, &zt, 0.25).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn codebook_gradient_routing() {
        let z = Var::from_tensor(&rand(&[6, 3], 6)).unwrap();
        let zt = Var::from_tensor(&rand(&[6, 3], 7)).unwrap();
        let loss = codebook_loss(z.as_tensor(), zt.as_tensor(), 0.25).unwrap();
        let g = loss.backward().unwrap();
        let n = 18.0;
        // d/dz of mean(sg(zt) - z)^2 = 2 (z - zt) / n ; d/dzt of beta mean(zt - sg(z))^2 = 2 beta (zt - z) / n
        let diff = (z.as_tensor() - zt.as_tensor()).unwrap();
        let gz_expect = (&diff * (2.0 / n)).unwrap();
        let gzt_expect = (&diff * (-0.5 / n)).unwrap();
        let close = |a: &Tensor, b: &Tensor| scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()) < 1e-12;
        assert!(close(g.get(&z).unwrap(), &gz_expect));
        assert!(close(g.get(&zt).unwrap(), &gzt_expect));
    }

    #[test]
    fn cosine_cases() {
        let t = rand(&[5, 7], 8);
        assert!(scalar(&cosine_distillation_loss(&(&t * 3.0).unwrap(), &t, SSL_EPS).unwrap()).abs() < 1e-12);
        let anti = t.neg().unwrap();
        assert!((scalar(&cosine_distillation_loss(&anti, &t, SSL_EPS).unwrap()) - 2.0).abs() < 1e-12);
        let a = Tensor::new(&[[1f64, 0.], [0., 2.]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0f64, 5.], [3., 0.]], &Device::Cpu).unwrap();
        assert!((scalar(&cosine_distillation_loss(&a, &b, SSL_EPS).unwrap()) - 1.0).abs() < 1e-12);
        let wrong = rand(&[5, 6], 9);
        assert!(matches!(cosine_distillation_loss(&wrong, &t, SSL_EPS), Err(Error::Config(_))));
    }

    #[test]
    fn adversarial_closed_forms() {
        let dev = Device::Cpu;
        let full = |v: f64| Tensor::full(v, (2, 1, 3, 3), &dev).unwrap();
        assert_eq!(scalar(&generator_loss(&full(0.5)).unwrap()), -0.5);
        assert_eq!(scalar(&generator_loss(&full(0.0)).unwrap()), 0.0);
        assert_eq!(scalar(&discriminator_loss(&full(1.0), &full(-1.0)).unwrap()), 0.0);
        assert_eq!(scalar(&discriminator_loss(&full(0.0), &full(0.0)).unwrap()), 1.0);
        assert_eq!(scalar(&discriminator_loss(&full(-1.0), &full(1.0)).unwrap()), 2.0);
        let mixed = rand(&[4, 4], 10);
        let mean: f64 = mixed.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().sum::<f64>() / 16.0;
        assert!((scalar(&generator_loss(&mixed).unwrap()) + mean).abs() < 1e-12);
    }

    #[test]
    fn total_weighting_and_gate() {
        let one = Tensor::new(1f64, &Device::Cpu).unwrap();
        let c = LossComponents {
            reconstruction: Some(one.clone()),
            codebook: Some(one.clone()),
            ssl: Some(one.clone()),
            generator: Some(one.clone()),
        };
        let w = LossWeights::gaia_seed();
        let after = scalar(&total_loss(&c, &w, 20_000).unwrap());
        assert!((after - 3.1).abs() < 1e-12);
        let before = scalar(&total_loss(&c, &w, 19_999).unwrap());
        let no_g = scalar(&total_loss(&c, &w.without(LossTerm::Generator), 19_999).unwrap());
        assert_eq!(before, no_g);
        assert!((before - 2.1).abs() < 1e-12);
    }

    #[test]
    fn nan_component_is_named() {
        let c = LossComponents {
            reconstruction: Some(Tensor::new(1f64, &Device::Cpu).unwrap()),
            codebook: Some(Tensor::new(f64::NAN, &Device::Cpu).unwrap()),
            ..Default::default()
        };
        let w = LossWeights { ssl: 0.0, generator: 0.0, ..LossWeights::gaia_seed() };
        match total_loss(&c, &w, 0) {
            Err(Error::Numerical { component, .. }) => assert_eq!(component, "codebook"),
            other => panic!("{other:?}"),
        }
    }
}
