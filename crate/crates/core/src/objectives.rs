//! Adversarial losses, the super-resolution auxiliary loss and differentiable augmentation.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{input_gradient, set_grad_enabled, Scalar, Tensor, GATHER_ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    WganGp,
    Hinge,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wgan-gp" | "wgan_gp" => Some(LossKind::WganGp),
            "hinge" => Some(LossKind::Hinge),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::WganGp => "wgan-gp",
            LossKind::Hinge => "hinge",
        }
    }
}

/// Probabilities of applying translation, cutout and color jitter to an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugProbs {
    pub translation: f64,
    pub cutout: f64,
    pub color: f64,
}

impl Default for AugProbs {
    fn default() -> Self {
        AugProbs { translation: 1.0, cutout: 0.3, color: 1.0 }
    }
}

impl AugProbs {
    pub const NONE: AugProbs = AugProbs { translation: 0.0, cutout: 0.0, color: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gp_weight: f64,
    pub sr_weight: f64,
    pub aug: AugProbs,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::WganGp, gp_weight: 10.0, sr_weight: 50.0, aug: AugProbs::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("aug_translation", self.aug.translation), ("aug_cutout", self.aug.cutout), ("aug_color", self.aug.color)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ConfigKey { key: key.into(), msg: format!("probability {p} outside [0, 1]") });
            }
        }
        for (key, w) in [("gp_weight", self.gp_weight), ("sr_weight", self.sr_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::ConfigKey { key: key.into(), msg: format!("weight {w} must be finite and >= 0") });
            }
        }
        Ok(())
    }
}

/// Color jitter factors for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

/// Sampled augmentation parameters for one image. `None` means the op is skipped.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AugSample {
    /// `(dy, dx)`; output pixel `(y, x)` reads input `(y - dy, x - dx)`, zero outside.
    pub translate: Option<(i64, i64)>,
    /// Center `(cy, cx)` of the zeroed square.
    pub cutout: Option<(usize, usize)>,
    pub color: Option<ColorJitter>,
}

/// Draws per-image augmentation parameters for a batch at `resolution`.
pub fn sample_augmentation<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    resolution: usize,
    probs: &AugProbs,
) -> Vec<AugSample> {
    let shift = resolution.div_ceil(8) as i64;
    (0..batch)
        .map(|_| {
            let mut s = AugSample::default();
            if rng.random::<f64>() < probs.translation {
                s.translate = Some((rng.random_range(-shift..=shift), rng.random_range(-shift..=shift)));
            }
            if rng.random::<f64>() < probs.cutout {
                s.cutout = Some((rng.random_range(0..resolution), rng.random_range(0..resolution)));
            }
            if rng.random::<f64>() < probs.color {
                s.color = Some(ColorJitter {
                    brightness: rng.random_range(-0.5..0.5),
                    saturation: rng.random_range(0.0..2.0),
                    contrast: rng.random_range(0.5..1.5),
                });
            }
            s
        })
        .collect()
}

fn batch_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [b, h, w, 3] if h == w => Ok((*b, *h)),
        s => Err(Error::invalid("augment", format!("expected [B, H, H, 3], got {s:?}"))),
    }
}

/// Per-image constant broadcast to every pixel of a `[B, H, W, 3]` batch.
fn per_image<T: Scalar>(values: impl Iterator<Item = f64>, b: usize, h: usize) -> Result<Tensor<T>> {
    let per = h * h * 3;
    let data: Vec<T> = values.flat_map(|v| std::iter::repeat_n(T::lit(v), per)).collect();
    Tensor::from_vec(data, &[b, h, h, 3])
}

/// `m·a + (1-m)·x` with a 0/1 per-image mask, exact for unselected images.
fn select<T: Scalar>(aug: &Tensor<T>, x: &Tensor<T>, on: &[bool], h: usize) -> Result<Tensor<T>> {
    let b = on.len();
    let m = per_image::<T>(on.iter().map(|&o| if o { 1.0 } else { 0.0 }), b, h)?;
    let keep = per_image::<T>(on.iter().map(|&o| if o { 0.0 } else { 1.0 }), b, h)?;
    aug.mul(&m)?.add(&x.mul(&keep)?)
}

/// Applies fixed augmentation parameters to a `[B, H, W, 3]` batch.
///
/// Translation, then cutout, then color (brightness, saturation, contrast).
/// Every op is differentiable with respect to the pixels.
pub fn apply_augmentation<T: Scalar>(x: &Tensor<T>, samples: &[AugSample]) -> Result<Tensor<T>> {
    let (b, h) = batch_dims(x)?;
    if samples.len() != b {
        return Err(Error::invalid("augment", format!("{} samples for a batch of {b}", samples.len())));
    }
    let mut out = x.clone();
    let per = h * h * 3;

    if samples.iter().any(|s| s.translate.is_some()) {
        let mut index = Vec::with_capacity(b * per);
        for (i, s) in samples.iter().enumerate() {
            let (dy, dx) = s.translate.unwrap_or((0, 0));
            for y in 0..h as i64 {
                for xx in 0..h as i64 {
                    let (sy, sx) = (y - dy, xx - dx);
                    let inside = (0..h as i64).contains(&sy) && (0..h as i64).contains(&sx);
                    for c in 0..3 {
                        index.push(if inside { i * per + ((sy as usize * h + sx as usize) * 3 + c) } else { GATHER_ZERO });
                    }
                }
            }
        }
        out = out.gather(Rc::new(index), &[b, h, h, 3])?;
    }

    if samples.iter().any(|s| s.cutout.is_some()) {
        let side = h / 2;
        let mut mask = vec![T::one(); b * per];
        for (i, s) in samples.iter().enumerate() {
            if let Some((cy, cx)) = s.cutout {
                let (y0, x0) = (cy.saturating_sub(side / 2), cx.saturating_sub(side / 2));
                let (y1, x1) = ((cy + side - side / 2).min(h), (cx + side - side / 2).min(h));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        for c in 0..3 {
                            mask[i * per + (y * h + xx) * 3 + c] = T::zero();
                        }
                    }
                }
            }
        }
        out = out.mul(&Tensor::from_vec(mask, &[b, h, h, 3])?)?;
    }

    let on: Vec<bool> = samples.iter().map(|s| s.color.is_some()).collect();
    if on.iter().any(|&o| o) {
        let jitter: Vec<ColorJitter> = samples
            .iter()
            .map(|s| s.color.unwrap_or(ColorJitter { brightness: 0.0, saturation: 1.0, contrast: 1.0 }))
            .collect();
        let shape = [b, h, h, 3];
        let bright = per_image::<T>(jitter.iter().map(|j| j.brightness), b, h)?;
        let y = out.add(&bright)?;
        let pix_mean = y.mean_axis(-1, true)?.broadcast_to(&shape)?;
        let sat = per_image::<T>(jitter.iter().map(|j| j.saturation), b, h)?;
        let y = y.sub(&pix_mean)?.mul(&sat)?.add(&pix_mean)?;
        let img_mean = y.reshape(&[b, per])?.mean_axis(-1, true)?.broadcast_to(&[b, per])?.reshape(&shape)?;
        let con = per_image::<T>(jitter.iter().map(|j| j.contrast), b, h)?;
        let y = y.sub(&img_mean)?.mul(&con)?.add(&img_mean)?;
        out = if on.iter().all(|&o| o) { y } else { select(&y, &out, &on, h)? };
    }
    Ok(out)
}

/// Samples parameters from `rng` and applies them.
pub fn diff_augment<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, probs: &AugProbs, rng: &mut R) -> Result<Tensor<T>> {
    let (b, h) = batch_dims(x)?;
    apply_augmentation(x, &sample_augmentation(rng, b, h, probs))
}

/// Gradient penalty `λ·mean((‖∇D(x̂)‖₂ - 1)²)` at `x̂ = ε·real + (1-ε)·fake`
/// with one `ε` per image. Differentiable with respect to the critic's parameters.
pub fn gradient_penalty<T: Scalar, F>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[f64], critic: &F, weight: f64) -> Result<Tensor<T>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if real.shape() != fake.shape() {
        return Err(Error::shape("gradient_penalty", real.shape(), fake.shape()));
    }
    let (b, h) = batch_dims(real)?;
    if eps.len() != b {
        return Err(Error::invalid("gradient_penalty", format!("{} mixing weights for {b} images", eps.len())));
    }
    let e = per_image::<T>(eps.iter().copied(), b, h)?;
    let one_minus = per_image::<T>(eps.iter().map(|v| 1.0 - v), b, h)?;
    let mixed = real.detach().mul(&e)?.add(&fake.detach().mul(&one_minus)?)?;
    let x_hat = mixed.detach().with_requires_grad(true);
    // the penalty needs the input gradient even when called under `no_grad`
    let grad = {
        let _on = set_grad_enabled(true);
        let score = critic(&x_hat)?.sum();
        input_gradient(&score, &x_hat)?
    };
    let norm = grad.square().reshape(&[b, h * h * 3])?.sum_axis(-1, false)?.sqrt();
    Ok(norm.add_scalar(-1.0).square().mean().mul_scalar(weight))
}

/// Components of a discriminator loss.
#[derive(Clone, Debug)]
pub struct DLoss<T: Scalar> {
    pub total: Tensor<T>,
    /// Adversarial part without the penalty.
    pub adversarial: Tensor<T>,
    pub gp: Tensor<T>,
}

/// `mean(D(fake)) - mean(D(real)) + λ_gp·GP`.
pub fn d_loss_wgan_gp<T: Scalar, F, R>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    critic: &F,
    gp_weight: f64,
    rng: &mut R,
) -> Result<DLoss<T>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    R: Rng + ?Sized,
{
    if real.shape() != fake.shape() {
        return Err(Error::shape("d_loss_wgan_gp", real.shape(), fake.shape()));
    }
    let (b, _) = batch_dims(real)?;
    let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let adversarial = critic(&fake.detach())?.mean().sub(&critic(real)?.mean())?;
    let gp = gradient_penalty(real, fake, &eps, critic, gp_weight)?;
    Ok(DLoss { total: adversarial.add(&gp)?, adversarial, gp })
}

/// `-mean(fake_scores)`.
pub fn g_loss_wgan<T: Scalar>(fake_scores: &Tensor<T>) -> Tensor<T> {
    fake_scores.mean().neg()
}

/// `(mean(relu(1 - real)) + mean(relu(1 + fake)), -mean(fake))`.
pub fn hinge_losses<T: Scalar>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let d_real = real_scores.neg().add_scalar(1.0).relu().mean();
    let d_fake = fake_scores.add_scalar(1.0).relu().mean();
    let d = d_real.add(&d_fake).expect("scalars");
    (d, fake_scores.mean().neg())
}

/// `λ·mean((sr - hr)²)`.
pub fn sr_auxiliary_loss<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    Ok(sr.sub(hr)?.square().mean().mul_scalar(weight))
}

/// `factor×` average pooling of `[B, H, W, 3]` images, as a constant.
pub fn average_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, h) = batch_dims(x)?;
    if factor == 0 || h % factor != 0 {
        return Err(Error::invalid("average_pool", format!("resolution {h} not divisible by {factor}")));
    }
    let lo = h / factor;
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let d = x.data();
    let mut out = vec![T::zero(); b * lo * lo * 3];
    for i in 0..b {
        for y in 0..h {
            for xx in 0..h {
                for c in 0..3 {
                    out[((i * lo + y / factor) * lo + xx / factor) * 3 + c] += d[((i * h + y) * h + xx) * 3 + c];
                }
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Tensor::from_vec(out, &[b, lo, lo, 3])
}
