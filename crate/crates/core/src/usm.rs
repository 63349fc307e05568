//! Unpaired semantic morphing: a deformation network that bends pinhole
//! images toward panoramic geometry, a discriminator scoring realness at
//! image and pixel level, and the losses tying them together.

use rand::Rng;

use crate::datamodel::{LabelMap, LabeledImage};
use crate::deformation::{integrate_velocity, warp_image, warp_labels, DeformationField, Interp, VelocityField};
use crate::error::{Error, Result};
use crate::nn::{module_fields, Conv2d, Module};
use crate::segnet::SegModel;
use crate::tensor::{no_grad, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Target for real samples in the discriminator loss; fakes use 0.
pub const REAL_TARGET: f64 = 0.9;

const LEAK: f64 = 0.2;

/// Luminance of an `(N, 3, H, W)` image, shape `(N, 1, H, W)`.
pub fn grayscale(img: &Tensor) -> Tensor {
    (0..3)
        .map(|c| img.narrow(1, c, 1).scale(LUMA[c]))
        .reduce(|a, b| a.add(&b))
        .expect("three channels")
}

/// Luminance standardized per image to zero mean and unit variance, so
/// the deformation network and discriminators compare structure rather
/// than overall brightness or contrast.
pub fn structure_view(img: &Tensor) -> Tensor {
    let gray = grayscale(img);
    let centered = gray.sub(&gray.mean_dims(&[1, 2, 3]));
    let std = centered.sqr().mean_dims(&[1, 2, 3]).add_scalar(1e-6).sqrt();
    centered.div(&std)
}

/// Appends two channels holding the normalized column and row, in
/// `[-1, 1]`, so convolutions can respond to where a pixel sits.
pub fn with_coords(x: &Tensor) -> Tensor {
    let (n, _, h, w) = x.dims4();
    let norm = |i: usize, len: usize| if len > 1 { 2.0 * i as f64 / (len - 1) as f64 - 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        data.extend((0..h * w).map(|i| norm(i % w, w)));
        data.extend((0..h * w).map(|i| norm(i / w, h)));
    }
    Tensor::cat(&[x.clone(), Tensor::new(data, &[n, 2, h, w])], 1)
}

/// Maps a (moving, fixed) grayscale pair to a velocity field at input
/// resolution.
pub trait VelocityNet: Module {
    fn velocity(&self, moving_gray: &Tensor, fixed_gray: &Tensor) -> Tensor;
}

/// Image-level and pixel-level realness logits.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `(N, 1, 1, 1)`
    pub image_logit: Tensor,
    /// `(N, 1, H, W)`
    pub pixel_logits: Tensor,
}

pub trait Discriminator: Module {
    fn discriminate(&self, gray: &Tensor) -> DiscOutput;
}

fn up_cat(low: &Tensor, skip: &Tensor) -> Tensor {
    let (_, _, h, w) = skip.dims4();
    Tensor::cat(&[low.resize_bilinear(h, w), skip.clone()], 1)
}

/// Three-level encoder-decoder with skip connections over the grayscale
/// pair plus pixel coordinates. The velocity head starts at zero, so a fresh network
/// produces the identity deformation. With a bound `b`, each velocity
/// component is squashed to `b · tanh(v / b)`.
#[derive(Clone, Debug)]
pub struct DeformationNetwork {
    pub enc: Vec<Conv2d>,
    pub dec: Vec<Conv2d>,
    pub head: Conv2d,
    pub bound: Option<f64>,
}

module_fields!(DeformationNetwork { enc, dec, head });

impl DeformationNetwork {
    pub fn new(width: usize, rng: &mut impl Rng) -> DeformationNetwork {
        let w = width;
        DeformationNetwork {
            enc: vec![
                Conv2d::new(4, w, 3, 1, rng),
                Conv2d::new(w, 2 * w, 3, 2, rng),
                Conv2d::new(2 * w, 2 * w, 3, 2, rng),
            ],
            dec: vec![Conv2d::new(4 * w, 2 * w, 3, 1, rng), Conv2d::new(3 * w, w, 3, 1, rng)],
            head: Conv2d::zeroed(w, 2, 3),
            bound: None,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> DeformationNetwork {
        self.bound = Some(bound);
        self
    }
}

impl VelocityNet for DeformationNetwork {
    fn velocity(&self, moving_gray: &Tensor, fixed_gray: &Tensor) -> Tensor {
        let x = with_coords(&Tensor::cat(&[moving_gray.clone(), fixed_gray.clone()], 1));
        let e0 = self.enc[0].forward(&x).relu();
        let e1 = self.enc[1].forward(&e0).relu();
        let e2 = self.enc[2].forward(&e1).relu();
        let d1 = self.dec[0].forward(&up_cat(&e2, &e1)).relu();
        let d0 = self.dec[1].forward(&up_cat(&d1, &e0)).relu();
        let v = self.head.forward(&d0);
        match self.bound {
            // b·tanh(v/b) = 2b·sigmoid(2v/b) − b
            Some(b) => v.scale(2.0 / b).sigmoid().scale(2.0 * b).add_scalar(-b),
            None => v,
        }
    }
}

/// U-shaped discriminator over the grayscale image plus pixel coordinates:
/// the encoder's deepest features are pooled into an image score, and a
/// decoder with skips produces a per-pixel score.
#[derive(Clone, Debug)]
pub struct DualViewDiscriminator {
    pub enc: Vec<Conv2d>,
    pub image_head: Conv2d,
    pub dec: Vec<Conv2d>,
    pub pixel_head: Conv2d,
}

module_fields!(DualViewDiscriminator { enc, image_head, dec, pixel_head });

impl DualViewDiscriminator {
    pub fn new(width: usize, rng: &mut impl Rng) -> DualViewDiscriminator {
        let w = width;
        DualViewDiscriminator {
            enc: vec![
                Conv2d::new(3, w, 3, 1, rng),
                Conv2d::new(w, 2 * w, 3, 2, rng),
                Conv2d::new(2 * w, 4 * w, 3, 2, rng),
                Conv2d::new(4 * w, 4 * w, 3, 2, rng),
            ],
            image_head: Conv2d::new(4 * w, 1, 1, 1, rng),
            dec: vec![
                Conv2d::new(8 * w, 2 * w, 3, 1, rng),
                Conv2d::new(4 * w, w, 3, 1, rng),
                Conv2d::new(2 * w, w, 3, 1, rng),
            ],
            pixel_head: Conv2d::new(w, 1, 1, 1, rng),
        }
    }
}

impl Discriminator for DualViewDiscriminator {
    fn discriminate(&self, gray: &Tensor) -> DiscOutput {
        let mut feats = Vec::with_capacity(self.enc.len());
        let mut x = with_coords(gray);
        for conv in &self.enc {
            x = conv.forward(&x).leaky_relu(LEAK);
            feats.push(x.clone());
        }
        let image_logit = self.image_head.forward(&x.mean_dims(&[2, 3]));
        let mut d = x;
        for (conv, skip) in self.dec.iter().zip(feats.iter().rev().skip(1)) {
            d = conv.forward(&up_cat(&d, skip)).leaky_relu(LEAK);
        }
        DiscOutput {
            image_logit,
            pixel_logits: self.pixel_head.forward(&d),
        }
    }
}

/// Which panoramic domain a discriminator contrasts warped pinhole images
/// against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    SourcePanoramic,
    TargetPanoramic,
}

impl Pairing {
    pub const ALL: [Pairing; 2] = [Pairing::SourcePanoramic, Pairing::TargetPanoramic];

    pub fn name(self) -> &'static str {
        match self {
            Pairing::SourcePanoramic => "src_pan",
            Pairing::TargetPanoramic => "tgt_pan",
        }
    }
}

/// Output of deforming a pinhole image toward a panoramic one.
#[derive(Clone, Debug)]
pub struct Morph {
    pub phi_i2a: DeformationField,
    pub phi_a2i: DeformationField,
    pub x_i2a: Tensor,
    pub y_i2a: Option<LabelMap>,
}

/// Integrates `±v` predicted for the pair and warps the moving image.
pub fn morph_tensors<F: VelocityNet + ?Sized>(f: &F, x_i: &Tensor, x_a: &Tensor, steps: usize) -> Result<Morph> {
    if x_i.shape() != x_a.shape() {
        return Err(Error::shape(format!(
            "moving {:?} and fixed {:?} images differ in shape",
            x_i.shape(),
            x_a.shape()
        )));
    }
    let v = VelocityField::new(f.velocity(&structure_view(x_i), &structure_view(x_a)))?;
    let phi_i2a = integrate_velocity(&v, steps)?;
    let phi_a2i = integrate_velocity(&v.neg(), steps)?;
    let x_i2a = warp_image(x_i, &phi_i2a, Interp::Bilinear)?;
    Ok(Morph {
        phi_i2a,
        phi_a2i,
        x_i2a,
        y_i2a: None,
    })
}

/// Deforms pinhole `x_i` toward panoramic `x_a`, warping its labels with
/// nearest sampling.
pub fn morph_forward<F: VelocityNet + ?Sized>(
    f: &F,
    x_i: &LabeledImage,
    x_a: &LabeledImage,
    steps: usize,
) -> Result<Morph> {
    if !x_i.domain.is_pinhole() {
        return Err(Error::Contract(format!("moving image must be pinhole, got {}", x_i.domain)));
    }
    if !x_a.domain.is_panoramic() {
        return Err(Error::Contract(format!(
            "fixed image must be panoramic, got {}; only pinhole images are deformed",
            x_a.domain
        )));
    }
    let mut morph = morph_tensors(f, &x_i.pixels.to_tensor(), &x_a.pixels.to_tensor(), steps)?;
    morph.y_i2a = match &x_i.labels {
        Some(l) => Some(warp_labels(l, &morph.phi_i2a.detach())?),
        None => None,
    };
    Ok(morph)
}

/// Mean binary cross-entropy of sigmoid(`logits`) against a constant target.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Tensor {
    logits.softplus().sub(&logits.scale(target)).mean()
}

#[derive(Clone, Debug)]
pub struct DiscLosses {
    pub img: Tensor,
    pub pix: Tensor,
}

/// Discriminator objective from precomputed outputs on real and fake inputs.
pub fn discriminator_losses_from(real: &DiscOutput, fake: &DiscOutput) -> DiscLosses {
    DiscLosses {
        img: bce_with_logits(&real.image_logit, REAL_TARGET).add(&bce_with_logits(&fake.image_logit, 0.0)),
        pix: bce_with_logits(&real.pixel_logits, REAL_TARGET).add(&bce_with_logits(&fake.pixel_logits, 0.0)),
    }
}

/// Discriminator objective; the fake input is detached so no gradient
/// reaches the deformation network.
pub fn discriminator_losses<D: Discriminator + ?Sized>(d: &D, fake_gray: &Tensor, real_gray: &Tensor) -> DiscLosses {
    discriminator_losses_from(&d.discriminate(real_gray), &d.discriminate(&fake_gray.detach()))
}

#[derive(Clone, Debug)]
pub struct AdvLosses {
    pub img: Tensor,
    pub pix: Tensor,
}

/// Non-saturating generator loss `-ln D(fake)` at both views.
pub fn adversarial_losses_from(fake: &DiscOutput) -> AdvLosses {
    AdvLosses {
        img: fake.image_logit.neg().softplus().mean(),
        pix: fake.pixel_logits.neg().softplus().mean(),
    }
}

/// Generator loss. Gradients reach the discriminator parameters too; the
/// caller only steps the deformation network's optimizer.
pub fn adversarial_losses<D: Discriminator + ?Sized>(d: &D, fake_gray: &Tensor) -> AdvLosses {
    adversarial_losses_from(&d.discriminate(fake_gray))
}

#[derive(Clone, Debug)]
pub struct CycleLosses {
    pub recon: Tensor,
    pub sem: Tensor,
}

fn l1(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean()
}

fn teacher_probs(teacher: &SegModel, img: &Tensor) -> Result<Tensor> {
    Ok(teacher.forward_full(img)?.fused_logits().softmax(1))
}

/// Round-trip reconstruction of both images and agreement of the teacher's
/// class probabilities between "segment then warp" and "warp then segment".
/// The teacher's parameters are expected to be constants.
pub fn cycle_losses(
    x_i: &Tensor,
    x_a: &Tensor,
    phi_i2a: &DeformationField,
    phi_a2i: &DeformationField,
    teacher: &SegModel,
) -> Result<CycleLosses> {
    let x_i2a = warp_image(x_i, phi_i2a, Interp::Bilinear)?;
    let x_a2i = warp_image(x_a, phi_a2i, Interp::Bilinear)?;
    let recon = l1(x_i, &warp_image(&x_i2a, phi_a2i, Interp::Bilinear)?)
        .add(&l1(x_a, &warp_image(&x_a2i, phi_i2a, Interp::Bilinear)?));

    let p_i = no_grad(|| teacher_probs(teacher, x_i))?;
    let p_a = no_grad(|| teacher_probs(teacher, x_a))?;
    let sem = l1(&teacher_probs(teacher, &x_i2a)?, &warp_image(&p_i, phi_i2a, Interp::Bilinear)?).add(&l1(
        &teacher_probs(teacher, &x_a2i)?,
        &warp_image(&p_a, phi_a2i, Interp::Bilinear)?,
    ));
    Ok(CycleLosses { recon, sem })
}

/// Differentiable terms of the deformation objective.
#[derive(Clone, Debug)]
pub struct MorphParts {
    pub adv_img: Tensor,
    pub adv_pix: Tensor,
    pub recon: Tensor,
    pub sem: Tensor,
    pub smooth: Tensor,
}

/// Scalar values of every morphing loss for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MorphLossReport {
    pub l_dis_img: f64,
    pub l_dis_pix: f64,
    pub l_adv_img: f64,
    pub l_adv_pix: f64,
    pub l_recon: f64,
    pub l_sem: f64,
    pub l_smooth: f64,
    pub l_morph_total: f64,
    pub ramp: f64,
}

/// Fraction of training completed, used to phase in the cycle and
/// smoothness terms.
pub fn ramp(cur_it: usize, max_its: usize) -> Result<f64> {
    if max_its == 0 {
        return Err(Error::validation("max_its must be positive"));
    }
    if cur_it > max_its {
        return Err(Error::validation(format!("iteration {cur_it} exceeds max_its {max_its}")));
    }
    Ok(cur_it as f64 / max_its as f64)
}

/// `ramp · (recon + sem + smooth) + alpha · (adv_img + adv_pix)`.
pub fn morph_loss_total(parts: &MorphParts, alpha: f64, cur_it: usize, max_its: usize) -> Result<(Tensor, MorphLossReport)> {
    let r = ramp(cur_it, max_its)?;
    let cycle = parts.recon.add(&parts.sem).add(&parts.smooth).scale(r);
    let adv = parts.adv_img.add(&parts.adv_pix).scale(alpha);
    let total = cycle.add(&adv);
    let report = MorphLossReport {
        l_adv_img: parts.adv_img.item(),
        l_adv_pix: parts.adv_pix.item(),
        l_recon: parts.recon.item(),
        l_sem: parts.sem.item(),
        l_smooth: parts.smooth.item(),
        l_morph_total: total.item(),
        ramp: r,
        ..MorphLossReport::default()
    };
    Ok((total, report))
}
