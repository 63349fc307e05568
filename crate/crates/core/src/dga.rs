//! Distortion-gated alignment: EMA teacher, confidence-thresholded pseudo
//! labels, class-mix, photometric and geometric augmentation, and the
//! segmentation losses.

use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::datamodel::{LabelMap, RgbImage, IGNORE};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::segnet::{SegModel, SegOutput};
use crate::tensor::{no_grad, Tensor};

/// Frozen copy of the student, moved toward it by exponential averaging.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub model: SegModel,
    pub gamma: f64,
}

impl TeacherState {
    pub fn from_student(student: &SegModel, gamma: f64) -> TeacherState {
        let mut model = student.clone();
        model.set_trainable(false);
        TeacherState { model, gamma }
    }

    /// `theta_t <- gamma * theta_t + (1 - gamma) * theta_s` for every parameter.
    pub fn ema_update(&mut self, student: &SegModel) -> Result<()> {
        ema_update(&mut self.model, student, self.gamma)
    }

    pub fn pseudo_labels(&self, img: &Tensor, eta: f64) -> Result<Vec<PseudoLabel>> {
        let probs = no_grad(|| -> Result<Tensor> { Ok(self.model.forward_full(img)?.fused_logits().softmax(1)) })?;
        Ok(pseudo_from_probs(&probs, eta))
    }
}

pub fn ema_update(teacher: &mut impl Module, student: &impl Module, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation(format!("EMA rate {gamma} outside [0, 1]")));
    }
    let student = student.named_params();
    let mut teacher = teacher.named_params_mut();
    if student.len() != teacher.len() {
        return Err(Error::shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for ((tn, t), (sn, s)) in teacher.iter_mut().zip(&student) {
        if tn != sn || t.shape() != s.shape() {
            return Err(Error::shape(format!(
                "parameter {tn} {:?} does not match {sn} {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let data = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&a, &b)| gamma * a + (1.0 - gamma) * b)
            .collect();
        **t = Tensor::new(data, t.shape());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub confidence: Vec<f64>,
}

impl PseudoLabel {
    /// Fraction of pixels with a label.
    pub fn coverage(&self) -> f64 {
        let n = self.labels.data.iter().filter(|&&l| l != IGNORE).count();
        n as f64 / self.labels.data.len() as f64
    }
}

/// Labels each pixel with its most probable class when that probability
/// reaches `eta`, otherwise [`IGNORE`]. `probs` is `(N, C, H, W)`.
pub fn pseudo_from_probs(probs: &Tensor, eta: f64) -> Vec<PseudoLabel> {
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let d = probs.data();
    (0..n)
        .map(|b| {
            let mut labels = Vec::with_capacity(hw);
            let mut confidence = Vec::with_capacity(hw);
            for p in 0..hw {
                let mut best = 0;
                for k in 1..c {
                    if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                        best = k;
                    }
                }
                let conf = d[(b * c + best) * hw + p];
                labels.push(if conf >= eta { best as u8 } else { IGNORE });
                confidence.push(conf);
            }
            PseudoLabel {
                labels: LabelMap {
                    height: h,
                    width: w,
                    data: labels,
                },
                confidence,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: RgbImage,
    pub labels: LabelMap,
    /// True where the pixel comes from the source.
    pub mask: Vec<bool>,
}

/// Pastes the source pixels whose label is in `chosen` onto the target.
pub fn class_mix_with(
    src: &RgbImage,
    src_labels: &LabelMap,
    tgt: &RgbImage,
    tgt_labels: &LabelMap,
    chosen: &[u8],
) -> Result<MixResult> {
    let (h, w) = (src.height, src.width);
    if (tgt.height, tgt.width) != (h, w)
        || (src_labels.height, src_labels.width) != (h, w)
        || (tgt_labels.height, tgt_labels.width) != (h, w)
    {
        return Err(Error::shape("class-mix inputs differ in size"));
    }
    let mask: Vec<bool> = src_labels.data.iter().map(|l| chosen.contains(l)).collect();
    let hw = h * w;
    let mut image = tgt.clone();
    for c in 0..3 {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                image.data[c * hw + p] = src.data[c * hw + p];
            }
        }
    }
    let labels = LabelMap {
        height: h,
        width: w,
        data: mask
            .iter()
            .enumerate()
            .map(|(p, &m)| if m { src_labels.data[p] } else { tgt_labels.data[p] })
            .collect(),
    };
    Ok(MixResult { image, labels, mask })
}

/// Class-mix with half (rounded up) of the source's labelled classes drawn
/// uniformly at random.
pub fn class_mix(
    src: &RgbImage,
    src_labels: &LabelMap,
    tgt: &RgbImage,
    tgt_labels: &LabelMap,
    rng: &mut impl Rng,
) -> Result<MixResult> {
    let present = src_labels.classes_present();
    if present.is_empty() {
        return Err(Error::validation("class-mix source has no labelled pixels"));
    }
    let k = present.len().div_ceil(2);
    let chosen: Vec<u8> = present.choose_multiple(rng, k).copied().collect();
    class_mix_with(src, src_labels, tgt, tgt_labels, &chosen)
}

/// Augmentation probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: f64,
    pub jitter: f64,
    pub jitter_strength: f64,
    pub blur: f64,
    pub blur_sigma_max: f64,
    pub erase: f64,
    pub lab: f64,
}

impl AugmentConfig {
    pub fn none() -> AugmentConfig {
        AugmentConfig {
            flip: 0.0,
            jitter: 0.0,
            jitter_strength: 0.0,
            blur: 0.0,
            blur_sigma_max: 0.0,
            erase: 0.0,
            lab: 0.0,
        }
    }

    pub fn from_train(cfg: &crate::config::TrainConfig) -> AugmentConfig {
        AugmentConfig {
            flip: cfg.aug_flip,
            jitter: cfg.aug_jitter,
            jitter_strength: cfg.jitter_strength,
            blur: cfg.aug_blur,
            blur_sigma_max: cfg.blur_sigma_max,
            erase: cfg.aug_erase,
            lab: cfg.aug_lab,
        }
    }
}

/// Image with optional labels, as fed to the student.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: Option<LabelMap>,
}

/// Source samples may be colour-transferred toward a target reference;
/// target samples may be randomly erased.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentRole {
    Source,
    Target,
}

fn chance(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Applies, each with its configured probability: colour transfer toward
/// `lab_reference` (sources only), colour jitter, Gaussian blur, horizontal
/// flip (labels flipped too) and random erasing (targets only).
pub fn augment(
    sample: &mut Sample,
    cfg: &AugmentConfig,
    role: AugmentRole,
    lab_reference: Option<&RgbImage>,
    rng: &mut impl Rng,
) {
    if role == AugmentRole::Source {
        if let Some(reference) = lab_reference {
            if chance(rng, cfg.lab) {
                sample.image = lab_transfer(&sample.image, reference);
            }
        }
    }
    if chance(rng, cfg.jitter) {
        let s = cfg.jitter_strength;
        let factors = [0; 3].map(|_| 1.0 + rng.random_range(-s..=s));
        color_jitter(&mut sample.image, factors[0], factors[1], factors[2]);
    }
    if chance(rng, cfg.blur) {
        let sigma = rng.random_range(0.1..=cfg.blur_sigma_max.max(0.1));
        sample.image = gaussian_blur(&sample.image, sigma);
    }
    if chance(rng, cfg.flip) {
        sample.image = hflip_image(&sample.image);
        sample.labels = sample.labels.as_ref().map(hflip_labels);
    }
    if role == AugmentRole::Target && chance(rng, cfg.erase) {
        random_erase(&mut sample.image, rng);
    }
}

/// Brightness, contrast and saturation scaling, clamped to [0, 1].
pub fn color_jitter(img: &mut RgbImage, brightness: f64, contrast: f64, saturation: f64) {
    let hw = img.height * img.width;
    let mean = img.data.iter().sum::<f64>() / img.data.len() as f64 * brightness;
    for p in 0..hw {
        let rgb = [0, 1, 2].map(|c| img.data[c * hw + p] * brightness);
        let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        for c in 0..3 {
            let v = gray + saturation * (rgb[c] - gray);
            img.data[c * hw + p] = (mean + contrast * (v - mean)).clamp(0.0, 1.0);
        }
    }
}

/// Separable Gaussian blur with border clamping.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let o = j as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += k * src[((c as isize * h + sy) * w + sx) as usize];
                    }
                    out[((c as isize * h + y) * w + x) as usize] = acc;
                }
            }
        }
        out
    };
    let data = pass(&pass(&img.data, true), false);
    RgbImage {
        height: img.height,
        width: img.width,
        data,
    }
}

pub fn hflip_image(img: &RgbImage) -> RgbImage {
    let w = img.width;
    let mut data = img.data.clone();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    RgbImage {
        height: img.height,
        width: w,
        data,
    }
}

pub fn hflip_labels(labels: &LabelMap) -> LabelMap {
    let mut data = labels.data.clone();
    for row in data.chunks_mut(labels.width) {
        row.reverse();
    }
    LabelMap {
        height: labels.height,
        width: labels.width,
        data,
    }
}

/// Fills a random rectangle covering 2-15% of the image with a random colour.
pub fn random_erase(img: &mut RgbImage, rng: &mut impl Rng) {
    let (h, w) = (img.height, img.width);
    let area = rng.random_range(0.02..0.15) * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5..2.0);
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - eh);
    let x0 = rng.random_range(0..=w - ew);
    let fill = [0; 3].map(|_| rng.random::<f64>());
    for (c, &v) in fill.iter().enumerate() {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                img.set(c, y, x, v);
            }
        }
    }
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

type Mat3 = [[f64; 3]; 3];

const RGB_TO_XYZ: Mat3 = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

static XYZ_TO_RGB: LazyLock<Mat3> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

fn invert3(m: &Mat3) -> Mat3 {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    // inverse is the transposed cofactor matrix over the determinant
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| c(j, i) / det))
}

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// sRGB in [0, 1] to CIE L*a*b* under D65.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = mat_vec(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let f = |t: f64| {
        if t > LAB_EPS {
            t.cbrt()
        } else {
            (LAB_KAPPA * t + 16.0) / 116.0
        }
    };
    let [fx, fy, fz] = [0, 1, 2].map(|i| f(xyz[i] / WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let finv = |f: f64| {
        let f3 = f * f * f;
        if f3 > LAB_EPS {
            f3
        } else {
            (116.0 * f - 16.0) / LAB_KAPPA
        }
    };
    let [x, y, z] = [finv(fx) * WHITE[0], finv(fy) * WHITE[1], finv(fz) * WHITE[2]];
    mat_vec(&XYZ_TO_RGB, [x, y, z]).map(|v| linear_to_srgb(v.max(0.0)))
}

fn lab_stats(lab: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = lab.len() as f64;
    let mean = [0, 1, 2].map(|c| lab.iter().map(|p| p[c]).sum::<f64>() / n);
    let std = [0, 1, 2].map(|c| (lab.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

/// Matches the per-channel L*a*b* mean and standard deviation of `img` to
/// those of `reference`.
pub fn lab_transfer(img: &RgbImage, reference: &RgbImage) -> RgbImage {
    let to_lab = |im: &RgbImage| -> Vec<[f64; 3]> {
        let hw = im.height * im.width;
        (0..hw)
            .map(|p| rgb_to_lab([im.data[p], im.data[hw + p], im.data[2 * hw + p]]))
            .collect()
    };
    let src = to_lab(img);
    let (sm, ss) = lab_stats(&src);
    let (rm, rs) = lab_stats(&to_lab(reference));
    let hw = img.height * img.width;
    let mut out = img.clone();
    for (p, lab) in src.iter().enumerate() {
        let moved = [0, 1, 2].map(|c| {
            let z = if ss[c] > 1e-12 { (lab[c] - sm[c]) / ss[c] * rs[c] } else { lab[c] - sm[c] };
            z + rm[c]
        });
        let rgb = lab_to_rgb(moved);
        for c in 0..3 {
            out.data[c * hw + p] = rgb[c].clamp(0.0, 1.0);
        }
    }
    out
}

fn flatten_labels(labels: &[&LabelMap]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.data.iter().copied()).collect()
}

/// Mean cross-entropy over non-ignored pixels of `(N, C, H, W)` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[&LabelMap], what: &'static str) -> Result<Tensor> {
    let flat = flatten_labels(labels);
    let (n, _, h, w) = logits.dims4();
    if flat.len() != n * h * w {
        return Err(Error::shape(format!("{what}: {} labels for logits {:?}", flat.len(), logits.shape())));
    }
    let count = flat.iter().filter(|&&l| l != IGNORE).count();
    if count == 0 {
        return Err(Error::EmptyLoss(what));
    }
    Ok(logits.cross_entropy_map(&flat, IGNORE).sum().scale(1.0 / count as f64))
}

/// Per-pixel `KL(softmax(p) || softmax(q))` over the class axis, `(N, 1, H, W)`.
pub fn kl_map(p_logits: &Tensor, q_logits: &Tensor) -> Tensor {
    let lp = p_logits.log_softmax(1);
    let lq = q_logits.log_softmax(1);
    lp.exp().mul(&lp.sub(&lq)).sum_dims(&[1])
}

#[derive(Clone, Debug)]
pub struct Alignment {
    /// Mean per-pixel divergence between the pinhole and panoramic heads
    /// over labelled pixels.
    pub d_kl: f64,
    pub l_t: Tensor,
}

/// Target-head loss weighted by branch agreement: the mean over labelled
/// pixels of `exp(-kl) * CE(h_t) + kl`, where `kl` is the divergence between
/// the pinhole and panoramic heads at that pixel. No labelled pixels gives
/// a zero loss.
pub fn uncertainty_alignment(out: &SegOutput, labels: &[&LabelMap]) -> Result<Alignment> {
    let flat = flatten_labels(labels);
    let (n, _, h, w) = out.logits_t.dims4();
    if flat.len() != n * h * w {
        return Err(Error::shape(format!(
            "{} labels for logits {:?}",
            flat.len(),
            out.logits_t.shape()
        )));
    }
    let count = flat.iter().filter(|&&l| l != IGNORE).count();
    if count == 0 {
        return Ok(Alignment {
            d_kl: 0.0,
            l_t: Tensor::scalar(0.0),
        });
    }
    let mask = Tensor::new(
        flat.iter().map(|&l| if l == IGNORE { 0.0 } else { 1.0 }).collect(),
        &[n, 1, h, w],
    );
    let kl = kl_map(&out.logits_pin, &out.logits_pan).mul(&mask);
    let ce = out.logits_t.cross_entropy_map(&flat, IGNORE);
    let per_pixel = kl.neg().exp().mul(&ce).add(&kl);
    let scale = 1.0 / count as f64;
    Ok(Alignment {
        d_kl: kl.sum().item() * scale,
        l_t: per_pixel.sum().scale(scale),
    })
}

/// `l_pin + l_pan + beta * l_t`.
pub fn seg_loss_total(l_pin: &Tensor, l_pan: &Tensor, l_t: &Tensor, beta: f64) -> Result<Tensor> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::validation(format!("beta {beta} must be positive")));
    }
    Ok(l_pin.add(l_pan).add(&l_t.scale(beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> SegModel {
        SegModel::new(
            SegConfig {
                num_classes: 3,
                enc_widths: vec![3, 3],
                branch_width: 2,
                gate_width: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn random_rgb(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ema_endpoints() {
        let student = tiny_model(1);
        let mut t = TeacherState::from_student(&tiny_model(2), 1.0);
        let before = t.model.param_checksum();
        t.ema_update(&student).unwrap();
        assert_eq!(t.model.param_checksum(), before);
        t.gamma = 0.0;
        t.ema_update(&student).unwrap();
        assert_eq!(t.model.param_checksum(), student.param_checksum());
    }

    #[test]
    fn ema_scalar_value() {
        let mut teacher = Tensor::new(vec![1.0], &[1]);
        ema_update(&mut teacher, &Tensor::new(vec![0.0], &[1]), 0.999).unwrap();
        assert_eq!(teacher.item(), 0.999);
    }

    #[test]
    fn ema_rejects_mismatched_models() {
        let mut t = tiny_model(1);
        let other = SegModel::new(
            SegConfig {
                num_classes: 4,
                enc_widths: vec![3, 3],
                branch_width: 2,
                gate_width: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn teacher_is_not_trainable() {
        let t = TeacherState::from_student(&tiny_model(1), 0.99);
        assert!(t.model.named_params().iter().all(|(_, p)| !p.requires_grad()));
    }

    #[test]
    fn pseudo_label_threshold() {
        let probs = Tensor::new(vec![0.96, 0.6, 0.04, 0.4], &[1, 2, 1, 2]);
        let pl = &pseudo_from_probs(&probs, 0.95)[0];
        assert_eq!(pl.labels.data, vec![0, IGNORE]);
        assert_eq!(pl.coverage(), 0.5);
        assert!(pseudo_from_probs(&probs, 0.0)[0].labels.data.iter().all(|&l| l != IGNORE));
    }

    #[test]
    fn class_mix_by_hand() {
        let src = RgbImage::new(2, 2, vec![0.1; 12]).unwrap();
        let tgt = RgbImage::new(2, 2, vec![0.9; 12]).unwrap();
        let src_l = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let tgt_l = LabelMap::new(2, 2, vec![2, 3, 2, IGNORE]).unwrap();
        let m = class_mix_with(&src, &src_l, &tgt, &tgt_l, &[0]).unwrap();
        assert_eq!(m.mask, vec![true, false, true, false]);
        assert_eq!(m.labels.data, vec![0, 3, 0, IGNORE]);
        assert_eq!(m.image.get(1, 0, 0), 0.1);
        assert_eq!(m.image.get(1, 0, 1), 0.9);
    }

    #[test]
    fn single_class_source_covers_everything() {
        let src = random_rgb(4, 4, 1);
        let tgt = random_rgb(4, 4, 2);
        let m = class_mix(
            &src,
            &LabelMap::filled(4, 4, 2),
            &tgt,
            &LabelMap::filled(4, 4, 0),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(m.mask.iter().all(|&b| b));
        assert_eq!(m.image, src);
        let err = class_mix(
            &src,
            &LabelMap::filled(4, 4, IGNORE),
            &tgt,
            &LabelMap::filled(4, 4, 0),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn class_mix_picks_half_the_classes() {
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 5) as u8).collect()).unwrap();
        let m = class_mix(
            &random_rgb(4, 4, 1),
            &labels,
            &random_rgb(4, 4, 2),
            &LabelMap::filled(4, 4, 0),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let mut chosen: Vec<u8> = labels.data.iter().zip(&m.mask).filter(|(_, &b)| b).map(|(&l, _)| l).collect();
        chosen.sort();
        chosen.dedup();
        assert_eq!(chosen.len(), 3);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut s = Sample {
            image: random_rgb(16, 16, 1),
            labels: Some(LabelMap::filled(16, 16, 1)),
        };
        let before = s.clone();
        let reference = random_rgb(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        augment(&mut s, &AugmentConfig::none(), AugmentRole::Source, Some(&reference), &mut rng);
        augment(&mut s, &AugmentConfig::none(), AugmentRole::Target, None, &mut rng);
        assert_eq!(s, before);
    }

    #[test]
    fn flip_moves_labels_with_pixels() {
        let img = random_rgb(16, 16, 1);
        let labels = LabelMap::new(16, 16, (0..256).map(|i| (i % 16) as u8).collect()).unwrap();
        let mut s = Sample {
            image: img.clone(),
            labels: Some(labels.clone()),
        };
        let cfg = AugmentConfig {
            flip: 1.0,
            ..AugmentConfig::none()
        };
        augment(&mut s, &cfg, AugmentRole::Source, None, &mut ChaCha8Rng::seed_from_u64(0));
        let out = s.labels.unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.get(y, x), labels.get(y, 15 - x));
                assert_eq!(s.image.get(2, y, x), img.get(2, y, 15 - x));
            }
        }
    }

    #[test]
    fn lab_round_trip_and_self_transfer() {
        for rgb in [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.2, 0.7, 0.4], [0.9, 0.01, 0.5]] {
            let back = lab_to_rgb(rgb_to_lab(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6, "{rgb:?} -> {back:?}");
            }
        }
        let img = random_rgb(16, 16, 4);
        let out = lab_transfer(&img, &img);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lab_transfer_matches_reference_statistics() {
        let img = random_rgb(16, 16, 4);
        let mut reference = random_rgb(16, 16, 5);
        reference.data.iter_mut().for_each(|v| *v = 0.3 + 0.3 * *v);
        let out = lab_transfer(&img, &reference);
        let lab = |im: &RgbImage| {
            let hw = im.height * im.width;
            (0..hw)
                .map(|p| rgb_to_lab([im.data[p], im.data[hw + p], im.data[2 * hw + p]]))
                .collect::<Vec<_>>()
        };
        let (om, _) = lab_stats(&lab(&out));
        let (rm, _) = lab_stats(&lab(&reference));
        assert!((om[0] - rm[0]).abs() < 2.0);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]);
        let out = gaussian_blur(&img, 1.0);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let logits = Tensor::zeros(&[1, 5, 2, 2]);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 4]).unwrap();
        let ce = cross_entropy(&logits, &[&labels], "test").unwrap();
        assert!((ce.item() - 5f64.ln()).abs() < 1e-9);
        let none = LabelMap::filled(2, 2, IGNORE);
        assert!(matches!(cross_entropy(&logits, &[&none], "test"), Err(Error::EmptyLoss(_))));
    }

    #[test]
    fn ignored_pixels_do_not_matter() {
        let labels = LabelMap::new(1, 2, vec![1, IGNORE]).unwrap();
        let a = Tensor::new(vec![0.0, 3.0, 1.0, -2.0], &[1, 2, 1, 2]);
        let b = Tensor::new(vec![0.0, -7.0, 1.0, 9.0], &[1, 2, 1, 2]);
        let ca = cross_entropy(&a, &[&labels], "t").unwrap().item();
        let cb = cross_entropy(&b, &[&labels], "t").unwrap().item();
        assert_eq!(ca, cb);
    }

    #[test]
    fn kl_of_certain_versus_uniform() {
        let p = Tensor::new(vec![60.0, -60.0], &[1, 2, 1, 1]);
        let q = Tensor::new(vec![0.0, 0.0], &[1, 2, 1, 1]);
        assert!((kl_map(&p, &q).item() - 2f64.ln()).abs() < 1e-9);
        assert!(kl_map(&q, &q).item().abs() < 1e-15);
    }

    #[test]
    fn alignment_with_identical_heads_is_plain_cross_entropy() {
        let logits = Tensor::new(vec![0.3, -0.2, 1.1, 0.5, 0.0, 2.0, -1.0, 0.4], &[1, 2, 2, 2]);
        let out = SegOutput {
            logits_pin: logits.clone(),
            logits_pan: logits.clone(),
            logits_t: logits.scale(2.0),
            f_pin: Tensor::zeros(&[1, 1, 1, 1]),
            f_pan: Tensor::zeros(&[1, 1, 1, 1]),
            f_t: Tensor::zeros(&[1, 1, 1, 1]),
            gate: Tensor::zeros(&[1, 2, 2, 2]),
        };
        let labels = LabelMap::new(2, 2, vec![0, 1, IGNORE, 1]).unwrap();
        let a = uncertainty_alignment(&out, &[&labels]).unwrap();
        let ce = cross_entropy(&logits.scale(2.0), &[&labels], "t").unwrap();
        assert!(a.d_kl.abs() < 1e-15);
        assert!((a.l_t.item() - ce.item()).abs() < 1e-12);
        let none = LabelMap::filled(2, 2, IGNORE);
        assert_eq!(uncertainty_alignment(&out, &[&none]).unwrap().l_t.item(), 0.0);
    }

    #[test]
    fn total_segmentation_loss() {
        let one = Tensor::scalar(1.0);
        assert_eq!(seg_loss_total(&one, &one, &one, 0.5).unwrap().item(), 2.5);
        assert_eq!(seg_loss_total(&one, &one, &one, 1.0).unwrap().item(), 3.0);
        assert_eq!(seg_loss_total(&one, &one, &Tensor::scalar(0.0), 7.0).unwrap().item(), 2.0);
        assert!(seg_loss_total(&one, &one, &one, 0.0).is_err());
    }
}
