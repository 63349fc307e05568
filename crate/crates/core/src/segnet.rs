//! Segmentation network: a shared stride-4 encoder, pinhole and panoramic
//! decoder heads, a pixel-wise gate fusing the two branch features, and a
//! single-layer head on the fused feature.

use rand::Rng;

use crate::config::TrainConfig;
use crate::datamodel::LabelMap;
use crate::error::{Error, Result};
use crate::nn::{module_fields, ChannelNorm, Conv2d};
use crate::tensor::Tensor;

/// Architecture widths and class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Encoder stage widths; stages use strides 2, 2, 1, 1, ...
    pub enc_widths: Vec<usize>,
    pub branch_width: usize,
    pub gate_width: usize,
}

impl SegConfig {
    pub fn from_train(cfg: &TrainConfig) -> SegConfig {
        SegConfig {
            num_classes: cfg.num_classes,
            enc_widths: cfg.enc_widths.clone(),
            branch_width: cfg.branch_width,
            gate_width: cfg.gate_width,
        }
    }
}

/// Decoder head: 3×3 conv to the branch feature, then a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub feat: Conv2d,
    pub cls: Conv2d,
}

module_fields!(Head { feat, cls });

impl Head {
    fn new(cin: usize, width: usize, classes: usize, rng: &mut impl Rng) -> Head {
        Head {
            feat: Conv2d::new(cin, width, 3, 1, rng),
            cls: Conv2d::new(width, classes, 1, 1, rng),
        }
    }
}

/// conv3×3 → channel norm → relu → conv3×3 (zero-initialized) → softmax.
#[derive(Clone, Debug)]
pub struct Gate {
    pub conv1: Conv2d,
    pub norm: ChannelNorm,
    pub conv2: Conv2d,
}

module_fields!(Gate { conv1, norm, conv2 });

impl Gate {
    fn new(branch: usize, width: usize, rng: &mut impl Rng) -> Gate {
        Gate {
            conv1: Conv2d::new(2 * branch, width, 3, 1, rng),
            norm: ChannelNorm::new(width),
            conv2: Conv2d::zeroed(width, 2, 3),
        }
    }

    /// Gate weights `(N, 2, h, w)`; channel 0 weighs the pinhole branch.
    pub fn forward(&self, f_pin: &Tensor, f_pan: &Tensor) -> Tensor {
        let x = Tensor::cat(&[f_pin.clone(), f_pan.clone()], 1);
        let x = self.norm.forward(&self.conv1.forward(&x)).relu();
        self.conv2.forward(&x).softmax(1)
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub f: Vec<Conv2d>,
    pub h_pin: Head,
    pub h_pan: Head,
    pub g: Gate,
    pub h_t: Conv2d,
    pub config: SegConfig,
}

module_fields!(SegModel { f, h_pin, h_pan, g, h_t });

/// All head outputs for one batch. Logits and gate weights are at input
/// resolution; branch features are at stride 4.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub logits_pin: Tensor,
    pub logits_pan: Tensor,
    pub logits_t: Tensor,
    pub f_pin: Tensor,
    pub f_pan: Tensor,
    pub f_t: Tensor,
    pub gate: Tensor,
}

pub const STRIDE: usize = 4;

impl SegModel {
    pub fn new(config: SegConfig, rng: &mut impl Rng) -> Result<SegModel> {
        if config.enc_widths.len() < 2 || config.enc_widths.contains(&0) {
            return Err(Error::Config("encoder needs at least two non-empty stages".into()));
        }
        if config.num_classes < 2 || config.branch_width == 0 || config.gate_width == 0 {
            return Err(Error::Config("class count, branch and gate widths must be positive".into()));
        }
        let mut f = Vec::with_capacity(config.enc_widths.len());
        let mut cin = 3;
        for (i, &w) in config.enc_widths.iter().enumerate() {
            f.push(Conv2d::new(cin, w, 3, if i < 2 { 2 } else { 1 }, rng));
            cin = w;
        }
        let (b, c) = (config.branch_width, config.num_classes);
        Ok(SegModel {
            f,
            h_pin: Head::new(cin, b, c, rng),
            h_pan: Head::new(cin, b, c, rng),
            g: Gate::new(b, config.gate_width, rng),
            h_t: Conv2d::new(b, c, 1, 1, rng),
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Shared feature extractor, stride 4.
    pub fn features(&self, img: &Tensor) -> Tensor {
        self.f.iter().fold(img.clone(), |x, conv| conv.forward(&x).relu())
    }

    pub fn forward_full(&self, img: &Tensor) -> Result<SegOutput> {
        let (_, c, h, w) = match img.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::shape(format!("image must be (N, 3, H, W), got {s:?}"))),
        };
        if c != 3 || h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image must have 3 channels and sides divisible by {STRIDE}, got {:?}",
                img.shape()
            )));
        }
        let feats = self.features(img);
        let f_pin = self.h_pin.feat.forward(&feats).relu();
        let f_pan = self.h_pan.feat.forward(&feats).relu();
        let gate = self.g.forward(&f_pin, &f_pan);
        let w_pin = gate.narrow(1, 0, 1);
        let w_pan = gate.narrow(1, 1, 1);
        let f_t = w_pin.mul(&f_pin).add(&w_pan.mul(&f_pan));
        Ok(SegOutput {
            logits_pin: self.h_pin.cls.forward(&f_pin).resize_bilinear(h, w),
            logits_pan: self.h_pan.cls.forward(&f_pan).resize_bilinear(h, w),
            logits_t: self.h_t.forward(&f_t).resize_bilinear(h, w),
            gate: gate.resize_bilinear(h, w),
            f_pin,
            f_pan,
            f_t,
        })
    }

    /// Class map from the mean of the three heads' logits.
    pub fn fused_inference(&self, img: &Tensor) -> Result<Vec<LabelMap>> {
        let out = crate::tensor::no_grad(|| self.forward_full(img))?;
        argmax_classes(&out.fused_logits())
    }
}

impl SegOutput {
    pub fn fused_logits(&self) -> Tensor {
        fuse_logits(&[self.logits_pin.clone(), self.logits_pan.clone(), self.logits_t.clone()])
    }
}

/// Mean of equally shaped logit maps.
pub fn fuse_logits(heads: &[Tensor]) -> Tensor {
    let sum = heads[1..].iter().fold(heads[0].clone(), |acc, h| acc.add(h));
    sum.scale(1.0 / heads.len() as f64)
}

/// Per-pixel argmax over the class axis of `(N, C, H, W)` scores; ties go
/// to the lowest class index.
pub fn argmax_classes(scores: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = scores.dims4();
    let hw = h * w;
    let d = scores.data();
    (0..n)
        .map(|b| {
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(classes: usize) -> SegModel {
        let cfg = SegConfig {
            num_classes: classes,
            enc_widths: vec![4, 4, 4],
            branch_width: 3,
            gate_width: 4,
        };
        SegModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..3 * h * w).map(|_| rng.random::<f64>()).collect(), &[1, 3, h, w])
    }

    #[test]
    fn output_shapes() {
        let m = tiny(5);
        let out = m.forward_full(&image(16, 24, 1)).unwrap();
        for l in [&out.logits_pin, &out.logits_pan, &out.logits_t] {
            assert_eq!(l.shape(), [1, 5, 16, 24]);
        }
        assert_eq!(out.gate.shape(), [1, 2, 16, 24]);
        assert_eq!(out.f_pin.shape(), out.f_pan.shape());
        assert_eq!(out.f_pin.shape(), [1, 3, 4, 6]);
        assert!(m.forward_full(&image(18, 24, 1)).is_err());
    }

    #[test]
    fn fresh_gate_is_even_split() {
        let m = tiny(3);
        let out = m.forward_full(&image(16, 16, 2)).unwrap();
        assert!(out.gate.data().iter().all(|&g| (g - 0.5).abs() < 1e-15));
        let mean = out.f_pin.add(&out.f_pan).scale(0.5);
        for (a, b) in out.f_t.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gate_logits() {
        let w = Tensor::new(vec![10.0, -10.0], &[1, 2, 1, 1]).softmax(1);
        assert!(w.data()[0] >= 0.9999);
    }

    #[test]
    fn identical_branches_pass_through_any_gate() {
        let mut m = tiny(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.g.conv2 = Conv2d::new(4, 2, 3, 1, &mut rng);
        m.h_pan = m.h_pin.clone();
        let out = m.forward_full(&image(16, 16, 3)).unwrap();
        for (a, b) in out.f_t.data().iter().zip(out.f_pin.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_fusion_majority() {
        let a = Tensor::new(vec![1.0, 0.0], &[1, 2, 1, 1]);
        let b = Tensor::new(vec![0.0, 1.0], &[1, 2, 1, 1]);
        let fused = fuse_logits(&[a.clone(), a, b]);
        assert_eq!(argmax_classes(&fused).unwrap()[0].data, vec![0]);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::new(vec![0.3, 0.7, 0.7, 0.3, 0.7, 0.7], &[1, 3, 1, 2]);
        assert_eq!(argmax_classes(&t).unwrap()[0].data, vec![1, 0]);
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = tiny(3);
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "f.0.weight");
        assert!(names.contains(&"g.norm.gamma".to_string()));
        assert!(names.contains(&"h_t.bias".to_string()));
        assert_eq!(names.last().unwrap(), "h_t.bias");
    }

    #[test]
    fn fused_inference_matches_manual_argmax() {
        let m = tiny(4);
        let img = image(16, 16, 5);
        let out = m.forward_full(&img).unwrap();
        let manual = argmax_classes(&out.fused_logits()).unwrap();
        assert_eq!(m.fused_inference(&img).unwrap(), manual);
    }
}
