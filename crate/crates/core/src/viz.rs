//! Offline figures: deformation triptychs and gating heat maps.

use crate::datamodel::RgbImage;
use crate::deformation::{integrate_velocity, warp_image, DeformationField, Interp, VelocityField};
use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::no_grad;
use crate::usm::{grayscale, structure_view, VelocityNet};

const GAP: usize = 2;

/// Places equally sized images side by side on a white background.
pub fn hstack(panels: &[&RgbImage]) -> Result<RgbImage> {
    let first = panels.first().ok_or_else(|| Error::validation("no panels to stack"))?;
    let (h, w) = (first.height, first.width);
    if panels.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::shape("panels differ in size"));
    }
    let total = panels.len() * w + (panels.len() - 1) * GAP;
    let mut out = RgbImage::filled(h, total, [1.0; 3]);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + GAP);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x0 + x, p.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Displacement direction as hue and magnitude as saturation, blended over
/// the grayscale of `under`.
pub fn field_overlay(under: &RgbImage, phi: &DeformationField) -> Result<RgbImage> {
    if (phi.height(), phi.width()) != (under.height, under.width) {
        return Err(Error::shape("field and image differ in size"));
    }
    let max = phi.max_magnitude().max(1e-12);
    let gray = grayscale(&under.to_tensor());
    let g = gray.data();
    let mut out = RgbImage::filled(under.height, under.width, [0.0; 3]);
    for y in 0..under.height {
        for x in 0..under.width {
            let (dx, dy) = phi.at(x, y);
            let color = hsv(dy.atan2(dx) / std::f64::consts::TAU, dx.hypot(dy) / max, 1.0);
            let base = g[y * under.width + x];
            for (c, v) in color.iter().enumerate() {
                out.set(c, y, x, 0.5 * base + 0.5 * v);
            }
        }
    }
    Ok(out)
}

/// Moving, fixed and moved images followed by the field overlay.
pub fn deform_triptych(moving: &RgbImage, fixed: &RgbImage, phi: &DeformationField) -> Result<RgbImage> {
    let moved = RgbImage::from_tensor(&warp_image(&moving.to_tensor(), phi, Interp::Bilinear)?)?;
    let overlay = field_overlay(moving, phi)?;
    hstack(&[moving, fixed, &moved, &overlay])
}

/// Runs the deformation network on a pair and renders the triptych.
pub fn render_deformation<F: VelocityNet + ?Sized>(
    f: &F,
    moving: &RgbImage,
    fixed: &RgbImage,
    steps: usize,
) -> Result<RgbImage> {
    let phi = no_grad(|| -> Result<DeformationField> {
        let v = VelocityField::new(f.velocity(&structure_view(&moving.to_tensor()), &structure_view(&fixed.to_tensor())))?;
        integrate_velocity(&v, steps)
    })?;
    deform_triptych(moving, fixed, &phi)
}

/// Per-pixel weight of the panoramic branch, row-major, each in `[0, 1]`.
pub fn panoramic_weights(model: &SegModel, img: &RgbImage) -> Result<Vec<f64>> {
    let out = no_grad(|| model.forward_full(&img.to_tensor()))?;
    Ok(out.gate.narrow(1, 1, 1).to_vec())
}

/// Blue for low weights, red for high.
pub fn heat_color(w: f64) -> [f64; 3] {
    let w = w.clamp(0.0, 1.0);
    [w, 0.0, 1.0 - w]
}

/// Input image next to the heat map of `weights` blended over it.
pub fn gating_figure(img: &RgbImage, weights: &[f64]) -> Result<RgbImage> {
    if weights.len() != img.height * img.width {
        return Err(Error::shape("weight map and image differ in size"));
    }
    let mut heat = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let color = heat_color(weights[y * img.width + x]);
            for (c, v) in color.iter().enumerate() {
                heat.set(c, y, x, 0.35 * img.get(c, y, x) + 0.65 * v);
            }
        }
    }
    hstack(&[img, &heat])
}

pub fn render_gating(model: &SegModel, img: &RgbImage) -> Result<RgbImage> {
    gating_figure(img, &panoramic_weights(model, img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegConfig;
    use crate::usm::DeformationNetwork;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_field_moved_panel_matches_moving() {
        let f = DeformationNetwork::new(4, &mut ChaCha8Rng::seed_from_u64(0));
        let moving = noise(8, 16, 1);
        let fig = render_deformation(&f, &moving, &noise(8, 16, 2), 7).unwrap();
        assert_eq!(fig.width, 4 * 16 + 3 * GAP);
        let x0 = 2 * (16 + GAP);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..16 {
                    assert_eq!(fig.get(c, y, x0 + x), moving.get(c, y, x));
                }
            }
        }
    }

    #[test]
    fn gating_weights_in_unit_interval() {
        let cfg = SegConfig {
            num_classes: 3,
            enc_widths: vec![4, 4],
            branch_width: 4,
            gate_width: 4,
        };
        let mut model = SegModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = model.g.conv2.weight.shape().to_vec();
        let n = shape.iter().product();
        model.g.conv2.weight = crate::tensor::Tensor::param((0..n).map(|_| rng.random_range(-3.0..3.0)).collect(), &shape);
        let w = panoramic_weights(&model, &noise(16, 32, 5)).unwrap();
        assert_eq!(w.len(), 16 * 32);
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(w.iter().any(|&v| (v - 0.5).abs() > 1e-3));
        let fig = render_gating(&model, &noise(16, 32, 5)).unwrap();
        assert_eq!((fig.height, fig.width), (16, 2 * 32 + GAP));
    }

    #[test]
    fn heat_is_red_when_high() {
        assert_eq!(heat_color(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(heat_color(0.0), [0.0, 0.0, 1.0]);
    }
}
