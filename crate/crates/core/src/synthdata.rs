//! Procedural benchmark: a pinhole source, a synthetic panoramic source and
//! a panoramic target with a colour shift, all drawn from one family of
//! layered geometric scenes.
//!
//! A scene is defined in continuous pinhole coordinates. A panoramic image
//! shows, at pixel `p`, the scene point `warp.forward(p)`, so warping a
//! pinhole rendering by [`analytic_field`] reproduces the panoramic
//! rendering up to interpolation error.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{validate_dims, Domain, DomainSet, LabelMap, LabeledImage, RgbImage};
use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::imageio;

/// Upper bound (exclusive) on the panoramic distortion strength; beyond it
/// the closed-form inverse leaves the image.
pub const MAX_DISTORTION: f64 = 2.0 / 3.0;

/// Closed-form geometric warp between pinhole and panoramic pixel grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticWarp {
    Identity,
    Translation { dx: f64, dy: f64 },
    /// Vertical compression toward the horizon row, strongest at the top and
    /// bottom rows and modulated sinusoidally along the columns.
    Panoramic { strength: f64, height: usize, width: usize },
}

impl AnalyticWarp {
    pub fn panoramic(strength: f64, height: usize, width: usize) -> Result<AnalyticWarp> {
        if !(0.0..MAX_DISTORTION).contains(&strength) {
            return Err(Error::validation(format!(
                "distortion strength {strength} must lie in [0, {MAX_DISTORTION:.4})"
            )));
        }
        validate_dims(height, width)?;
        Ok(AnalyticWarp::Panoramic { strength, height, width })
    }

    fn centre_and_gain(strength: f64, height: usize, width: usize, x: f64) -> (f64, f64) {
        let cy = (height as f64 - 1.0) / 2.0;
        let a = strength * (1.0 + 0.5 * (2.0 * PI * x / width as f64).sin());
        (cy, a)
    }

    /// Panoramic pixel to the pinhole scene point it shows.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            AnalyticWarp::Identity => (x, y),
            AnalyticWarp::Translation { dx, dy } => (x + dx, y + dy),
            AnalyticWarp::Panoramic { strength, height, width } => {
                let (cy, a) = Self::centre_and_gain(strength, height, width, x);
                let s = (y - cy) / cy;
                (x, cy + cy * s / (1.0 + a * s * s).sqrt())
            }
        }
    }

    /// Pinhole scene point to the panoramic pixel showing it.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            AnalyticWarp::Identity => (x, y),
            AnalyticWarp::Translation { dx, dy } => (x - dx, y - dy),
            AnalyticWarp::Panoramic { strength, height, width } => {
                let (cy, a) = Self::centre_and_gain(strength, height, width, x);
                let t = (y - cy) / cy;
                (x, cy + cy * t / (1.0 - a * t * t).sqrt())
            }
        }
    }

    /// Determinant of the Jacobian of [`forward`](Self::forward).
    pub fn forward_jacobian(&self, x: f64, y: f64) -> f64 {
        match *self {
            AnalyticWarp::Identity | AnalyticWarp::Translation { .. } => 1.0,
            AnalyticWarp::Panoramic { strength, height, width } => {
                // x' = x, so the determinant is dy'/dy.
                let (cy, a) = Self::centre_and_gain(strength, height, width, x);
                let s = (y - cy) / cy;
                (1.0 + a * s * s).powf(-1.5)
            }
        }
    }
}

/// Dense displacement field sampling `warp.forward` on the pixel grid.
pub fn analytic_field(warp: &AnalyticWarp, height: usize, width: usize) -> Result<DeformationField> {
    validate_dims(height, width)?;
    Ok(DeformationField::from_fn(height, width, |x, y| {
        let (fx, fy) = warp.forward(x as f64, y as f64);
        (fx - x as f64, fy - y as f64)
    }))
}

/// Dense displacement field sampling `warp.inverse` on the pixel grid.
pub fn analytic_inverse_field(warp: &AnalyticWarp, height: usize, width: usize) -> Result<DeformationField> {
    validate_dims(height, width)?;
    Ok(DeformationField::from_fn(height, width, |x, y| {
        let (ix, iy) = warp.inverse(x as f64, y as f64);
        (ix - x as f64, iy - y as f64)
    }))
}

/// Per-class base colours and texture noise amplitude of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub base: Vec<[f64; 3]>,
    pub noise: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Palette {
    fn wheel(num_classes: usize, hue_offset: f64, sat: f64, val: f64, noise: f64) -> Palette {
        let step = 360.0 / num_classes as f64;
        Palette {
            base: (0..num_classes)
                .map(|c| hsv(hue_offset + step * c as f64, sat, val))
                .collect(),
            noise,
        }
    }

    pub fn pinhole(num_classes: usize) -> Palette {
        Palette::wheel(num_classes, 15.0, 0.6, 0.8, 0.05)
    }

    pub fn panoramic_source(num_classes: usize) -> Palette {
        Palette::wheel(num_classes, 30.0, 0.5, 0.9, 0.04)
    }

    /// Darker, lower-contrast, blue-tinted and noisier version of the
    /// pinhole palette.
    pub fn target(num_classes: usize) -> Palette {
        let pin = Palette::pinhole(num_classes);
        let cast = [0.04, 0.10, 0.22];
        Palette {
            base: pin
                .base
                .iter()
                .map(|c| [0, 1, 2].map(|i| 0.55 * c[i] + cast[i]))
                .collect(),
            noise: 0.08,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base.len()
    }
}

/// Counts and sizes of the geometric primitives placed in each scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Inclusive range of primitives per foreground class.
    pub per_class: (usize, usize),
    /// Inclusive range of thin band widths in pixels.
    pub band_width: (usize, usize),
    /// Lattice spacing of the smooth texture noise, in pixels.
    pub noise_cell: f64,
}

impl Default for Layout {
    fn default() -> Layout {
        Layout {
            per_class: (1, 3),
            band_width: (2, 4),
            noise_cell: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub palette_pin: Palette,
    pub palette_pan_src: Palette,
    pub palette_target: Palette,
    pub distortion_strength: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, num_classes: usize, height: usize, width: usize, distortion_strength: f64) -> SceneSpec {
        SceneSpec {
            seed,
            num_classes,
            height,
            width,
            layout: Layout::default(),
            palette_pin: Palette::pinhole(num_classes),
            palette_pan_src: Palette::panoramic_source(num_classes),
            palette_target: Palette::target(num_classes),
            distortion_strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::validation(format!("class count {} must lie in [2, 255]", self.num_classes)));
        }
        validate_dims(self.height, self.width)?;
        if self.distortion_strength < 0.0 || !self.distortion_strength.is_finite() {
            return Err(Error::validation(format!(
                "distortion strength {} must be non-negative",
                self.distortion_strength
            )));
        }
        for (name, p) in [
            ("pinhole", &self.palette_pin),
            ("panoramic source", &self.palette_pan_src),
            ("target", &self.palette_target),
        ] {
            if p.num_classes() != self.num_classes {
                return Err(Error::validation(format!(
                    "{name} palette has {} colours for {} classes",
                    p.num_classes(),
                    self.num_classes
                )));
            }
        }
        let (lo, hi) = self.layout.band_width;
        if lo == 0 || lo > hi || self.layout.per_class.0 > self.layout.per_class.1 || self.layout.noise_cell <= 0.0 {
            return Err(Error::validation("inconsistent scene layout"));
        }
        Ok(())
    }

    pub fn warp(&self) -> Result<AnalyticWarp> {
        AnalyticWarp::panoramic(self.distortion_strength, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Vertical band; wraps around horizontally.
    Band { x0: f64, width: f64, y0: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64, image_width: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Band { x0, width, y0, y1 } => {
                let dx = (x - x0).rem_euclid(image_width);
                dx < width && y >= y0 && y < y1
            }
        }
    }
}

/// Scene layout: a horizon splitting class 0 (above) from class 1 (below),
/// overlaid with primitives of the remaining classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    horizon: f64,
    primitives: Vec<(Shape, u8)>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec, rng: &mut impl Rng) -> Scene {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let horizon = h * rng.random_range(0.35..0.55);
        let mut by_kind: [Vec<(Shape, u8)>; 3] = Default::default();
        let (lo, hi) = spec.layout.per_class;
        let (bw_lo, bw_hi) = spec.layout.band_width;
        for class in 2..spec.num_classes {
            let kind = (class - 2) % 3;
            for _ in 0..rng.random_range(lo..=hi) {
                let shape = match kind {
                    0 => {
                        let width = rng.random_range(0.08..0.3) * w;
                        let x0 = rng.random_range(0.0..w - width);
                        let top = rng.random_range(0.1 * h..horizon - 0.05 * h);
                        Shape::Rect {
                            x0,
                            y0: top,
                            x1: x0 + width,
                            y1: horizon + rng.random_range(0.0..0.1) * h,
                        }
                    }
                    1 => Shape::Ellipse {
                        cx: rng.random_range(0.0..w),
                        cy: rng.random_range(horizon..0.9 * h),
                        rx: rng.random_range(0.06..0.14) * w,
                        ry: rng.random_range(0.06..0.16) * h,
                    },
                    _ => {
                        let y0 = rng.random_range(0.05..0.35) * h;
                        Shape::Band {
                            x0: rng.random_range(0.0..w).floor(),
                            width: rng.random_range(bw_lo..=bw_hi) as f64,
                            y0,
                            y1: rng.random_range(horizon + 0.05 * h..h),
                        }
                    }
                };
                by_kind[kind].push((shape, class as u8));
            }
        }
        let primitives = by_kind.into_iter().flatten().collect();
        Scene {
            height: spec.height,
            width: spec.width,
            horizon,
            primitives,
        }
    }

    /// Class at a continuous scene point; the last primitive drawn wins.
    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        let w = self.width as f64;
        self.primitives
            .iter()
            .rev()
            .find(|(s, _)| s.contains(x, y, w))
            .map(|&(_, c)| c)
            .unwrap_or(if y < self.horizon { 0 } else { 1 })
    }

    pub fn labels(&self, warp: &AnalyticWarp) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = warp.forward(x as f64, y as f64);
                data.push(self.class_at(sx, sy));
            }
        }
        LabelMap { height: h, width: w, data }
    }

    /// Renders the scene through `warp` with `palette` colours and smooth
    /// texture noise drawn from `rng`. Values are quantized to 8 bits.
    pub fn render(&self, warp: &AnalyticWarp, palette: &Palette, layout: &Layout, rng: &mut impl Rng) -> RgbImage {
        let noise = NoiseField::new(self.height, self.width, layout.noise_cell, rng);
        let (h, w) = (self.height, self.width);
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = warp.forward(x as f64, y as f64);
                let base = palette.base[self.class_at(sx, sy) as usize];
                let n = noise.sample(sx, sy);
                for c in 0..3 {
                    img.set(c, y, x, (base[c] + palette.noise * n[c]).clamp(0.0, 1.0));
                }
            }
        }
        img.quantized()
    }
}

/// Gaussian values on a coarse lattice, bilinearly interpolated.
struct NoiseField {
    cell: f64,
    rows: usize,
    cols: usize,
    values: Vec<[f64; 3]>,
}

impl NoiseField {
    fn new(height: usize, width: usize, cell: f64, rng: &mut impl Rng) -> NoiseField {
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let values = (0..rows * cols)
            .map(|_| [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        NoiseField { cell, rows, cols, values }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let gx = (x / self.cell).clamp(0.0, (self.cols - 1) as f64);
        let gy = (y / self.cell).clamp(0.0, (self.rows - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        [0, 1, 2].map(|i| {
            (1.0 - fy) * ((1.0 - fx) * v(y0, x0)[i] + fx * v(y0, x1)[i])
                + fy * ((1.0 - fx) * v(y1, x0)[i] + fx * v(y1, x1)[i])
        })
    }
}

/// Images to generate per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainCounts {
    pub pin: usize,
    pub pan: usize,
    pub target: usize,
}

impl DomainCounts {
    pub fn uniform(n: usize) -> DomainCounts {
        DomainCounts { pin: n, pan: n, target: n }
    }
}

/// Generated domains plus the withheld target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub domains: DomainSet,
    /// Ground truth for `domains.target`, in the same order.
    pub target_eval: Vec<LabelMap>,
}

/// Directory (under the dataset root) holding withheld target labels.
pub const TARGET_EVAL_DIR: &str = "target_eval";

pub(crate) fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the three inputs
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SOURCE_SCENES: u64 = 1;
const TARGET_SCENES: u64 = 2;
const PIN_TEXTURE: u64 = 3;
const PAN_TEXTURE: u64 = 4;
const TARGET_TEXTURE: u64 = 5;

pub(crate) fn rng_for(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, index as u64))
}

/// Generates the three domains. Pinhole and panoramic source image `i`
/// share a scene layout; target scenes are drawn independently. Every image
/// depends only on `(seed, domain, index)`.
pub fn generate_benchmark(spec: &SceneSpec, counts: DomainCounts) -> Result<Benchmark> {
    spec.validate()?;
    if counts.pin == 0 || counts.pan == 0 || counts.target == 0 {
        return Err(Error::validation(format!("every domain needs at least one image, got {counts:?}")));
    }
    let warp = spec.warp()?;
    let id = |i: usize| format!("{i:04}");

    let source_scene = |i: usize| Scene::generate(spec, &mut rng_for(spec.seed, SOURCE_SCENES, i));
    let pin = (0..counts.pin)
        .map(|i| {
            let scene = source_scene(i);
            let mut rng = rng_for(spec.seed, PIN_TEXTURE, i);
            LabeledImage {
                id: id(i),
                domain: Domain::PinholeSource(0),
                pixels: scene.render(&AnalyticWarp::Identity, &spec.palette_pin, &spec.layout, &mut rng),
                labels: Some(scene.labels(&AnalyticWarp::Identity)),
            }
        })
        .collect();
    let pan = (0..counts.pan)
        .map(|i| {
            let scene = source_scene(i);
            let mut rng = rng_for(spec.seed, PAN_TEXTURE, i);
            LabeledImage {
                id: id(i),
                domain: Domain::PanoramicSource(0),
                pixels: scene.render(&warp, &spec.palette_pan_src, &spec.layout, &mut rng),
                labels: Some(scene.labels(&warp)),
            }
        })
        .collect();
    let mut target = Vec::with_capacity(counts.target);
    let mut target_eval = Vec::with_capacity(counts.target);
    for i in 0..counts.target {
        let scene = Scene::generate(spec, &mut rng_for(spec.seed, TARGET_SCENES, i));
        let mut rng = rng_for(spec.seed, TARGET_TEXTURE, i);
        target.push(LabeledImage {
            id: id(i),
            domain: Domain::Target,
            pixels: scene.render(&warp, &spec.palette_target, &spec.layout, &mut rng),
            labels: None,
        });
        target_eval.push(scene.labels(&warp));
    }
    Ok(Benchmark {
        domains: DomainSet {
            pin_domains: vec![pin],
            pan_domains: vec![pan],
            target,
        },
        target_eval,
    })
}

impl Benchmark {
    /// Writes the domain layout plus `target_eval/labels/<id>.png`.
    pub fn save(&self, root: &Path) -> Result<()> {
        crate::datamodel::save_dataset(&self.domains, root)?;
        for (img, labels) in self.domains.target.iter().zip(&self.target_eval) {
            let path = root.join(TARGET_EVAL_DIR).join("labels").join(format!("{}.png", img.id));
            imageio::write_labels(&path, labels)?;
        }
        Ok(())
    }
}
