//! Dense deformation fields: velocity integration by scaling and squaring,
//! warping, composition, smoothness, and Jacobian diagnostics.
//!
//! Fields are `(N, 2, H, W)` tensors of pixel displacements with channel
//! order (dx, dy). A field maps grid point `(x, y)` to `(x + dx, y + dy)`,
//! and warping an image by a field samples the image at the mapped location.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datamodel::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stationary velocity field, integrated to a diffeomorphism by
/// [`integrate_velocity`].
#[derive(Clone, Debug)]
pub struct VelocityField(pub Tensor);

/// Dense displacement field in pixels.
#[derive(Clone, Debug)]
pub struct DeformationField(pub Tensor);

fn check_field(t: &Tensor, what: &str) -> Result<()> {
    match t.shape() {
        [_, 2, h, w] if *h > 0 && *w > 0 => Ok(()),
        s => Err(Error::shape(format!("{what} must be (N, 2, H, W), got {s:?}"))),
    }
}

impl VelocityField {
    pub fn new(t: Tensor) -> Result<VelocityField> {
        check_field(&t, "velocity field")?;
        Ok(VelocityField(t))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> VelocityField {
        VelocityField(field_tensor(height, width, f))
    }

    pub fn neg(&self) -> VelocityField {
        VelocityField(self.0.neg())
    }
}

fn field_tensor(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Tensor {
    let hw = height * width;
    let mut data = vec![0.0; 2 * hw];
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = f(x, y);
            data[y * width + x] = dx;
            data[hw + y * width + x] = dy;
        }
    }
    Tensor::new(data, &[1, 2, height, width])
}

impl DeformationField {
    pub fn new(t: Tensor) -> Result<DeformationField> {
        check_field(&t, "deformation field")?;
        Ok(DeformationField(t))
    }

    pub fn zeros(height: usize, width: usize) -> DeformationField {
        DeformationField(Tensor::zeros(&[1, 2, height, width]))
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> DeformationField {
        DeformationField::from_fn(height, width, |_, _| (dx, dy))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> DeformationField {
        DeformationField(field_tensor(height, width, f))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Displacement at `(x, y)` of the first field in the batch.
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        (d[y * w + x], d[h * w + y * w + x])
    }

    pub fn detach(&self) -> DeformationField {
        DeformationField(self.0.detach())
    }

    /// Largest displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let (n, _, h, w) = self.0.dims4();
        let d = self.0.data();
        let mut m: f64 = 0.0;
        for b in 0..n {
            for p in 0..h * w {
                let dx = d[b * 2 * h * w + p];
                let dy = d[b * 2 * h * w + h * w + p];
                m = m.max(dx.hypot(dy));
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// `exp(v)` by scaling and squaring: `phi = v / 2^steps`, then `steps`
/// self-compositions.
pub fn integrate_velocity(v: &VelocityField, steps: usize) -> Result<DeformationField> {
    if steps == 0 {
        return Err(Error::validation("integration needs at least one step"));
    }
    let mut phi = DeformationField(v.0.scale(1.0 / (1u64 << steps) as f64));
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Samples `img` `(N, C, H, W)` at every pixel's mapped location. Bilinear
/// mode is differentiable in both the image and the field; nearest mode
/// returns a constant.
pub fn warp_image(img: &Tensor, phi: &DeformationField, mode: Interp) -> Result<Tensor> {
    let (n, _, h, w) = match img.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(Error::shape(format!("image must be (N, C, H, W), got {s:?}"))),
    };
    if phi.0.shape() != [n, 2, h, w] {
        return Err(Error::shape(format!(
            "field {:?} does not match image {:?}",
            phi.0.shape(),
            img.shape()
        )));
    }
    Ok(match mode {
        Interp::Bilinear => img.warp_bilinear(&phi.0),
        Interp::Nearest => {
            let c = img.shape()[1];
            let hw = h * w;
            let mut out = vec![0.0; img.numel()];
            for b in 0..n {
                let src_idx = nearest_indices(&phi.0.data()[b * 2 * hw..(b + 1) * 2 * hw], h, w);
                for ch in 0..c {
                    let src = &img.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(&src_idx) {
                        *d = src[s];
                    }
                }
            }
            Tensor::new(out, img.shape())
        }
    })
}

/// Source pixel index for every output pixel under nearest sampling with
/// border clamping. `field` holds one `(2, H, W)` field.
fn nearest_indices(field: &[f64], h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let sx = (x as f64 + field[p]).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (y as f64 + field[hw + p]).round().clamp(0.0, (h - 1) as f64) as usize;
            sy * w + sx
        })
        .collect()
}

/// Nearest-neighbour warp of a label map by the first field of `phi`.
pub fn warp_labels(labels: &LabelMap, phi: &DeformationField) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    if (phi.height(), phi.width()) != (h, w) {
        return Err(Error::shape(format!(
            "field {}x{} does not match labels {h}x{w}",
            phi.height(),
            phi.width()
        )));
    }
    let idx = nearest_indices(&phi.0.data()[..2 * h * w], h, w);
    LabelMap::new(h, w, idx.iter().map(|&s| labels.data[s]).collect())
}

/// Field of applying `a` then `b`: `b(x) + a(x + b(x))`, so that warping by
/// `a` and then by `b` equals warping once by the composition.
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    if a.0.shape() != b.0.shape() {
        return Err(Error::shape(format!(
            "cannot compose fields {:?} and {:?}",
            a.0.shape(),
            b.0.shape()
        )));
    }
    Ok(DeformationField(b.0.add(&a.0.warp_bilinear(&b.0))))
}

/// Diffusion regularizer: half the sum of the mean squared forward
/// differences along x and along y, over both channels.
pub fn smoothness_penalty(phi: &DeformationField) -> Tensor {
    let (_, _, h, w) = phi.0.dims4();
    let mut terms = Vec::new();
    if w > 1 {
        let dx = phi.0.narrow(3, 1, w - 1).sub(&phi.0.narrow(3, 0, w - 1));
        terms.push(dx.sqr().mean());
    }
    if h > 1 {
        let dy = phi.0.narrow(2, 1, h - 1).sub(&phi.0.narrow(2, 0, h - 1));
        terms.push(dy.sqr().mean());
    }
    match terms.len() {
        0 => Tensor::scalar(0.0),
        1 => terms[0].scale(0.5),
        _ => terms[0].add(&terms[1]).scale(0.5),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianReport {
    pub min_det: f64,
    pub frac_nonpositive: f64,
}

/// Derivative along an axis with central differences inside and one-sided
/// differences at the ends.
fn axis_gradient(values: impl Fn(usize) -> f64, len: usize, i: usize) -> f64 {
    if len < 2 {
        0.0
    } else if i == 0 {
        values(1) - values(0)
    } else if i == len - 1 {
        values(len - 1) - values(len - 2)
    } else {
        (values(i + 1) - values(i - 1)) / 2.0
    }
}

/// Determinant of `I + grad(u)` at every pixel of every field in the batch.
pub fn jacobian_determinants(phi: &DeformationField) -> Vec<f64> {
    let (n, _, h, w) = phi.0.dims4();
    let d = phi.0.data();
    let hw = h * w;
    let mut dets = Vec::with_capacity(n * hw);
    for b in 0..n {
        let ux = &d[b * 2 * hw..b * 2 * hw + hw];
        let uy = &d[b * 2 * hw + hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let dux_dx = axis_gradient(|i| ux[y * w + i], w, x);
                let dux_dy = axis_gradient(|i| ux[i * w + x], h, y);
                let duy_dx = axis_gradient(|i| uy[y * w + i], w, x);
                let duy_dy = axis_gradient(|i| uy[i * w + x], h, y);
                dets.push((1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx);
            }
        }
    }
    dets
}

pub fn jacobian_report(phi: &DeformationField) -> JacobianReport {
    let dets = jacobian_determinants(phi);
    let min_det = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let nonpos = dets.iter().filter(|&&d| d <= 0.0).count();
    JacobianReport {
        min_det,
        frac_nonpositive: nonpos as f64 / dets.len() as f64,
    }
}

const FIELD_MAGIC: &[u8; 8] = b"PMFIELD1";

/// Serializes the first field as a 16-byte header (8-byte magic, u32 H,
/// u32 W, little-endian) followed by H×W×2 little-endian f32 values,
/// interleaved (dx, dy) per pixel in row-major order.
pub fn encode_field(phi: &DeformationField) -> Vec<u8> {
    let (h, w) = (phi.height(), phi.width());
    let mut out = Vec::with_capacity(16 + 8 * h * w);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = phi.at(x, y);
            out.extend_from_slice(&(dx as f32).to_le_bytes());
            out.extend_from_slice(&(dy as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<DeformationField> {
    if bytes.len() < 16 || &bytes[..8] != FIELD_MAGIC {
        return Err(Error::validation("not a deformation field file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + 8 * h * w {
        return Err(Error::validation(format!(
            "field body has {} bytes, expected {}",
            bytes.len() - 16,
            8 * h * w
        )));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[16 + 4 * i..20 + 4 * i].try_into().expect("4 bytes")) as f64;
    Ok(DeformationField::from_fn(h, w, |x, y| {
        let p = y * w + x;
        (f(2 * p), f(2 * p + 1))
    }))
}

pub fn write_field(path: &Path, phi: &DeformationField) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_field(phi)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<DeformationField> {
    decode_field(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
