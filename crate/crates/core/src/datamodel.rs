//! Images, label maps, domains, and the on-disk dataset layout.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/pin_src_<i>/images/<id>.png   root/pin_src_<i>/labels/<id>.png
//! root/pan_src_<i>/images/<id>.png   root/pan_src_<i>/labels/<id>.png
//! root/target/images/<id>.png
//! ```
//!
//! Label PNGs are single-channel 8-bit class indices, 255 meaning ignore.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

/// An RGB image with values in `[0, 1]`, stored planar (channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<RgbImage> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "rgb buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> RgbImage {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        RgbImage { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `(1, 3, H, W)` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 3, self.height, self.width])
    }

    /// Reads the first image of an `(N, 3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<RgbImage> {
        let (_, c, h, w) = t.dims4();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        RgbImage::new(h, w, t.data()[..3 * h * w].to_vec())
    }

    /// Rounds every value to the nearest multiple of 1/255, the precision of
    /// the on-disk format.
    pub fn quantized(&self) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::validation(format!("pixel {i} has value {v} outside [0,1]")));
        }
        validate_dims(self.height, self.width)
    }
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub(crate) fn validate_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE || height % 2 != 0 || width % 2 != 0 {
        return Err(Error::validation(format!(
            "image size {height}x{width}: sides must be even and at least {MIN_SIDE}"
        )));
    }
    Ok(())
}

/// Per-pixel class indices (or [`IGNORE`]), row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some((i, &v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != IGNORE && v as usize >= num_classes)
        {
            return Err(Error::validation(format!(
                "label {v} at index {i} is not a class in 0..{num_classes} nor IGNORE"
            )));
        }
        Ok(())
    }

    /// Sorted distinct non-ignore classes.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=254u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Which domain an image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    PinholeSource(usize),
    PanoramicSource(usize),
    Target,
}

impl Domain {
    pub fn is_pinhole(self) -> bool {
        matches!(self, Domain::PinholeSource(_))
    }

    /// Panoramic source or target.
    pub fn is_panoramic(self) -> bool {
        !self.is_pinhole()
    }

    pub fn dir_name(self) -> String {
        match self {
            Domain::PinholeSource(i) => format!("pin_src_{i}"),
            Domain::PanoramicSource(i) => format!("pan_src_{i}"),
            Domain::Target => "target".to_string(),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub domain: Domain,
    pub pixels: RgbImage,
    pub labels: Option<LabelMap>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Checks the pixel range, size rules, label values, and that the label
    /// map (when present) matches the image size.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.pixels
            .validate()
            .map_err(|e| Error::validation(format!("{}/{}: {e}", self.domain, self.id)))?;
        if let Some(labels) = &self.labels {
            if (labels.height, labels.width) != (self.pixels.height, self.pixels.width) {
                return Err(Error::validation(format!(
                    "{}/{}: label map {}x{} does not match image {}x{}",
                    self.domain, self.id, labels.height, labels.width, self.pixels.height, self.pixels.width
                )));
            }
            labels
                .validate(num_classes)
                .map_err(|e| Error::validation(format!("{}/{}: {e}", self.domain, self.id)))?;
        }
        Ok(())
    }
}

/// Labeled pinhole sources, labeled panoramic sources, and an unlabeled
/// panoramic target.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub pin_domains: Vec<Vec<LabeledImage>>,
    pub pan_domains: Vec<Vec<LabeledImage>>,
    pub target: Vec<LabeledImage>,
}

impl DomainSet {
    /// Number of pinhole source domains.
    pub fn m(&self) -> usize {
        self.pin_domains.len()
    }

    /// Number of panoramic source domains.
    pub fn n(&self) -> usize {
        self.pan_domains.len()
    }

    pub fn pinhole_images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.pin_domains.iter().flatten()
    }

    pub fn panoramic_images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.pan_domains.iter().flatten()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.pin_domains.is_empty() || self.pin_domains.iter().any(Vec::is_empty) {
            return Err(Error::validation("pinhole source domain empty"));
        }
        if self.pan_domains.is_empty() || self.pan_domains.iter().any(Vec::is_empty) {
            return Err(Error::validation("panoramic source domain empty"));
        }
        if self.target.is_empty() {
            return Err(Error::validation("target domain empty"));
        }
        for img in self.pinhole_images().chain(self.panoramic_images()) {
            if img.labels.is_none() {
                return Err(Error::validation(format!("{}/{} has no labels", img.domain, img.id)));
            }
            img.validate(num_classes)?;
        }
        for img in &self.target {
            if img.labels.is_some() {
                return Err(Error::validation(format!("target image {} carries labels", img.id)));
            }
            img.validate(num_classes)?;
        }
        Ok(())
    }
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_domain(root: &Path, domain: Domain, labeled: bool, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let dir = root.join(domain.dir_name());
    let mut images = Vec::new();
    for path in sorted_pngs(&dir.join("images"))? {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::validation(format!("bad file name {}", path.display())))?
            .to_string();
        let pixels = imageio::read_rgb(&path)?;
        let labels = if labeled {
            let label_path = dir.join("labels").join(format!("{id}.png"));
            if !label_path.exists() {
                return Err(Error::MissingLabel(label_path));
            }
            Some(imageio::read_labels(&label_path)?)
        } else {
            None
        };
        let img = LabeledImage {
            id,
            domain,
            pixels,
            labels,
        };
        img.validate(num_classes)?;
        images.push(img);
    }
    Ok(images)
}

fn count_domains(root: &Path, prefix: &str) -> Result<usize> {
    let mut n = 0;
    while root.join(format!("{prefix}{n}")).is_dir() {
        n += 1;
    }
    if !root.is_dir() {
        return Err(Error::validation(format!("dataset root {} is not a directory", root.display())));
    }
    Ok(n)
}

/// Loads every domain under `root`. Images are ordered by file name.
/// Evaluation labels for the target are never read here.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<DomainSet> {
    let m = count_domains(root, "pin_src_")?;
    let n = count_domains(root, "pan_src_")?;
    let pin_domains = (0..m)
        .map(|i| load_domain(root, Domain::PinholeSource(i), true, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let pan_domains = (0..n)
        .map(|i| load_domain(root, Domain::PanoramicSource(i), true, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let target = load_domain(root, Domain::Target, false, num_classes)?;
    let set = DomainSet {
        pin_domains,
        pan_domains,
        target,
    };
    set.validate(num_classes)?;
    Ok(set)
}

/// Writes `set` in the layout read by [`load_dataset`].
pub fn save_dataset(set: &DomainSet, root: &Path) -> Result<()> {
    let all = set
        .pin_domains
        .iter()
        .flatten()
        .chain(set.pan_domains.iter().flatten())
        .chain(&set.target);
    for img in all {
        let dir = root.join(img.domain.dir_name());
        imageio::write_rgb(&dir.join("images").join(format!("{}.png", img.id)), &img.pixels)?;
        if let Some(labels) = &img.labels {
            imageio::write_labels(&dir.join("labels").join(format!("{}.png", img.id)), labels)?;
        }
    }
    Ok(())
}
