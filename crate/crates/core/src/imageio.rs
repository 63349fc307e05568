//! PNG reading and writing for RGB images and label maps.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage as Rgb8};

use crate::datamodel::{LabelMap, RgbImage};
use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::filled(h, w, [0.0; 3]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let mut buf = Rgb8::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [0, 1, 2].map(|c| (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf.save(path).map_err(image_err(path))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(image_err(path))?;
    if img.color().channel_count() != 1 {
        return Err(Error::validation(format!(
            "label file {} is not single-channel",
            path.display()
        )));
    }
    let img = img.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let mut buf = GrayImage::new(labels.width as u32, labels.height as u32);
    for y in 0..labels.height {
        for x in 0..labels.width {
            buf.put_pixel(x as u32, y as u32, Luma([labels.get(y, x)]));
        }
    }
    buf.save(path).map_err(image_err(path))
}
