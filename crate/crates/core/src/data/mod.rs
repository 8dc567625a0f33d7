//! Samples, dataset directories, the synthetic generator, checkpoints and reports.

mod augment;
mod checkpoint;
mod dataset;
mod report;
mod synth;

pub use augment::augment;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{load_dataset, write_dataset, DatasetIndex, Entry, Label, Split, LABELS_FILE};
pub use report::{summarize, EvalRow, EvalSummary, StructureMeans, REPORT_HEADER};
pub use synth::{generate_synthetic, SynthGeometry, Synthetic};

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::{Grade, Mask};
use crate::tensor::Tensor;

/// An RGB image with its disc and cup masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPair {
    pub id: String,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub disc: Mask,
    pub cup: Mask,
    pub cdr: Option<f64>,
    pub grade: Option<Grade>,
}

impl SegPair {
    pub fn height(&self) -> usize {
        self.disc.height()
    }

    pub fn width(&self) -> usize {
        self.disc.width()
    }

    /// `2×H×W` target, disc then cup.
    pub fn target(&self) -> Tensor<f32> {
        let data = self.disc.data().iter().chain(self.cup.data()).map(|&v| v as f32).collect();
        Tensor::from_parts(vec![2, self.height(), self.width()], data)
    }
}

/// Stacks images into `N×3×H×W` and targets into `N×2×H×W`.
pub fn batch(samples: &[&SegPair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut tgt = Vec::with_capacity(samples.len() * 2 * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) || s.image.shape() != [3, h, w] {
            return Err(Error::shapes("batch", &[3, h, w], s.image.shape()));
        }
        img.extend_from_slice(s.image.data());
        tgt.extend_from_slice(s.target().data());
    }
    let n = samples.len();
    Ok((Tensor::new([n, 3, h, w], img)?, Tensor::new([n, 2, h, w], tgt)?))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::dim("tensor_to_rgb", format!("expected 3×H×W, got {:?}", t.shape())))?;
    if c != 3 {
        return Err(Error::dim("tensor_to_rgb", format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn mask_to_gray(m: &Mask) -> GrayImage {
    GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Foreground is any value above 127.
pub fn gray_to_mask(g: &GrayImage) -> Mask {
    Mask::from_fn(g.height() as usize, g.width() as usize, |y, x| g.get_pixel(x as u32, y as u32)[0] > 127)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Load(format!("{}: {other}", path.display())),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_error(path, e))?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| image_error(path, e))?.to_luma8())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub fn write_png_mask(path: &Path, m: &Mask) -> Result<()> {
    ensure_parent(path)?;
    mask_to_gray(m)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
pub fn boundary(m: &Mask) -> Mask {
    let (h, w) = (m.height(), m.width());
    Mask::from_fn(h, w, |y, x| {
        m.get(y, x)
            && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1))
    })
}

/// Draws the disc boundary in red and the cup boundary in green.
pub fn overlay(img: &RgbImage, disc: &Mask, cup: &Mask) -> Result<RgbImage> {
    if (img.height() as usize, img.width() as usize) != (disc.height(), disc.width()) {
        return Err(Error::shapes(
            "overlay",
            &[img.height() as usize, img.width() as usize],
            &[disc.height(), disc.width()],
        ));
    }
    let mut out = img.clone();
    for (m, colour) in [(boundary(disc), Rgb([255, 0, 0])), (boundary(cup), Rgb([0, 255, 0]))] {
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) {
                    out.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    Ok(out)
}
