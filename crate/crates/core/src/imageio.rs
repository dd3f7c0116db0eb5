//! Lossless PNG I/O and pixel-domain conversions.
//!
//! Images move through the pipeline as f64 tensors holding 8-bit values
//! (`(3,H,W)`, 0..255) or as model-domain grids in [-1, 1].

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("save_rgb expects 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| img.data()[ch * h * w + y * w + x].clamp(0.0, 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    {
        let d = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    d[c * h * w + y * w + x] = p[c] as f64;
                }
            }
        }
    }
    Ok(t)
}

pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.data()[y * w + x] >= 0.5 { 255 } else { 0 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    {
        let d = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = if img.get_pixel(x as u32, y as u32)[0] >= 128 {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    Ok(t)
}

/// 8-bit domain (0..255) to model domain [-1, 1].
pub fn to_model_domain(img: &Tensor) -> Tensor {
    img.map(|v| v / 127.5 - 1.0)
}

/// Model domain [-1, 1] back to the 8-bit domain, clamped and quantized.
pub fn to_pixel_domain(img: &Tensor) -> Tensor {
    img.map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0).round())
}
