use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::io::read_file;

/// Decoding target: square resolution, channel count and per-channel
/// normalization `(x - mean) / std` applied after scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub size: usize,
    pub channels: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ImageSpec {
    pub fn new(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    /// Identity normalization, leaving pixels in `[0, 1]`.
    pub fn raw(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "image spec needs a positive size and 1 or 3 channels, got {}px × {}",
                self.size, self.channels
            )));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::Config("mean/std need one value per channel".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("std must be positive".into()));
        }
        Ok(())
    }
}

/// A decoded image with the source's width and height.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub pixels: Tensor,
    pub width: usize,
    pub height: usize,
}

/// `C×H×W` values in `[0, 1]` at the source resolution.
pub fn decode_raw(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?;
    to_tensor(&img, channels)
}

fn to_tensor(img: &DynamicImage, channels: usize) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => {
            let g = img.to_luma32f();
            g.into_raw()
        }
        3 => {
            let rgb = img.to_rgb32f();
            let raw = rgb.as_raw();
            let mut planar = vec![0.0; 3 * w * h];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * w * h + i] = px[c];
                }
            }
            planar
        }
        n => return Err(Error::Config(format!("unsupported channel count {n}"))),
    };
    Tensor::new([channels, h, w], data)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::dim("resize", image.shape(), &[0, out_h, out_w]));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

pub fn normalize(image: &mut Tensor, mean: &[f32], std: &[f32]) {
    let c = image.shape()[0];
    let plane = image.numel() / c;
    for (ch, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
}

/// Decodes, resizes to `spec.size` and normalizes.
pub fn load_image_bytes(bytes: &[u8], spec: &ImageSpec) -> Result<Decoded> {
    spec.validate()?;
    let raw = decode_raw(bytes, spec.channels)?;
    let (height, width) = (raw.shape()[1], raw.shape()[2]);
    let mut pixels = resize_bilinear(&raw, spec.size, spec.size)?;
    normalize(&mut pixels, &spec.mean, &spec.std);
    Ok(Decoded { pixels, width, height })
}

pub fn load_image(path: impl AsRef<Path>, spec: &ImageSpec) -> Result<Decoded> {
    let bytes = read_file(path)?;
    load_image_bytes(&bytes, spec)
}

/// Encodes `C×H×W` values in `[0, 1]` as 8-bit PNG (grey or RGB).
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::dim("encode_png", image.shape(), &[3, 0, 0]));
    };
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data = image.data();
    let img = match c {
        1 => DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w as u32, h as u32, data.iter().map(|&v| q(v)).collect())
                .expect("buffer size matches"),
        ),
        3 => {
            let mut interleaved = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for ch in 0..3 {
                    interleaved.push(q(data[ch * h * w + i]));
                }
            }
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w as u32, h as u32, interleaved).expect("buffer size matches"),
            )
        }
        n => return Err(Error::Config(format!("cannot encode {n} channels"))),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_png_decodes_to_zero() {
        let png = encode_png(&Tensor::zeros([3, 5, 7])).unwrap();
        let d = load_image_bytes(&png, &ImageSpec::raw(4, 3)).unwrap();
        assert_eq!((d.width, d.height), (7, 5));
        assert!(d.pixels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let checker = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&checker, 2, 2).unwrap(), checker);
        let png = encode_png(&checker).unwrap();
        let d = load_image_bytes(&png, &ImageSpec::raw(2, 1)).unwrap();
        assert_eq!(d.pixels.data(), checker.data());
    }

    #[test]
    fn grey_normalizes_to_zero() {
        let mut t = Tensor::full([3, 2, 2], 0.5);
        normalize(&mut t, &[0.5; 3], &[0.5; 3]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_interpolates_and_downsample_averages() {
        let ramp = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = resize_bilinear(&ramp, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
        let down = resize_bilinear(&up, 1, 2).unwrap();
        assert_eq!(down.data(), &[0.125, 0.875]);
    }

    #[test]
    fn garbage_bytes_fail() {
        assert!(matches!(
            load_image_bytes(b"not an image", &ImageSpec::new(4, 3)),
            Err(Error::Image(_))
        ));
    }
}
