use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{ensure_config, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD_GRAY: u8 = 114;

/// Geometry of one aspect-preserving resize plus centred padding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
    pub src_width: u32,
    pub src_height: u32,
    pub size: u32,
}

impl Letterbox {
    pub fn new(src_width: u32, src_height: u32, size: u32) -> Result<Self> {
        if src_width == 0 || src_height == 0 {
            return Err(Error::contract(format!("cannot letterbox a {src_width}×{src_height} image")));
        }
        ensure_config!(size > 0 && size % 32 == 0, "letterbox target {size} is not a multiple of 32");
        let scale = (size as f64 / src_width as f64).min(size as f64 / src_height as f64);
        let nw = ((src_width as f64 * scale).round() as u32).clamp(1, size);
        let nh = ((src_height as f64 * scale).round() as u32).clamp(1, size);
        let (px, py) = (size - nw, size - nh);
        Ok(Self {
            scale,
            pad_left: px / 2,
            pad_top: py / 2,
            pad_right: px - px / 2,
            pad_bottom: py - py / 2,
            src_width,
            src_height,
            size,
        })
    }

    pub fn resized_dims(&self) -> (u32, u32) {
        (self.size - self.pad_left - self.pad_right, self.size - self.pad_top - self.pad_bottom)
    }

    /// Source pixels → letterboxed pixels.
    pub fn forward(&self, b: &BBox) -> BBox {
        let (l, t) = (self.pad_left as f64, self.pad_top as f64);
        BBox::new(b.x1 * self.scale + l, b.y1 * self.scale + t, b.x2 * self.scale + l, b.y2 * self.scale + t)
    }

    /// Letterboxed pixels → source pixels.
    pub fn inverse(&self, b: &BBox) -> BBox {
        let (l, t) = (self.pad_left as f64, self.pad_top as f64);
        BBox::new((b.x1 - l) / self.scale, (b.y1 - t) / self.scale, (b.x2 - l) / self.scale, (b.y2 - t) / self.scale)
    }
}

pub fn letterbox(img: &RgbImage, size: u32) -> Result<(RgbImage, Letterbox)> {
    let lb = Letterbox::new(img.width(), img.height(), size)?;
    let (nw, nh) = lb.resized_dims();
    let mut out = RgbImage::from_pixel(size, size, Rgb([PAD_GRAY; 3]));
    if (nw, nh) == img.dimensions() {
        imageops::replace(&mut out, img, lb.pad_left as i64, lb.pad_top as i64);
    } else {
        let resized = imageops::resize(img, nw, nh, imageops::FilterType::Triangle);
        imageops::replace(&mut out, &resized, lb.pad_left as i64, lb.pad_top as i64);
    }
    Ok((out, lb))
}

/// `(3, H, W)` tensor scaled to `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        T::of(raw[p * 3 + c] as f64 / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_case() {
        let lb = Letterbox::new(640, 640, 256).unwrap();
        assert_eq!(lb.scale, 0.4);
        assert_eq!((lb.pad_left, lb.pad_top, lb.pad_right, lb.pad_bottom), (0, 0, 0, 0));
    }

    #[test]
    fn wide_case_pads_vertically() {
        let lb = Letterbox::new(640, 320, 256).unwrap();
        assert_eq!(lb.scale, 0.4);
        assert_eq!(lb.resized_dims(), (256, 128));
        assert_eq!((lb.pad_top, lb.pad_bottom), (64, 64));
        assert_eq!((lb.pad_left, lb.pad_right), (0, 0));
    }

    #[test]
    fn round_trip_and_padding_colour() {
        let img = RgbImage::from_pixel(300, 200, Rgb([10, 20, 30]));
        let (out, lb) = letterbox(&img, 128).unwrap();
        assert_eq!(out.dimensions(), (128, 128));
        assert_eq!(out.get_pixel(0, 0), &Rgb([PAD_GRAY; 3]));
        assert_eq!(out.get_pixel(64, 64), &Rgb([10, 20, 30]));
        let b = BBox::new(12.5, 40.25, 290.0, 199.0);
        let r = lb.inverse(&lb.forward(&b));
        for (u, v) in [(b.x1, r.x1), (b.y1, r.y1), (b.x2, r.x2), (b.y2, r.y2)] {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Letterbox::new(0, 10, 64).is_err());
        assert!(Letterbox::new(10, 10, 100).is_err());
    }
}
