//! RGBD images and single-channel grids.
//!
//! Colour planes are stored planar (`[3, H, W]`), which is also the layout of
//! a batch-one `[1, C, H, W]` tensor.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use nz_autograd::{Array, Var};

use crate::error::{shape_err, Error, Result};

/// A single-channel `H × W` grid (masks, disparity planes).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_array(&self) -> Array {
        Array::from_vec(&[1, 1, self.height, self.width], self.data.clone()).expect("grid shape")
    }

    pub fn from_array(a: &Array) -> Result<Self> {
        match a.shape() {
            [1, 1, h, w] => Self::new(*w, *h, a.data().to_vec()),
            s => Err(shape_err("[1, 1, H, W]", format!("{s:?}"))),
        }
    }
}

/// Colour, disparity and per-pixel validity for one view.
///
/// Invariants: colour in `[0, 1]`, validity in `[0, 1]`, disparity
/// non-negative and strictly positive wherever validity is positive, and every
/// value finite. Loaded and generated images keep disparity in `(0, 1]`; a
/// warp toward the camera may push it above 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    /// Planar `[3, H, W]`.
    pub rgb: Vec<f64>,
    pub disparity: Vec<f64>,
    pub validity: Vec<f64>,
}

impl RgbdImage {
    pub fn new(
        width: usize,
        height: usize,
        rgb: Vec<f64>,
        disparity: Vec<f64>,
        validity: Vec<f64>,
    ) -> Result<Self> {
        let n = width * height;
        if rgb.len() != 3 * n || disparity.len() != n || validity.len() != n {
            return Err(shape_err(
                format!("rgb {} / disparity {n} / validity {n}", 3 * n),
                format!("{} / {} / {}", rgb.len(), disparity.len(), validity.len()),
            ));
        }
        let img = Self {
            width,
            height,
            rgb,
            disparity,
            validity,
        };
        img.validate()?;
        Ok(img)
    }

    /// Fully valid image from colour and disparity.
    pub fn from_rgb_disparity(width: usize, height: usize, rgb: Vec<f64>, disparity: Vec<f64>) -> Result<Self> {
        Self::new(width, height, rgb, disparity, vec![1.0; width * height])
    }

    /// Fully valid image built pixel by pixel from `(rgb, disparity)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> ([f64; 3], f64)) -> Self {
        let n = width * height;
        let mut rgb = vec![0.0; 3 * n];
        let mut disparity = vec![0.0; n];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let (c, d) = f(x, y);
                for ch in 0..3 {
                    rgb[ch * n + i] = c[ch];
                }
                disparity[i] = d;
            }
        }
        Self {
            width,
            height,
            rgb,
            disparity,
            validity: vec![1.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = self
            .rgb
            .iter()
            .chain(&self.disparity)
            .chain(&self.validity)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidImage("non-finite values".into()));
        }
        if self.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("colour outside [0, 1]".into()));
        }
        if self.validity.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("validity outside [0, 1]".into()));
        }
        for (d, v) in self.disparity.iter().zip(&self.validity) {
            if *d < 0.0 || (*v > 0.0 && *d <= 0.0) {
                return Err(Error::InvalidImage(format!(
                    "disparity {d} invalid (validity {v})"
                )));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &RgbdImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_shape(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(shape_err(
                format!("{width}x{height}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn color(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.pixels();
        let i = y * self.width + x;
        [self.rgb[i], self.rgb[n + i], self.rgb[2 * n + i]]
    }

    #[inline]
    pub fn disparity_at(&self, x: usize, y: usize) -> f64 {
        self.disparity[y * self.width + x]
    }

    pub fn disparity_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.disparity.clone(),
        }
    }

    pub fn validity_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.validity.clone(),
        }
    }

    /// Per-pixel Rec. 601 luma.
    pub fn luminance(&self) -> Grid {
        let n = self.pixels();
        Grid {
            width: self.width,
            height: self.height,
            data: (0..n)
                .map(|i| 0.299 * self.rgb[i] + 0.587 * self.rgb[n + i] + 0.114 * self.rgb[2 * n + i])
                .collect(),
        }
    }

    pub fn mean_luminance(&self) -> f64 {
        self.luminance().mean()
    }

    /// `[1, 3, H, W]`.
    pub fn rgb_array(&self) -> Array {
        Array::from_vec(&[1, 3, self.height, self.width], self.rgb.clone()).expect("rgb shape")
    }

    /// `[1, 1, H, W]`.
    pub fn disparity_array(&self) -> Array {
        Array::from_vec(&[1, 1, self.height, self.width], self.disparity.clone()).expect("disparity shape")
    }

    pub fn validity_array(&self) -> Array {
        Array::from_vec(&[1, 1, self.height, self.width], self.validity.clone()).expect("validity shape")
    }

    /// `[1, 4, H, W]` colour + disparity, the discriminator's input layout.
    pub fn rgbd_array(&self) -> Array {
        Array::concat(&[&self.rgb_array(), &self.disparity_array()], 1)
    }

    /// Mean absolute difference over colour channels.
    pub fn rgb_l1(&self, other: &RgbdImage) -> f64 {
        self.rgb.iter().zip(&other.rgb).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.rgb.len() as f64
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let n = self.pixels();
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(self.rgb[i]), q(self.rgb[n + i]), q(self.rgb[2 * n + i])])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Colour planes from an 8-bit image; disparity must be attached separately.
    pub fn rgb_planes(img: &RgbImage) -> Vec<f64> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut rgb = vec![0.0; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                rgb[c * n + i] = p.0[c] as f64 / 255.0;
            }
        }
        rgb
    }
}

/// Differentiable counterpart of [`RgbdImage`]; every field is `[1, C, H, W]`.
#[derive(Clone, Debug)]
pub struct RgbdVar {
    pub rgb: Var,
    pub disparity: Var,
    pub validity: Var,
}

impl RgbdVar {
    pub fn constant(img: &RgbdImage) -> Self {
        Self {
            rgb: Var::constant(img.rgb_array()),
            disparity: Var::constant(img.disparity_array()),
            validity: Var::constant(img.validity_array()),
        }
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[3]
    }

    pub fn detach(&self) -> Self {
        Self {
            rgb: self.rgb.detach(),
            disparity: self.disparity.detach(),
            validity: self.validity.detach(),
        }
    }

    /// Current values as a plain image (validated).
    pub fn to_image(&self) -> Result<RgbdImage> {
        RgbdImage::new(
            self.width(),
            self.height(),
            self.rgb.value().data().to_vec(),
            self.disparity.value().data().to_vec(),
            self.validity.value().data().to_vec(),
        )
    }

    /// `[1, 4, H, W]` colour + disparity.
    pub fn rgbd(&self) -> Var {
        Var::concat(&[&self.rgb, &self.disparity], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        let ok = RgbdImage::from_fn(2, 2, |_, _| ([0.5; 3], 0.5));
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.disparity[0] = 0.0;
        assert!(bad.validate().is_err());
        bad.validity[0] = 0.0;
        assert!(bad.validate().is_ok(), "holes may carry zero disparity");
        let mut bad = ok.clone();
        bad.rgb[3] = f64::NAN;
        assert!(bad.validate().is_err());
        assert!(RgbdImage::new(2, 2, vec![0.0; 11], vec![0.5; 4], vec![1.0; 4]).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let img = RgbdImage::from_fn(5, 3, |x, y| ([x as f64 / 4.0, y as f64 / 2.0, 0.25], 0.3));
        let bytes = img.png_bytes().unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        let planes = RgbdImage::rgb_planes(&back);
        for (a, b) in planes.iter().zip(&img.rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
