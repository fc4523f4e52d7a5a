//! Single-channel real-valued image planes and their file codecs.
//!
//! Planes hold `f64` samples in row-major order. Frames read from disk are
//! normalized to `[0, 1]`; intermediate planes (detail layers, flow
//! magnitudes) may carry any finite value.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("image plane sample {i}"),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
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
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with clamped (replicated) borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_dims(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; callers check dimensions first.
    pub fn zip_map(&self, other: &ImagePlane, f: impl Fn(f64, f64) -> f64) -> ImagePlane {
        debug_assert!(self.same_dims(other));
        ImagePlane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp01(&self) -> ImagePlane {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImagePlane {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        ImagePlane::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let x0 = fx.floor() as isize;
            let y0 = fy.floor() as isize;
            let ax = fx - x0 as f64;
            let ay = fy - y0 as f64;
            let p00 = self.get_clamped(x0, y0);
            let p10 = self.get_clamped(x0 + 1, y0);
            let p01 = self.get_clamped(x0, y0 + 1);
            let p11 = self.get_clamped(x0 + 1, y0 + 1);
            (1.0 - ay) * ((1.0 - ax) * p00 + ax * p10) + ay * ((1.0 - ax) * p01 + ax * p11)
        })
    }

    /// Loads an 8- or 16-bit PNG/PGM. Color inputs are reduced to luminance.
    pub fn load(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let path = path.as_ref();
        let img = open_image(path)?;
        Ok(match img {
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                let g = img.into_luma16();
                plane_from_samples(g.width(), g.height(), g.as_raw(), 65535.0)
            }
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
                let g = img.into_luma8();
                plane_from_samples(g.width(), g.height(), g.as_raw(), 255.0)
            }
            other => RgbFrame::from_dynamic(other).luminance(),
        })
    }

    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: GrayImage = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| quantize_u8(v)).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| quantize_u16(v)).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    /// Binary PGM (P5), 8-bit or 16-bit big-endian.
    pub fn save_pgm(&self, path: impl AsRef<Path>, sixteen_bit: bool) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(self.len() * 2 + 32);
        let maxval = if sixteen_bit { 65535 } else { 255 };
        write!(out, "P5\n{} {}\n{}\n", self.width, self.height, maxval)
            .expect("write to vec");
        for &v in &self.data {
            if sixteen_bit {
                out.extend_from_slice(&quantize_u16(v).to_be_bytes());
            } else {
                out.push(quantize_u8(v));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Round-half-to-even quantization of a `[0, 1]` sample.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round_ties_even() as u16
}

fn plane_from_samples<T: Copy + Into<f64>>(w: u32, h: u32, raw: &[T], scale: f64) -> ImagePlane {
    ImagePlane {
        width: w as usize,
        height: h as usize,
        data: raw.iter().map(|&s| s.into() / scale).collect(),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

/// Three aligned color planes.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    pub r: ImagePlane,
    pub g: ImagePlane,
    pub b: ImagePlane,
}

impl RgbFrame {
    pub fn new(r: ImagePlane, g: ImagePlane, b: ImagePlane) -> Result<Self> {
        r.check_same_dims(&g, "rgb planes")?;
        r.check_same_dims(&b, "rgb planes")?;
        Ok(Self { r, g, b })
    }

    pub fn gray(plane: &ImagePlane) -> Self {
        Self {
            r: plane.clone(),
            g: plane.clone(),
            b: plane.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.r.width()
    }

    pub fn height(&self) -> usize {
        self.r.height()
    }

    /// ITU-R BT.601 luma.
    pub fn luminance(&self) -> ImagePlane {
        let data = self
            .r
            .data()
            .iter()
            .zip(self.g.data())
            .zip(self.b.data())
            .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect();
        ImagePlane {
            width: self.r.width(),
            height: self.r.height(),
            data,
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbFrame {
        RgbFrame {
            r: self.r.resize_bilinear(width, height),
            g: self.g.resize_bilinear(width, height),
            b: self.b.resize_bilinear(width, height),
        }
    }

    /// Replaces the luma of this frame with `luma`, keeping the per-pixel
    /// chroma offsets (R−Y, G−Y, B−Y).
    pub fn with_luminance(&self, luma: &ImagePlane) -> Result<RgbFrame> {
        self.r.check_same_dims(luma, "chroma reattach")?;
        let y = self.luminance();
        let shift = |c: &ImagePlane| {
            ImagePlane::from_fn(c.width(), c.height(), |x, yy| {
                (c.get(x, yy) - y.get(x, yy) + luma.get(x, yy)).clamp(0.0, 1.0)
            })
        };
        Ok(RgbFrame {
            r: shift(&self.r),
            g: shift(&self.g),
            b: shift(&self.b),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RgbFrame> {
        let img = open_image(path.as_ref())?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: DynamicImage) -> RgbFrame {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let (mut r, mut g, mut b) = (
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
        );
        if sixteen {
            for px in img.into_rgb16().pixels() {
                r.push(px[0] as f64 / 65535.0);
                g.push(px[1] as f64 / 65535.0);
                b.push(px[2] as f64 / 65535.0);
            }
        } else {
            for px in img.into_rgb8().pixels() {
                r.push(px[0] as f64 / 255.0);
                g.push(px[1] as f64 / 255.0);
                b.push(px[2] as f64 / 255.0);
            }
        }
        let mk = |data| ImagePlane {
            width: w,
            height: h,
            data,
        };
        RgbFrame {
            r: mk(r),
            g: mk(g),
            b: mk(b),
        }
    }

    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = RgbImage::new(self.width() as u32, self.height() as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Rgb([
                quantize_u8(self.r.data()[i]),
                quantize_u8(self.g.data()[i]),
                quantize_u8(self.b.data()[i]),
            ]);
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}
