//! RGB images at the file boundary, binary PPM I/O, and the PSNR / SSIM metrics.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unsupported image format `{0}` (expected binary PPM `P6`)")]
    UnsupportedFormat(String),
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image dimensions must be nonzero")]
    Empty,
    #[cfg(feature = "png")]
    #[error("png: {0}")]
    Png(String),
}

/// Three-channel image with planar float values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Channel-planar: `data[(c * height + y) * width + x]`.
    data: Vec<f32>,
    source: Option<PathBuf>,
}

impl Image {
    /// Builds an image from planar RGB data, clamping values into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FormatError::Empty.into());
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(
                "image",
                "data",
                format!("{}x{} RGB needs {} values, got {}", height, width, 3 * height * width, data.len()),
            ));
        }
        let data = data.into_iter().map(clamp01).collect();
        Ok(Image {
            height,
            width,
            data,
            source: None,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        Image {
            height,
            width,
            data,
            source: None,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Image from batch item `index` of a `(B, 3, H, W)` tensor; values are clamped.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4("image")?;
        if c != 3 {
            return Err(Error::shape("image", "channels", format!("expected 3, got {c}")));
        }
        if index >= b {
            return Err(Error::shape("image", "batch", format!("index {index} of {b}")));
        }
        let item = 3 * h * w;
        Self::from_planar(
            h,
            w,
            t.data()[index * item..(index + 1) * item]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        )
    }

    /// Window of size `h x w` with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Self::from_fn(h, w, |c, y, x| self.get(c, top + y, left + x));
        out.source = self.source.clone();
        Ok(out)
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height || w > self.width {
            return Err(Error::InvalidArgument(format!(
                "center crop {h}x{w} larger than {}x{} image",
                self.height, self.width
            )));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// Pastes `tile` with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, tile: &Image, top: usize, left: usize) -> Result<()> {
        if top + tile.height > self.height || left + tile.width > self.width {
            return Err(Error::InvalidArgument("paste outside image bounds".into()));
        }
        for c in 0..3 {
            for y in 0..tile.height {
                for x in 0..tile.width {
                    self.data[(c * self.height + top + y) * self.width + left + x] = tile.get(c, y, x);
                }
            }
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x));
        out.source = self.source.clone();
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = Self::from_fn(self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x));
        out.source = self.source.clone();
        out
    }

    /// Rotation by 90 degrees counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Self::from_fn(w, h, |c, y, x| self.get(c, x, w - 1 - y));
        out.source = self.source.clone();
        out
    }

    /// Bilinear resize (half-pixel centres).
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let t = crate::tensor::ops::resize_bilinear(&self.to_tensor::<f32>(), h, w)?;
        let mut out = Self::from_tensor(&t, 0)?;
        out.source = self.source.clone();
        Ok(out)
    }
}

fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Quantizes to a byte with round-half-up and clamping.
pub fn quantize(v: f32) -> u8 {
    let v = clamp01(v) as f64 * 255.0;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Parses a binary PPM (`P6`, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, FormatError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::MalformedHeader(format!(
                "header ended after {} of 4 fields",
                fields.len()
            )));
        }
        let token = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        if fields.is_empty() && token != "P6" {
            return Err(FormatError::UnsupportedFormat(token));
        }
        fields.push(token);
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(FormatError::MalformedHeader("missing separator before payload".into()));
    }
    pos += 1;
    let parse = |name: &str, s: &str| {
        s.parse::<u32>()
            .map_err(|_| FormatError::MalformedHeader(format!("{name} `{s}` is not an integer")))
    };
    let width = parse("width", &fields[1])? as usize;
    let height = parse("height", &fields[2])? as usize;
    let maxval = parse("maxval", &fields[3])?;
    if maxval != 255 {
        return Err(FormatError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(FormatError::Empty);
    }
    let expected = 3 * width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; expected];
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image {
        height,
        width,
        data,
        source: None,
    })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let n = img.width * img.height;
    let mut out = Vec::with_capacity(header.len() + 3 * n);
    out.extend_from_slice(header.as_bytes());
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(img.data[c * n + i]));
        }
    }
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    #[cfg(feature = "png")]
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(&bytes).map(|img| img.with_source(path));
    }
    Ok(decode_ppm(&bytes)?.with_source(path))
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    #[cfg(feature = "png")]
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return encode_png(img, path);
    }
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| FormatError::Png(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

#[cfg(feature = "png")]
fn encode_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| quantize(img.get(c, y as usize, x as usize))))
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| FormatError::Png(e.to_string()).into())
}

fn same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            op,
            "spatial",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims("mse", a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03,
/// dynamic range 1), computed per RGB channel and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension {
            op: "ssim",
            dim: if h < SSIM_WINDOW { "height" } else { "width" },
            value: h.min(w),
            requirement: format!(">= {SSIM_WINDOW}"),
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}
