//! Core raster type and the few image primitives the pipeline needs:
//! grayscale decoding, [0,1] normalization, bilinear sampling, Gaussian
//! smoothing, and 2x downsampling.

use std::path::Path;

use image::DynamicImage;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale raster. Values are raw [0,255] intensities straight
/// after decoding and [0,1] after [`normalize01`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "data length must be w*h");
        assert!(width >= 1 && height >= 1);
        GrayImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped pixel access; coordinates outside the raster replicate the
    /// nearest border pixel.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }
}

/// Decodes an 8-bit PNG or binary PGM image to grayscale intensities in
/// [0,255]. RGB inputs are reduced with the Rec.601 luminance weights
/// (0.299, 0.587, 0.114); alpha channels are ignored.
pub fn load_grayscale(path: &Path) -> Result<GrayImage, ImagingError> {
    if !path.exists() {
        return Err(ImagingError::MissingFile(path.display().to_string()));
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::Unsupported(u) => ImagingError::UnsupportedFormat(u.to_string()),
        image::ImageError::IoError(io) => ImagingError::Io(io),
        other => ImagingError::CorruptImage(other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| v as f32).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.as_raw().chunks_exact(2).map(|p| p[0] as f32).collect(),
        DynamicImage::ImageRgb8(buf) => buf.as_raw().chunks_exact(3).map(luminance).collect(),
        DynamicImage::ImageRgba8(buf) => buf.as_raw().chunks_exact(4).map(luminance).collect(),
        other => {
            return Err(ImagingError::UnsupportedFormat(format!(
                "{:?} pixels; expected 8-bit gray or RGB",
                other.color()
            )))
        }
    };
    Ok(GrayImage::new(w, h, data))
}

#[inline]
fn luminance(px: &[u8]) -> f32 {
    (0.299f64 * px[0] as f64 + 0.587f64 * px[1] as f64 + 0.114f64 * px[2] as f64) as f32
}

/// Maps [0,255] intensities to [0,1] by dividing by 255.
pub fn normalize01(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|v| v / 255.0).collect(),
    }
}

/// Writes a [0,1] image as an 8-bit grayscale PNG.
pub fn save_png(img: &GrayImage, path: &Path) -> Result<(), ImagingError> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| ImagingError::CorruptImage(e.to_string()))
}

/// Bilinear sample at sub-pixel coordinates; samples whose 2x2 support lies
/// fully outside the raster return `fill`, partial support clamps to the
/// border pixels.
pub fn bilinear(img: &GrayImage, x: f32, y: f32, fill: f32) -> f32 {
    if x < -1.0 || y < -1.0 || x > img.width as f32 || y > img.height as f32 {
        return fill;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v00 = img.get_clamped(xi, yi);
    let v10 = img.get_clamped(xi + 1, yi);
    let v01 = img.get_clamped(xi, yi + 1);
    let v11 = img.get_clamped(xi + 1, yi + 1);
    let top = v00 + fx * (v10 - v00);
    let bot = v01 + fx * (v11 - v01);
    top + fy * (bot - top)
}

/// Separable Gaussian blur with replicated borders. Kernel radius is
/// ceil(4*sigma), wide enough that truncation error is negligible for the
/// scale-space use.
pub fn gaussian_blur(img: &GrayImage, sigma: f32) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / s2).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / sum) as f32).collect();

    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - radius;
                acc += k * img.get_clamped(sx, y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let tmp_img = GrayImage::new(w, h, tmp);
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - radius;
                acc += k * tmp_img.get_clamped(x as isize, sy);
            }
            out[y * w + x] = acc;
        }
    }
    GrayImage::new(w, h, out)
}

/// Decimates by keeping every second pixel; output size is ceil(n/2).
pub fn downsample_half(img: &GrayImage) -> GrayImage {
    let w = img.width.div_ceil(2);
    let h = img.height.div_ceil(2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(img.get(x * 2, y * 2));
        }
    }
    GrayImage::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_idempotence() {
        let img = GrayImage::new(2, 1, vec![0.0, 255.0]);
        let n = normalize01(&img);
        assert_eq!(n.data, vec![0.0, 1.0]);
        assert!((normalize01(&GrayImage::new(1, 1, vec![128.0])).data[0] - 128.0 / 255.0).abs() < 1e-7);

        // re-scaling and normalizing again reproduces the first result
        let rescaled = GrayImage::new(2, 1, n.data.iter().map(|v| v * 255.0).collect());
        let n2 = normalize01(&rescaled);
        for (a, b) in n.data.iter().zip(&n2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_interpolates_and_fills() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(bilinear(&img, 0.0, 0.0, 0.5), 0.0);
        assert!((bilinear(&img, 0.5, 0.5, 0.5) - 0.5).abs() < 1e-6);
        assert_eq!(bilinear(&img, 10.0, 0.0, 0.75), 0.75);
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let img = GrayImage::filled(9, 9, 0.4);
        let b = gaussian_blur(&img, 1.3);
        for v in &b.data {
            assert!((v - 0.4).abs() < 1e-5);
        }
    }

    #[test]
    fn downsample_halves_with_ceil() {
        let img = GrayImage::new(5, 3, (0..15).map(|v| v as f32).collect());
        let d = downsample_half(&img);
        assert_eq!((d.width, d.height), (3, 2));
        assert_eq!(d.get(1, 1), img.get(2, 2));
    }
}
