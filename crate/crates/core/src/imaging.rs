//! 8-bit RGB image helpers: codecs, resampling, and the pixel-level
//! corruptions shared by augmentation and robustness sweeps.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::codecs::webp::WebPEncoder;
use image::imageops::FilterType;
use image::{ImageEncoder, ImageFormat, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::Tensor;

pub use image::RgbImage as Image;

/// Kernel side of every Gaussian blur in the toolkit.
pub const BLUR_KERNEL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerFormat {
    Png,
    Jpeg,
    Webp,
}

impl ContainerFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ContainerFormat::Png),
            "jpg" | "jpeg" => Some(ContainerFormat::Jpeg),
            "webp" => Some(ContainerFormat::Webp),
            _ => None,
        }
    }

    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        match image::guess_format(bytes).ok()? {
            ImageFormat::Png => Some(ContainerFormat::Png),
            ImageFormat::Jpeg => Some(ContainerFormat::Jpeg),
            ImageFormat::WebP => Some(ContainerFormat::Webp),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ContainerFormat::Png => "png",
            ContainerFormat::Jpeg => "jpg",
            ContainerFormat::Webp => "webp",
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn load(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(buf)
}

pub fn encode_jpeg(img: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode_image(img)?;
    Ok(buf)
}

/// Lossy WebP through libwebp.
pub fn encode_webp(img: &RgbImage, quality: f32) -> Result<Vec<u8>> {
    let encoder = webp::Encoder::from_rgb(img.as_raw(), img.width(), img.height());
    let mem = encoder
        .encode_simple(false, quality.clamp(0.0, 100.0))
        .map_err(|e| Error::parse("webp encoding", format!("{e:?}")))?;
    Ok(mem.to_vec())
}

pub fn encode_webp_lossless(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    WebPEncoder::new_lossless(&mut buf).write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(buf.into_inner())
}

pub fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    decode(&encode_jpeg(img, quality)?)
}

pub fn webp_round_trip(img: &RgbImage, quality: f32) -> Result<RgbImage> {
    decode(&encode_webp(img, quality)?)
}

/// Bilinear resampling; the filter support widens on downscale, which
/// antialiases. Same-size requests return an exact copy.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    image::imageops::resize(img, width, height, FilterType::Triangle)
}

/// Aspect-preserving rescale; each side is rounded and kept at least 1 px.
pub fn rescale(img: &RgbImage, scale: f64) -> RgbImage {
    let w = ((img.width() as f64 * scale).round() as u32).max(1);
    let h = ((img.height() as f64 * scale).round() as u32).max(1);
    resize(img, w, h)
}

pub fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with a 9-tap kernel and mirrored borders.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma, BLUR_KERNEL);
    let half = (BLUR_KERNEL / 2) as isize;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut tmp = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let xx = reflect101(x as isize + t as isize - half, w);
                    acc += kv * src[(y * w + xx) * 3 + c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let yy = reflect101(y as isize + t as isize - half, h);
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, out).expect("buffer size")
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Replaces every pixel with its Rec. 601 luma on all three channels.
pub fn grayscale(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let y = luma(p[0] as f64, p[1] as f64, p[2] as f64).round().clamp(0.0, 255.0) as u8;
        p.0 = [y, y, y];
    }
    out
}

/// Additive zero-mean Gaussian noise (`sigma` on the 0–255 scale), clipped.
/// The field depends only on `(seed, dims)`.
pub fn add_gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.iter_mut() {
        let n: f64 = normal.sample(&mut rng);
        *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Zero-fills the given rectangle (clipped to the image).
pub fn cutout(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    let mut out = img.clone();
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            out.put_pixel(xx, yy, image::Rgb([0, 0, 0]));
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast and saturation are multiplicative factors (1 = no
/// change); hue is a shift in turns. Applied in that order.
pub fn color_jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> RgbImage {
    let n = (img.width() * img.height()) as usize;
    let mut px: Vec<[f64; 3]> = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    for p in px.iter_mut() {
        p.iter_mut().for_each(|c| *c = clamp01(*c * brightness));
    }
    if contrast != 1.0 {
        let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f64>() / n.max(1) as f64;
        for p in px.iter_mut() {
            p.iter_mut().for_each(|c| *c = clamp01(contrast * *c + (1.0 - contrast) * mean));
        }
    }
    if saturation != 1.0 {
        for p in px.iter_mut() {
            let y = luma(p[0], p[1], p[2]);
            p.iter_mut().for_each(|c| *c = clamp01(saturation * *c + (1.0 - saturation) * y));
        }
    }
    if hue != 0.0 {
        for p in px.iter_mut() {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            *p = [r, g, b];
        }
    }
    let raw = px
        .iter()
        .flat_map(|p| p.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("buffer size")
}

/// `[1, 3, h, w]` tensor with values in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Quantizes the first sample of a 3-channel tensor back to 8 bits.
pub fn from_tensor(t: &Tensor) -> RgbImage {
    assert_eq!(t.c(), 3, "expected a 3-channel tensor");
    let (h, w) = (t.h(), t.w());
    let s = t.sample(0);
    let mut raw = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            raw[i * 3 + c] = (s[c * w * h + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size")
}

pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let s: u64 = a.iter().zip(b.iter()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
    s as f64 / a.as_raw().len() as f64
}

/// Mean squared difference on the `[0, 1]` scale.
pub fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let s: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| ((*x as f64 - *y as f64) / 255.0).powi(2))
        .sum();
    s / a.as_raw().len() as f64
}

pub fn pixel_std(img: &RgbImage) -> f64 {
    let n = img.as_raw().len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    (img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let img = gradient(20, 13);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.7, BLUR_KERNEL);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..BLUR_KERNEL {
            assert_eq!(k[i], k[BLUR_KERNEL - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::from_pixel(11, 7, image::Rgb([40, 90, 200]));
        assert_eq!(gaussian_blur(&img, 2.5), img);
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect101(-1, 5), 1);
        assert_eq!(reflect101(-4, 5), 4);
        assert_eq!(reflect101(5, 5), 3);
        assert_eq!(reflect101(8, 5), 0);
    }

    #[test]
    fn resize_same_size_is_copy_and_half_scale_halves() {
        let img = gradient(64, 48);
        assert_eq!(resize(&img, 64, 48), img);
        assert_eq!(rescale(&img, 0.5).dimensions(), (32, 24));
    }

    #[test]
    fn jpeg_quality_controls_size() {
        let img = gradient(96, 96);
        let hi = encode_jpeg(&img, 100).unwrap();
        let lo = encode_jpeg(&img, 10).unwrap();
        assert!(lo.len() < hi.len());
        assert_eq!(ContainerFormat::sniff(&hi), Some(ContainerFormat::Jpeg));
    }

    #[test]
    fn webp_lossy_and_lossless() {
        let img = gradient(40, 30);
        let lossless = decode(&encode_webp_lossless(&img).unwrap()).unwrap();
        assert_eq!(lossless, img);
        let lossy = webp_round_trip(&img, 10.0).unwrap();
        assert_eq!(lossy.dimensions(), img.dimensions());
    }

    #[test]
    fn identity_jitter_is_exact() {
        let img = gradient(17, 9);
        assert_eq!(color_jitter(&img, 1.0, 1.0, 1.0, 0.0), img);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.8, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_depends_only_on_seed() {
        let img = gradient(16, 16);
        assert_eq!(add_gaussian_noise(&img, 4.0, 9), add_gaussian_noise(&img, 4.0, 9));
        assert_ne!(add_gaussian_noise(&img, 4.0, 9), add_gaussian_noise(&img, 4.0, 10));
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = gradient(13, 11);
        assert_eq!(from_tensor(&to_tensor(&img)), img);
    }
}
