//! Procedural "real" images: random expression trees over pixel
//! coordinates, colored through a cosine palette.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, Image};
use crate::manifest::{self, DatasetManifest, Label};
use crate::seed;

pub const SOURCE_TAG: &str = "procedural";
pub const DEFAULT_SIDE: u32 = 384;
pub const MAX_ATTEMPTS: usize = 10;

/// Scalar field over `(u, v)` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    /// `sin(2π (fu·u + fv·v) + phase)`.
    Sin { fu: f64, fv: f64, phase: f64 },
    /// Smoothly interpolated value noise on a lattice with `freq` cells per unit.
    Noise { freq: f64, seed: u64 },
    /// Evaluates the child at `(u + a·(v² − v) + c·u·v, v + b·(u² − u))`.
    Warp { a: f64, b: f64, c: f64, child: Box<Node> },
    /// Evaluates the child at coordinates rotated by `theta` about the image center.
    Rotate { theta: f64, child: Box<Node> },
    /// `t·lhs + (1 − t)·rhs`, or the product when `multiply` is set.
    Blend { t: f64, multiply: bool, lhs: Box<Node>, rhs: Box<Node> },
}

/// `rgb_c(s) = offset_c + amp_c · cos(2π (freq_c · s + phase_c))` with `s = (value + 1) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub offset: [f64; 3],
    pub amp: [f64; 3],
    pub freq: [f64; 3],
    pub phase: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureProgram {
    pub palette: Palette,
    pub body: Node,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(ix as u64 ^ mix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Node {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Node::Sin { fu, fv, phase } => (TAU * (fu * u + fv * v) + phase).sin(),
            Node::Noise { freq, seed } => {
                let (x, y) = (u * freq, v * freq);
                let (x0, y0) = (x.floor(), y.floor());
                let (tx, ty) = (smooth(x - x0), smooth(y - y0));
                let (ix, iy) = (x0 as i64, y0 as i64);
                let top = lattice(*seed, ix, iy) * (1.0 - tx) + lattice(*seed, ix + 1, iy) * tx;
                let bottom = lattice(*seed, ix, iy + 1) * (1.0 - tx) + lattice(*seed, ix + 1, iy + 1) * tx;
                top * (1.0 - ty) + bottom * ty
            }
            Node::Warp { a, b, c, child } => child.eval(u + a * (v * v - v) + c * u * v, v + b * (u * u - u)),
            Node::Rotate { theta, child } => {
                let (s, co) = theta.sin_cos();
                let (du, dv) = (u - 0.5, v - 0.5);
                child.eval(0.5 + co * du - s * dv, 0.5 + s * du + co * dv)
            }
            Node::Blend { t, multiply, lhs, rhs } => {
                let (a, b) = (lhs.eval(u, v), rhs.eval(u, v));
                if *multiply {
                    a * b
                } else {
                    t * a + (1.0 - t) * b
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Sin { .. } | Node::Noise { .. } => 1,
            Node::Warp { child, .. } | Node::Rotate { child, .. } => 1 + child.depth(),
            Node::Blend { lhs, rhs, .. } => 1 + lhs.depth().max(rhs.depth()),
        }
    }
}

impl Palette {
    pub fn color(&self, value: f64) -> [f64; 3] {
        let s = (value + 1.0) / 2.0;
        std::array::from_fn(|c| {
            (self.offset[c] + self.amp[c] * (TAU * (self.freq[c] * s + self.phase[c])).cos()).clamp(0.0, 1.0)
        })
    }
}

impl TextureProgram {
    /// Depth including the palette root, so `palette(sin)` has depth 2.
    pub fn depth(&self) -> usize {
        1 + self.body.depth()
    }

    /// Color at normalized coordinates, each channel in `[0, 1]`.
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        self.palette.color(self.body.eval(u, v))
    }
}

fn sample_leaf(rng: &mut impl Rng) -> Node {
    if rng.random_bool(0.6) {
        let freq = rng.random_range(0.5..6.0);
        let angle = rng.random_range(0.0..TAU);
        Node::Sin {
            fu: freq * angle.cos(),
            fv: freq * angle.sin(),
            phase: rng.random_range(0.0..TAU),
        }
    } else {
        Node::Noise {
            freq: rng.random_range(2.0..12.0),
            seed: rng.random(),
        }
    }
}

fn sample_node(rng: &mut impl Rng, depth: usize) -> Node {
    if depth <= 1 {
        return sample_leaf(rng);
    }
    match rng.random_range(0..3) {
        0 => Node::Warp {
            a: rng.random_range(-1.5..1.5),
            b: rng.random_range(-1.5..1.5),
            c: rng.random_range(-1.0..1.0),
            child: Box::new(sample_node(rng, depth - 1)),
        },
        1 => Node::Rotate {
            theta: rng.random_range(0.0..TAU),
            child: Box::new(sample_node(rng, depth - 1)),
        },
        _ => {
            let deep = Box::new(sample_node(rng, depth - 1));
            let other_depth = rng.random_range(1..depth);
            let other = Box::new(sample_node(rng, other_depth));
            let (lhs, rhs) = if rng.random_bool(0.5) { (deep, other) } else { (other, deep) };
            Node::Blend {
                t: rng.random_range(0.2..0.8),
                multiply: rng.random_bool(0.3),
                lhs,
                rhs,
            }
        }
    }
}

fn sample_palette(rng: &mut impl Rng) -> Palette {
    let mut offset = [0.0; 3];
    let mut amp = [0.0; 3];
    for c in 0..3 {
        offset[c] = rng.random_range(0.3..0.7);
        amp[c] = rng.random_range(0.15..0.5);
    }
    Palette {
        offset,
        amp,
        freq: std::array::from_fn(|_| rng.random_range(0.5..2.0)),
        phase: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
    }
}

/// Draws a program whose depth (palette root included) is uniform in `depth_range`.
pub fn sample_program(rng: &mut impl Rng, depth_range: (usize, usize)) -> Result<TextureProgram> {
    let (lo, hi) = depth_range;
    if lo < 2 || hi > 12 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "depth range [{lo}, {hi}] must lie within [2, 12]"
        )));
    }
    let depth = rng.random_range(lo..=hi);
    let palette = sample_palette(rng);
    Ok(TextureProgram {
        palette,
        body: sample_node(rng, depth - 1),
    })
}

/// Evaluates the program at pixel centers `((x + 0.5) / w, (y + 0.5) / h)`.
/// A constant image yields [`Error::ConstantRender`].
pub fn render(p: &TextureProgram, w: u32, h: u32) -> Result<Image> {
    if w < 32 || h < 32 {
        return Err(Error::InvalidArgument(format!("render size {w}x{h} below 32x32")));
    }
    let img = Image::from_fn(w, h, |x, y| {
        let rgb = p.eval((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        image::Rgb(rgb.map(|c| (c * 255.0).round() as u8))
    });
    let first = *img.get_pixel(0, 0);
    if img.pixels().all(|px| *px == first) {
        return Err(Error::ConstantRender);
    }
    Ok(img)
}

/// Samples programs until one renders a non-constant image, at most
/// [`MAX_ATTEMPTS`] times.
pub fn sample_rendered(rng: &mut impl Rng, depth_range: (usize, usize), w: u32, h: u32) -> Result<(TextureProgram, Image)> {
    for _ in 0..MAX_ATTEMPTS {
        let p = sample_program(rng, depth_range)?;
        match render(&p, w, h) {
            Ok(img) => return Ok((p, img)),
            Err(Error::ConstantRender) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConstantRender)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureDatasetConfig {
    pub n: usize,
    pub side: u32,
    pub jpeg_quality: (u8, u8),
    pub depth_range: (usize, usize),
    pub seed: u64,
}

impl Default for TextureDatasetConfig {
    fn default() -> Self {
        TextureDatasetConfig {
            n: 100,
            side: DEFAULT_SIDE,
            jpeg_quality: (70, 100),
            depth_range: (2, 6),
            seed: 0,
        }
    }
}

/// Renders `cfg.n` textures and saves them as JPEGs with per-image quality
/// uniform in `cfg.jpeg_quality`. Image `i` depends only on `(seed, i)`.
/// On failure, files written so far are removed.
pub fn generate_dataset(cfg: &TextureDatasetConfig, out_root: &Path) -> Result<DatasetManifest> {
    let (lo, hi) = cfg.jpeg_quality;
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("texture count must be at least 1".into()));
    }
    if lo == 0 || lo > hi || hi > 100 {
        return Err(Error::InvalidArgument(format!("JPEG quality range {lo}:{hi} invalid")));
    }
    std::fs::create_dir_all(out_root).at(out_root)?;
    let root = out_root.canonicalize().at(out_root)?;
    let mut m = DatasetManifest::new(root.clone());
    m.meta.insert("source_tag".into(), SOURCE_TAG.into());
    m.meta.insert("seed".into(), cfg.seed.to_string());
    m.meta.insert("jpeg_quality".into(), format!("{lo}:{hi}"));
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        for i in 0..cfg.n {
            let mut rng = seed::rng(cfg.seed, &format!("texture/{i}"));
            let (_, img) = sample_rendered(&mut rng, cfg.depth_range, cfg.side, cfg.side)?;
            let quality = rng.random_range(lo..=hi);
            let name = format!("tex_{i:06}.jpg");
            let path = root.join(&name);
            written.push(path.clone());
            std::fs::write(&path, imaging::encode_jpeg(&img, quality)?).at(&path)?;
            m.records.push(manifest::describe_file(
                &root,
                &path,
                format!("{SOURCE_TAG}:{name}"),
                Label::Real,
                SOURCE_TAG,
                None,
            )?);
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in written {
            let _ = std::fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn exact_depth_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(sample_program(&mut rng, (2, 2)).unwrap().depth(), 2);
            let d = sample_program(&mut rng, (3, 7)).unwrap().depth();
            assert!((3..=7).contains(&d));
        }
        assert!(sample_program(&mut rng, (1, 4)).is_err());
        assert!(sample_program(&mut rng, (2, 13)).is_err());
    }

    #[test]
    fn sinusoid_pixel_closed_form() {
        let palette = Palette {
            offset: [0.5; 3],
            amp: [0.5, 0.25, 0.4],
            freq: [1.0; 3],
            phase: [0.0, 0.25, 0.5],
        };
        let p = TextureProgram {
            palette,
            body: Node::Sin {
                fu: 2.0,
                fv: 1.0,
                phase: 0.3,
            },
        };
        let img = render(&p, 64, 32).unwrap();
        let (u, v) = (0.5 / 64.0, 0.5 / 32.0);
        let s = ((TAU * (2.0 * u + v) + 0.3).sin() + 1.0) / 2.0;
        let expect = [
            0.5 + 0.5 * (TAU * s).cos(),
            0.5 + 0.25 * (TAU * (s + 0.25)).cos(),
            0.5 + 0.4 * (TAU * (s + 0.5)).cos(),
        ];
        let px = img.get_pixel(0, 0);
        for c in 0..3 {
            assert_eq!(px[c], (expect[c] * 255.0).round() as u8);
        }
    }

    #[test]
    fn constant_program_is_signaled() {
        let p = TextureProgram {
            palette: Palette {
                offset: [0.5; 3],
                amp: [0.0; 3],
                freq: [1.0; 3],
                phase: [0.0; 3],
            },
            body: Node::Sin {
                fu: 1.0,
                fv: 0.0,
                phase: 0.0,
            },
        };
        assert!(matches!(render(&p, 32, 32), Err(Error::ConstantRender)));
    }

    #[test]
    fn tiny_render_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_program(&mut rng, (2, 4)).unwrap();
        assert!(render(&p, 31, 64).is_err());
    }
}
