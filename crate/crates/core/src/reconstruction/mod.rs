//! Aligned fakes: every real image passes once through an autoencoder,
//! `x -> decode(encode(x))`, and keeps its exact resolution.

mod toy;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{AttentionCounting, NetworkCostConfig};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, ContainerFormat, Image};
use crate::manifest::{self, DatasetManifest, Label};
use crate::nn::Tensor;
use crate::seed;

pub use toy::{train_toy_autoencoder, ToyAutoencoder, ToyAutoencoderConfig, TrainedAutoencoder};

/// An encoder/decoder pair with spatial downsampling factor `f`.
///
/// `encode` takes `[n, 3, H, W]` in `[0, 1]` with `H` and `W` multiples of
/// `f` and returns `[n, latent_channels, H/f, W/f]`; `decode` inverts the
/// shapes. Both must be deterministic.
pub trait AutoencoderHandle: Send + Sync {
    fn identity(&self) -> String;
    fn downsample_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, x: &Tensor) -> Tensor;
    fn decode(&self, z: &Tensor) -> Tensor;

    /// Layer inventories of encoder and decoder for an input of `h × w`.
    fn cost_configs(&self, _h: usize, _w: usize) -> Option<(NetworkCostConfig, NetworkCostConfig)> {
        None
    }
}

/// Encoder plus decoder MACs for one image, or `None` when the handle has no cost model.
pub fn reconstruction_macs(ae: &dyn AutoencoderHandle, width: u32, height: u32) -> Option<u128> {
    let f = ae.downsample_factor();
    let (h, w) = (padded_side(height as usize, f), padded_side(width as usize, f));
    let (enc, dec) = ae.cost_configs(h, w)?;
    let count = |c: &NetworkCostConfig| c.total_macs(AttentionCounting::default()).ok();
    Some(count(&enc)? + count(&dec)?)
}

fn padded_side(n: usize, f: usize) -> usize {
    n.div_ceil(f) * f
}

/// Reflect-pads right and bottom to the next multiple of `f`.
fn pad_to_multiple(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ph, pw) = (padded_side(h, f), padded_side(w, f));
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let reflect = |i: usize, len: usize| {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for s in 0..n * c {
        let src = &x.data()[s * h * w..(s + 1) * h * w];
        let dst = &mut out.data_mut()[s * ph * pw..(s + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect(y, h);
            for xx in 0..pw {
                dst[y * pw + xx] = src[sy * w + reflect(xx, w)];
            }
        }
    }
    out
}

fn crop_top_left(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ph, pw] = x.shape();
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n * c {
        for y in 0..h {
            let src = &x.data()[s * ph * pw + y * pw..s * ph * pw + y * pw + w];
            out.data_mut()[s * h * w + y * w..s * h * w + (y + 1) * w].copy_from_slice(src);
        }
    }
    out
}

/// `crop(decode(encode(pad(x))))` on a float tensor.
pub fn reconstruct_tensor(ae: &dyn AutoencoderHandle, x: &Tensor) -> Result<Tensor> {
    let f = ae.downsample_factor();
    let [_, c, h, w] = x.shape();
    if c != 3 {
        return Err(Error::DimensionMismatch(format!("expected 3 channels, got {c}")));
    }
    if h < f || w < f {
        return Err(Error::ImageTooSmall {
            width: w as u32,
            height: h as u32,
            min: f as u32,
        });
    }
    let padded = pad_to_multiple(x, f);
    let z = ae.encode(&padded);
    let expected = [padded.n(), ae.latent_channels(), padded.h() / f, padded.w() / f];
    if z.shape() != expected {
        return Err(Error::DimensionMismatch(format!(
            "encoder returned {:?}, expected {expected:?}",
            z.shape()
        )));
    }
    let y = ae.decode(&z);
    if y.shape() != padded.shape() {
        return Err(Error::DimensionMismatch(format!(
            "decoder returned {:?}, expected {:?}",
            y.shape(),
            padded.shape()
        )));
    }
    Ok(crop_top_left(&y, h, w))
}

/// Single encode/decode pass; the output has exactly the input's dimensions.
pub fn reconstruct(ae: &dyn AutoencoderHandle, x: &Image) -> Result<Image> {
    let y = reconstruct_tensor(ae, &imaging::to_tensor(x))?;
    Ok(imaging::from_tensor(&y))
}

/// Exact autoencoder: pixel unshuffle by `f` and back. Useful as a stub.
#[derive(Debug, Clone, Copy)]
pub struct IdentityAutoencoder {
    pub f: usize,
}

impl AutoencoderHandle for IdentityAutoencoder {
    fn identity(&self) -> String {
        format!("identity:{}", self.f)
    }

    fn downsample_factor(&self) -> usize {
        self.f
    }

    fn latent_channels(&self) -> usize {
        3 * self.f * self.f
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        let f = self.f;
        let [n, c, h, w] = x.shape();
        let (zh, zw) = (h / f, w / f);
        let mut z = Tensor::zeros([n, c * f * f, zh, zw]);
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let zc = ch * f * f + (y % f) * f + xx % f;
                        let v = x.sample(s)[ch * h * w + y * w + xx];
                        z.sample_mut(s)[zc * zh * zw + (y / f) * zw + xx / f] = v;
                    }
                }
            }
        }
        z
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        let f = self.f;
        let [n, zc, zh, zw] = z.shape();
        let c = zc / (f * f);
        let (h, w) = (zh * f, zw * f);
        let mut x = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let k = ch * f * f + (y % f) * f + xx % f;
                        x.sample_mut(s)[ch * h * w + y * w + xx] = z.sample(s)[k * zh * zw + (y / f) * zw + xx / f];
                    }
                }
            }
        }
        x
    }
}

/// Resolves an autoencoder spec: `identity:<f>` or `toy:<dir>` (a directory
/// written by [`ToyAutoencoder::save`]).
pub fn load_external_autoencoder(spec: &str) -> Result<Box<dyn AutoencoderHandle>> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("autoencoder spec {spec:?} is not of the form kind:location")))?;
    match kind {
        "identity" => {
            let f: usize = arg
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("identity factor {arg:?} is not an integer")))?;
            if !f.is_power_of_two() {
                return Err(Error::InvalidArgument(format!("downsample factor {f} is not a power of two")));
            }
            Ok(Box::new(IdentityAutoencoder { f }))
        }
        "toy" => Ok(Box::new(ToyAutoencoder::load(Path::new(arg))?)),
        other => Err(Error::NotFound(format!(
            "no runtime backend for autoencoder kind {other:?} (supported: identity, toy)"
        ))),
    }
}

/// Container for saved reconstructions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SavePolicy {
    /// Source format; JPEG sources are re-encoded at a quality drawn from `[70, 100]`.
    #[default]
    Match,
    /// JPEG at a per-image quality uniform in `[lo, hi]`.
    Jpeg { lo: u8, hi: u8 },
    Png,
}

pub const MATCHED_JPEG_QUALITY: (u8, u8) = (70, 100);

impl SavePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("save policy {s:?} is not match, png or jpeg:LO-HI"));
        match s {
            "match" => Ok(SavePolicy::Match),
            "png" => Ok(SavePolicy::Png),
            _ => {
                let range = s.strip_prefix("jpeg:").ok_or_else(bad)?;
                let (lo, hi) = range.split_once('-').or_else(|| range.split_once(':')).ok_or_else(bad)?;
                let lo: u8 = lo.trim().parse().map_err(|_| bad())?;
                let hi: u8 = hi.trim().parse().map_err(|_| bad())?;
                if lo == 0 || lo > hi || hi > 100 {
                    return Err(bad());
                }
                Ok(SavePolicy::Jpeg { lo, hi })
            }
        }
    }

    /// Output container and JPEG quality for one image.
    pub fn choose(&self, source: ContainerFormat, rng: &mut impl Rng) -> (ContainerFormat, Option<u8>) {
        let (lo, hi) = match (self, source) {
            (SavePolicy::Png, _) => return (ContainerFormat::Png, None),
            (SavePolicy::Jpeg { lo, hi }, _) => (*lo, *hi),
            (SavePolicy::Match, ContainerFormat::Jpeg) => MATCHED_JPEG_QUALITY,
            (SavePolicy::Match, other) => return (other, None),
        };
        (ContainerFormat::Jpeg, Some(rng.random_range(lo..=hi)))
    }
}

impl std::fmt::Display for SavePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SavePolicy::Match => f.write_str("match"),
            SavePolicy::Png => f.write_str("png"),
            SavePolicy::Jpeg { lo, hi } => write!(f, "jpeg:{lo}-{hi}"),
        }
    }
}

pub(crate) fn encode_as(img: &Image, format: ContainerFormat, quality: Option<u8>) -> Result<Vec<u8>> {
    match format {
        ContainerFormat::Png => imaging::encode_png(img),
        ContainerFormat::Jpeg => imaging::encode_jpeg(img, quality.unwrap_or(95)),
        ContainerFormat::Webp => imaging::encode_webp_lossless(img),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, bytes).at(path)
}

/// Source-tag given to reconstructed fakes.
pub const RECON_TAG: &str = "recon";

#[derive(Debug)]
pub struct ReconstructedDataset {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
    /// Encoder plus decoder MACs over all written images, when the handle has a cost model.
    pub total_macs: Option<u128>,
}

/// Writes one reconstruction per real record under `out_root`, mirroring
/// source paths, and returns the fake manifest with `pair_id` links.
pub fn reconstruct_dataset(
    ae: &dyn AutoencoderHandle,
    m: &DatasetManifest,
    out_root: &Path,
    policy: SavePolicy,
    seed: u64,
) -> Result<ReconstructedDataset> {
    if let Some(r) = m.records.iter().find(|r| r.label != Label::Real) {
        return Err(Error::InvalidArgument(format!("record {:?} is not labeled real", r.id)));
    }
    std::fs::create_dir_all(out_root).at(out_root)?;
    let out_root = out_root.canonicalize().at(out_root)?;
    let mut out = DatasetManifest::new(out_root.clone());
    out.meta.insert("autoencoder".into(), ae.identity());
    out.meta.insert("seed".into(), seed.to_string());
    out.meta.insert("save_policy".into(), policy.to_string());
    out.meta.insert("source_manifest".into(), m.content_hash());

    let mut warnings = Vec::new();
    let mut macs = Some(0u128);
    for r in &m.records {
        let result = (|| -> Result<(PathBuf, u32, u32)> {
            let img = m.load_image(r)?;
            let fake = reconstruct(ae, &img)?;
            let mut rng = seed::rng(seed, &format!("save/{}", r.id));
            let (format, quality) = policy.choose(r.container_format, &mut rng);
            let rel = Path::new(&r.path).with_extension(format.extension());
            let path = out_root.join(&rel);
            write_file(&path, &encode_as(&fake, format, quality)?)?;
            Ok((path, img.width(), img.height()))
        })();
        match result {
            Ok((path, w, h)) => {
                let id = format!("{RECON_TAG}:{}", r.id);
                out.records.push(manifest::describe_file(
                    &out_root,
                    &path,
                    id,
                    Label::Fake,
                    RECON_TAG,
                    Some(r.id.clone()),
                )?);
                macs = macs.and_then(|t| Some(t + reconstruction_macs(ae, w, h)?));
            }
            Err(e) => {
                let msg = format!("reconstruction of {} failed: {e}", r.id);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    let failed = warnings.len();
    if failed * 100 > m.len() {
        return Err(Error::TooManyFailures { failed, total: m.len() });
    }
    if let Some(t) = macs {
        out.meta.insert("macs".into(), t.to_string());
    }
    Ok(ReconstructedDataset {
        manifest: out,
        warnings,
        total_macs: macs,
    })
}
