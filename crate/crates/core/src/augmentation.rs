//! Training augmentations in two phases: [`sample_params`] draws every random
//! choice up front, [`apply`] is a pure function of the image and those
//! choices. Pairs share one parameter set through [`paired_apply`].
//!
//! Fixed order: random resized crop, JPEG, blur, grayscale, noise, cutout,
//! final square crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image};

/// Smallest image side accepted when a random resized crop is configured.
pub const MIN_SIDE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JpegAug {
    pub prob: f64,
    pub quality: (u8, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurAug {
    pub prob: f64,
    /// Standard deviation range of the 9-tap Gaussian.
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseAug {
    pub prob: f64,
    /// Standard deviation range on the 0–255 scale.
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutAug {
    pub prob: f64,
    /// Hole side as a fraction of the image side.
    pub size_frac: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrcAug {
    /// Crop area as a percentage of the image area.
    pub area_pct: (f64, f64),
    /// Aspect ratio range, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub output_side: u32,
}

impl Default for RrcAug {
    fn default() -> Self {
        RrcAug {
            area_pct: (8.0, 100.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            output_side: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub jpeg: JpegAug,
    pub blur: BlurAug,
    pub grayscale_prob: f64,
    pub noise: NoiseAug,
    pub cutout: CutoutAug,
    /// Random resized crop; `None` skips straight to the final crop.
    pub rrc: Option<RrcAug>,
    pub train_crop_side: u32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            jpeg: JpegAug {
                prob: 0.5,
                quality: (30, 100),
            },
            blur: BlurAug {
                prob: 0.5,
                sigma: (0.0, 3.0),
            },
            grayscale_prob: 0.1,
            noise: NoiseAug {
                prob: 0.1,
                sigma: (1.0, 10.0),
            },
            cutout: CutoutAug {
                prob: 0.1,
                size_frac: (0.1, 0.5),
            },
            rrc: Some(RrcAug::default()),
            train_crop_side: 96,
        }
    }
}

impl AugmentationPolicy {
    /// Only the final crop: every probability zero and no resized crop.
    pub fn crop_only(train_crop_side: u32) -> Self {
        let mut p = AugmentationPolicy::default();
        p.jpeg.prob = 0.0;
        p.blur.prob = 0.0;
        p.grayscale_prob = 0.0;
        p.noise.prob = 0.0;
        p.cutout.prob = 0.0;
        p.rrc = None;
        p.train_crop_side = train_crop_side;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, p) in [
            ("jpeg", self.jpeg.prob),
            ("blur", self.blur.prob),
            ("grayscale", self.grayscale_prob),
            ("noise", self.noise.prob),
            ("cutout", self.cutout.prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        let (qlo, qhi) = self.jpeg.quality;
        if qlo == 0 || qlo > qhi || qhi > 100 {
            return bad(format!("jpeg quality range {qlo}..{qhi} invalid"));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.blur.sigma) || self.blur.sigma.0 < 0.0 {
            return bad(format!("blur sigma range {:?} invalid", self.blur.sigma));
        }
        if !ordered(self.noise.sigma) || self.noise.sigma.0 < 0.0 {
            return bad(format!("noise sigma range {:?} invalid", self.noise.sigma));
        }
        let (clo, chi) = self.cutout.size_frac;
        if !ordered(self.cutout.size_frac) || clo <= 0.0 || chi > 1.0 {
            return bad(format!("cutout size range {clo}..{chi} must lie in (0, 1]"));
        }
        if self.train_crop_side == 0 {
            return bad("train crop side must be positive".into());
        }
        if let Some(rrc) = &self.rrc {
            let (lo, hi) = rrc.area_pct;
            if !ordered(rrc.area_pct) || lo <= 0.0 || hi > 100.0 {
                return bad(format!("rrc area range [{lo}, {hi}] must lie in (0, 100]"));
            }
            if !ordered(rrc.aspect) || rrc.aspect.0 <= 0.0 {
                return bad(format!("rrc aspect range {:?} invalid", rrc.aspect));
            }
            if rrc.output_side < self.train_crop_side {
                return bad(format!(
                    "rrc output side {} below train crop side {}",
                    rrc.output_side, self.train_crop_side
                ));
            }
        }
        Ok(())
    }

    /// Smallest image side [`sample_params`] accepts.
    pub fn min_side(&self) -> u32 {
        if self.rrc.is_some() {
            MIN_SIDE
        } else {
            self.train_crop_side
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResizedCrop {
    pub region: CropBox,
    pub output_side: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub seed: u64,
}

/// Fully realized augmentation choices for one image (or one pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub input_dims: (u32, u32),
    pub rrc: Option<ResizedCrop>,
    pub jpeg_quality: Option<u8>,
    pub blur_sigma: Option<f64>,
    pub grayscale: bool,
    pub noise: Option<NoiseParams>,
    /// Zero-filled hole, in coordinates of the image after the resized crop.
    pub cutout: Option<CropBox>,
    /// Final square crop, in the same coordinates.
    pub crop: CropBox,
}

impl AugmentationParams {
    /// Linear resampling factor of the resized crop (>1 upsamples), or
    /// `None` without one.
    pub fn resize_scale(&self) -> Option<f64> {
        self.rrc.map(|r| {
            let area = r.region.w as f64 * r.region.h as f64;
            r.output_side as f64 / area.sqrt()
        })
    }

    fn stage_dims(&self) -> (u32, u32) {
        match self.rrc {
            Some(r) => (r.output_side, r.output_side),
            None => self.input_dims,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_rrc(rrc: &RrcAug, (width, height): (u32, u32), rng: &mut impl Rng) -> CropBox {
    let (w_f, h_f) = (width as f64, height as f64);
    let area = w_f * h_f;
    let log_ratio = (rrc.aspect.0.ln(), rrc.aspect.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, rrc.area_pct) / 100.0;
        let aspect = uniform(rng, log_ratio).exp();
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return CropBox { x, y, w, h };
        }
    }
    let in_ratio = w_f / h_f;
    let (w, h) = if in_ratio < rrc.aspect.0 {
        (width, ((w_f / rrc.aspect.0).round() as u32).clamp(1, height))
    } else if in_ratio > rrc.aspect.1 {
        (((h_f * rrc.aspect.1).round() as u32).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropBox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

/// Draws every augmentation choice for an image of `dims = (width, height)`.
pub fn sample_params(policy: &AugmentationPolicy, dims: (u32, u32), rng: &mut impl Rng) -> Result<AugmentationParams> {
    policy.validate()?;
    let (width, height) = dims;
    let min = policy.min_side();
    if width < min || height < min {
        return Err(Error::ImageTooSmall { width, height, min });
    }
    let rrc = policy.rrc.as_ref().map(|r| ResizedCrop {
        region: sample_rrc(r, dims, rng),
        output_side: r.output_side,
    });
    let (sw, sh) = match rrc {
        Some(r) => (r.output_side, r.output_side),
        None => dims,
    };
    let jpeg_quality = rng
        .random_bool(policy.jpeg.prob)
        .then(|| rng.random_range(policy.jpeg.quality.0..=policy.jpeg.quality.1));
    let blur_sigma = rng.random_bool(policy.blur.prob).then(|| uniform(rng, policy.blur.sigma));
    let grayscale = rng.random_bool(policy.grayscale_prob);
    let noise = rng.random_bool(policy.noise.prob).then(|| NoiseParams {
        sigma: uniform(rng, policy.noise.sigma),
        seed: rng.random(),
    });
    let cutout = rng.random_bool(policy.cutout.prob).then(|| {
        let frac = uniform(rng, policy.cutout.size_frac);
        let w = ((sw as f64 * frac).round() as u32).clamp(1, sw);
        let h = ((sh as f64 * frac).round() as u32).clamp(1, sh);
        CropBox {
            x: rng.random_range(0..=sw - w),
            y: rng.random_range(0..=sh - h),
            w,
            h,
        }
    });
    let side = policy.train_crop_side;
    let crop = CropBox {
        x: rng.random_range(0..=sw - side),
        y: rng.random_range(0..=sh - side),
        w: side,
        h: side,
    };
    Ok(AugmentationParams {
        input_dims: dims,
        rrc,
        jpeg_quality,
        blur_sigma,
        grayscale,
        noise,
        cutout,
        crop,
    })
}

/// Applies `p` to `x`; deterministic in `(x, p)`.
pub fn apply(x: &Image, p: &AugmentationParams) -> Result<Image> {
    if x.dimensions() != p.input_dims {
        return Err(Error::DimensionMismatch(format!(
            "parameters sampled for {:?}, image is {:?}",
            p.input_dims,
            x.dimensions()
        )));
    }
    let mut img = match p.rrc {
        Some(r) => {
            let c = r.region;
            imaging::resize(&imaging::crop(x, c.x, c.y, c.w, c.h), r.output_side, r.output_side)
        }
        None => x.clone(),
    };
    debug_assert_eq!(img.dimensions(), p.stage_dims());
    if let Some(q) = p.jpeg_quality {
        img = imaging::jpeg_round_trip(&img, q)?;
    }
    if let Some(s) = p.blur_sigma {
        img = imaging::gaussian_blur(&img, s);
    }
    if p.grayscale {
        img = imaging::grayscale(&img);
    }
    if let Some(n) = p.noise {
        img = imaging::add_gaussian_noise(&img, n.sigma, n.seed);
    }
    if let Some(c) = p.cutout {
        img = imaging::cutout(&img, c.x, c.y, c.w, c.h);
    }
    let c = p.crop;
    Ok(imaging::crop(&img, c.x, c.y, c.w, c.h))
}

/// Applies one parameter set to both members of an aligned pair.
pub fn paired_apply(real: &Image, fake: &Image, p: &AugmentationParams) -> Result<(Image, Image)> {
    if real.dimensions() != fake.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "pair dimensions differ: real {:?}, fake {:?}",
            real.dimensions(),
            fake.dimensions()
        )));
    }
    Ok((apply(real, p)?, apply(fake, p)?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pattern(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, |x, y| image::Rgb([(x * 3 % 256) as u8, (y * 5 % 256) as u8, ((x ^ y) % 256) as u8]))
    }

    fn identity_policy() -> AugmentationPolicy {
        let mut p = AugmentationPolicy::crop_only(96);
        p.rrc = Some(RrcAug {
            area_pct: (100.0, 100.0),
            output_side: 256,
            ..RrcAug::default()
        });
        p
    }

    #[test]
    fn degenerate_policy_is_identity_like() {
        let img = pattern(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_params(&identity_policy(), (256, 256), &mut rng).unwrap();
        let r = p.rrc.unwrap();
        assert_eq!(r.region, CropBox { x: 0, y: 0, w: 256, h: 256 });
        assert_eq!(p.resize_scale(), Some(1.0));
        assert!(p.jpeg_quality.is_none() && p.blur_sigma.is_none() && p.noise.is_none() && p.cutout.is_none());
        let out = apply(&img, &p).unwrap();
        assert_eq!(out, imaging::crop(&img, p.crop.x, p.crop.y, 96, 96));
    }

    #[test]
    fn rrc_area_within_range() {
        let mut policy = AugmentationPolicy::crop_only(96);
        policy.rrc = Some(RrcAug::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p = sample_params(&policy, (640, 480), &mut rng).unwrap();
            let r = p.rrc.unwrap().region;
            let frac = (r.w * r.h) as f64 / 307200.0;
            // Rounding each side moves the area by at most about one row and column.
            assert!(frac >= 0.08 - 0.005 && frac <= 1.0, "{frac}");
            assert!(r.x + r.w <= 640 && r.y + r.h <= 480);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let policy = AugmentationPolicy::default();
        let a = sample_params(&policy, (300, 200), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_params(&policy, (300, 200), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let policy = AugmentationPolicy::default();
        let p = sample_params(&policy, (300, 200), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(apply(&pattern(200, 300), &p).is_err());
        assert!(paired_apply(&pattern(300, 200), &pattern(300, 201), &p).is_err());
    }

    #[test]
    fn too_small_without_rrc() {
        let policy = AugmentationPolicy::crop_only(96);
        let err = sample_params(&policy, (95, 300), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { min: 96, .. }));
    }

    #[test]
    fn invalid_policies() {
        let mut p = AugmentationPolicy::default();
        p.jpeg.prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentationPolicy::default();
        p.rrc.as_mut().unwrap().area_pct = (0.0, 50.0);
        assert!(p.validate().is_err());
        let mut p = AugmentationPolicy::default();
        p.rrc.as_mut().unwrap().output_side = 64;
        assert!(p.validate().is_err());
    }
}
