//! Post-processed test sets and single-axis perturbation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Scorer;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, ContainerFormat, Image};
use crate::manifest::{self, DatasetManifest};
use crate::reconstruction::write_file;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeOp {
    pub prob: f64,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterOp {
    pub prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Hue shift in turns.
    pub hue: (f64, f64),
}

/// Random corruptions applied in the order resize, blur, color jitter, JPEG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcessPolicy {
    pub resize: RangeOp,
    /// Sigma range of the 9-tap Gaussian.
    pub blur: RangeOp,
    pub color_jitter: JitterOp,
    /// Quality range, rounded to integers.
    pub jpeg: RangeOp,
    pub seed: u64,
}

impl Default for PostProcessPolicy {
    fn default() -> Self {
        PostProcessPolicy {
            resize: RangeOp {
                prob: 0.5,
                range: (0.5, 1.5),
            },
            blur: RangeOp {
                prob: 0.5,
                range: (0.1, 2.0),
            },
            color_jitter: JitterOp {
                prob: 0.5,
                brightness: (0.75, 1.25),
                contrast: (0.75, 1.25),
                saturation: (0.75, 1.25),
                hue: (-0.05, 0.05),
            },
            jpeg: RangeOp {
                prob: 0.5,
                range: (65.0, 100.0),
            },
            seed: 0,
        }
    }
}

impl PostProcessPolicy {
    /// Every probability zero: the set is a byte-for-byte copy.
    pub fn disabled() -> Self {
        let mut p = PostProcessPolicy::default();
        p.resize.prob = 0.0;
        p.blur.prob = 0.0;
        p.color_jitter.prob = 0.0;
        p.jpeg.prob = 0.0;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        for (name, prob) in [
            ("resize", self.resize.prob),
            ("blur", self.blur.prob),
            ("color_jitter", self.color_jitter.prob),
            ("jpeg", self.jpeg.prob),
        ] {
            if !(0.0..=1.0).contains(&prob) {
                return bad(format!("{name} probability {prob} outside [0, 1]"));
            }
        }
        if !ordered(self.resize.range) || self.resize.range.0 <= 0.0 {
            return bad(format!("resize range {:?} invalid", self.resize.range));
        }
        if !ordered(self.blur.range) || self.blur.range.0 < 0.0 {
            return bad(format!("blur range {:?} invalid", self.blur.range));
        }
        let (qlo, qhi) = self.jpeg.range;
        if !ordered(self.jpeg.range) || qlo < 1.0 || qhi > 100.0 {
            return bad(format!("jpeg quality range {:?} must lie in [1, 100]", self.jpeg.range));
        }
        let j = &self.color_jitter;
        for r in [j.brightness, j.contrast, j.saturation] {
            if !ordered(r) || r.0 < 0.0 {
                return bad(format!("color jitter factor range {r:?} invalid"));
            }
        }
        if !ordered(j.hue) || j.hue.0 < -0.5 || j.hue.1 > 0.5 {
            return bad(format!("hue range {:?} must lie in [-0.5, 0.5]", j.hue));
        }
        Ok(())
    }
}

/// Transforms drawn for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostProcessOps {
    pub resize_scale: Option<f64>,
    pub blur_sigma: Option<f64>,
    /// `(brightness, contrast, saturation, hue)`.
    pub color_jitter: Option<(f64, f64, f64, f64)>,
    pub jpeg_quality: Option<u8>,
}

impl PostProcessOps {
    pub fn is_identity(&self) -> bool {
        self.resize_scale.is_none() && self.blur_sigma.is_none() && self.color_jitter.is_none() && self.jpeg_quality.is_none()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws the transforms for the record `id`; depends only on `(policy.seed, id)`.
pub fn sample_ops(policy: &PostProcessPolicy, id: &str) -> PostProcessOps {
    let mut rng = seed::rng(policy.seed, &format!("postprocess/{id}"));
    let resize_scale = rng.random_bool(policy.resize.prob).then(|| uniform(&mut rng, policy.resize.range));
    let blur_sigma = rng.random_bool(policy.blur.prob).then(|| uniform(&mut rng, policy.blur.range));
    let j = policy.color_jitter;
    let color_jitter = rng.random_bool(j.prob).then(|| {
        (
            uniform(&mut rng, j.brightness),
            uniform(&mut rng, j.contrast),
            uniform(&mut rng, j.saturation),
            uniform(&mut rng, j.hue),
        )
    });
    let jpeg_quality = rng
        .random_bool(policy.jpeg.prob)
        .then(|| uniform(&mut rng, policy.jpeg.range).round().clamp(1.0, 100.0) as u8);
    PostProcessOps {
        resize_scale,
        blur_sigma,
        color_jitter,
        jpeg_quality,
    }
}

/// Applies `ops` and returns the encoded bytes with their container.
pub fn apply_ops(img: &Image, ops: &PostProcessOps) -> Result<(Vec<u8>, ContainerFormat)> {
    let mut out = img.clone();
    if let Some(s) = ops.resize_scale {
        out = imaging::rescale(&out, s);
    }
    if let Some(s) = ops.blur_sigma {
        out = imaging::gaussian_blur(&out, s);
    }
    if let Some((b, c, s, h)) = ops.color_jitter {
        out = imaging::color_jitter(&out, b, c, s, h);
    }
    match ops.jpeg_quality {
        Some(q) => Ok((imaging::encode_jpeg(&out, q)?, ContainerFormat::Jpeg)),
        None => Ok((imaging::encode_png(&out)?, ContainerFormat::Png)),
    }
}

#[derive(Debug)]
pub struct PostProcessed {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Writes one post-processed copy of every record under `out_root`. Records
/// whose draw applies nothing are copied byte for byte. Pair links are
/// dropped since resizing breaks pair alignment; the per-image log is kept
/// in the manifest metadata under `postprocess_log`.
pub fn build_postprocessed_manifest(m: &DatasetManifest, policy: &PostProcessPolicy, out_root: &Path) -> Result<PostProcessed> {
    policy.validate()?;
    if m.is_empty() {
        return Err(Error::Empty("manifest has no records to post-process".into()));
    }
    std::fs::create_dir_all(out_root).at(out_root)?;
    let root = out_root.canonicalize().at(out_root)?;
    let mut out = DatasetManifest::new(root.clone());
    out.meta = m.meta.clone();
    out.meta.insert(
        "postprocess_policy".into(),
        serde_json::to_string(policy).expect("policy serializes"),
    );
    out.meta.insert("source_manifest".into(), m.content_hash());
    let mut log_entries: BTreeMap<String, PostProcessOps> = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in &m.records {
        let ops = sample_ops(policy, &r.id);
        let result = (|| -> Result<std::path::PathBuf> {
            let src = m.resolve(r);
            let (bytes, ext) = if ops.is_identity() {
                (std::fs::read(&src).at(&src)?, Path::new(&r.path).extension().map(|e| e.to_owned()))
            } else {
                let (bytes, format) = apply_ops(&m.load_image(r)?, &ops)?;
                (bytes, Some(format.extension().into()))
            };
            let rel = match ext {
                Some(e) => Path::new(&r.path).with_extension(e),
                None => Path::new(&r.path).to_path_buf(),
            };
            let path = root.join(rel);
            write_file(&path, &bytes)?;
            Ok(path)
        })();
        match result {
            Ok(path) => {
                let rec = manifest::describe_file(&root, &path, r.id.clone(), r.label, &r.source_tag, None)?;
                out.records.push(rec);
                log_entries.insert(r.id.clone(), ops);
            }
            Err(e) => {
                let msg = format!("post-processing {} failed: {e}", r.id);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    out.meta.insert(
        "postprocess_log".into(),
        serde_json::to_string(&log_entries).expect("log serializes"),
    );
    Ok(PostProcessed { manifest: out, warnings })
}

/// Resizes every image to `side × side` (aspect not preserved) and saves it as PNG.
pub fn downsample_to_fixed(m: &DatasetManifest, side: u32, out_root: &Path) -> Result<DatasetManifest> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("fixed side {side} below 8")));
    }
    std::fs::create_dir_all(out_root).at(out_root)?;
    let root = out_root.canonicalize().at(out_root)?;
    let mut out = DatasetManifest::new(root.clone());
    out.meta = m.meta.clone();
    out.meta.insert("downsampled_to".into(), side.to_string());
    for r in &m.records {
        let img = imaging::resize(&m.load_image(r)?, side, side);
        let path = root.join(Path::new(&r.path).with_extension("png"));
        write_file(&path, &imaging::encode_png(&img)?)?;
        out.records.push(manifest::describe_file(
            &root,
            &path,
            r.id.clone(),
            r.label,
            &r.source_tag,
            r.pair_id.clone(),
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    ResizeScale,
    BlurSigma,
    NoiseSigma,
    JpegQuality,
    WebpQuality,
    DownsampleToFixed,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::ResizeScale => "resize_scale",
            SweepKind::BlurSigma => "blur_sigma",
            SweepKind::NoiseSigma => "noise_sigma",
            SweepKind::JpegQuality => "jpeg_quality",
            SweepKind::WebpQuality => "webp_quality",
            SweepKind::DownsampleToFixed => "downsample_to_fixed",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resize" | "resize_scale" => SweepKind::ResizeScale,
            "blur" | "blur_sigma" => SweepKind::BlurSigma,
            "noise" | "noise_sigma" => SweepKind::NoiseSigma,
            "jpeg" | "jpeg_quality" => SweepKind::JpegQuality,
            "webp" | "webp_quality" => SweepKind::WebpQuality,
            "downsample" | "downsample_to_fixed" => SweepKind::DownsampleToFixed,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "sweep kind {s:?} is not resize, blur, noise, jpeg, webp or downsample"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub levels: Vec<f64>,
    /// Seeds the noise fields; each image's field depends on `(seed, record id)`.
    #[serde(default)]
    pub seed: u64,
    /// Treat quality 100 as "no re-encode" for JPEG and WebP sweeps.
    #[serde(default = "default_true")]
    pub passthrough_at_max_quality: bool,
}

fn default_true() -> bool {
    true
}

impl SweepSpec {
    pub fn new(kind: SweepKind, levels: Vec<f64>) -> Self {
        SweepSpec {
            kind,
            levels,
            seed: 0,
            passthrough_at_max_quality: true,
        }
    }

    /// Default grid per kind.
    pub fn default_grid(kind: SweepKind) -> Vec<f64> {
        match kind {
            SweepKind::ResizeScale => vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
            SweepKind::BlurSigma => vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            SweepKind::NoiseSigma => vec![0.0, 2.0, 5.0, 10.0, 20.0],
            SweepKind::JpegQuality => vec![30.0, 50.0, 70.0, 90.0, 100.0],
            SweepKind::WebpQuality => (1..=10).map(|q| q as f64 * 10.0).collect(),
            SweepKind::DownsampleToFixed => vec![128.0, 256.0, 512.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        if self.levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("sweep grid has non-finite levels".into()));
        }
        let up = self.levels.windows(2).all(|w| w[1] > w[0]);
        let down = self.levels.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::InvalidArgument(format!("sweep grid {:?} is not strictly monotone", self.levels)));
        }
        let ok = |f: &dyn Fn(f64) -> bool| self.levels.iter().all(|&l| f(l));
        let valid = match self.kind {
            SweepKind::ResizeScale => ok(&|l| l > 0.0),
            SweepKind::BlurSigma | SweepKind::NoiseSigma => ok(&|l| l >= 0.0),
            SweepKind::JpegQuality => ok(&|l| (1.0..=100.0).contains(&l)),
            SweepKind::WebpQuality => ok(&|l| (0.0..=100.0).contains(&l)),
            SweepKind::DownsampleToFixed => ok(&|l| l >= 1.0 && l.fract() == 0.0),
        };
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "levels {:?} out of range for {}",
                self.levels,
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// True when `level` leaves images untouched.
    pub fn is_identity(&self, level: f64) -> bool {
        match self.kind {
            SweepKind::ResizeScale => level == 1.0,
            SweepKind::BlurSigma | SweepKind::NoiseSigma => level == 0.0,
            SweepKind::JpegQuality | SweepKind::WebpQuality => self.passthrough_at_max_quality && level >= 100.0,
            SweepKind::DownsampleToFixed => false,
        }
    }
}

/// One perturbation at one level; the record id seeds the noise field.
pub fn perturb(img: &Image, spec: &SweepSpec, level: f64, id: &str) -> Result<Image> {
    if spec.is_identity(level) {
        return Ok(img.clone());
    }
    Ok(match spec.kind {
        SweepKind::ResizeScale => imaging::rescale(img, level),
        SweepKind::BlurSigma => imaging::gaussian_blur(img, level),
        SweepKind::NoiseSigma => imaging::add_gaussian_noise(img, level, seed::derive(spec.seed, &format!("noise/{id}"))),
        SweepKind::JpegQuality => imaging::jpeg_round_trip(img, level.round() as u8)?,
        SweepKind::WebpQuality => imaging::webp_round_trip(img, level as f32)?,
        SweepKind::DownsampleToFixed => imaging::resize(img, level as u32, level as u32),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub kind: SweepKind,
    pub label: String,
    pub levels: Vec<f64>,
    pub mean_scores: Vec<f64>,
    /// `per_image[k][i]` is the score of image `ids[i]` at `levels[k]`.
    pub per_image: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    /// The grid level that leaves images untouched, if any.
    pub base_level: Option<f64>,
    /// Native size shared by every image, if they all agree.
    pub base_resolution: Option<(u32, u32)>,
    pub skipped_levels: Vec<f64>,
}

impl SweepCurve {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn mean_at(&self, level: f64) -> Option<f64> {
        self.levels.iter().position(|&l| l == level).map(|k| self.mean_scores[k])
    }
}

/// Scores every image of `m` at every grid level, one perturbation kind at a time.
pub fn sweep(scorer: &dyn Scorer, m: &DatasetManifest, spec: &SweepSpec) -> Result<SweepCurve> {
    spec.validate()?;
    if m.is_empty() {
        return Err(Error::Empty("sweep manifest has no records".into()));
    }
    let images: Vec<Image> = m.records.iter().map(|r| m.load_image(r)).collect::<Result<_>>()?;
    let dims = images[0].dimensions();
    let mut curve = SweepCurve {
        kind: spec.kind,
        label: scorer.identity(),
        levels: Vec::new(),
        mean_scores: Vec::new(),
        per_image: Vec::new(),
        ids: m.records.iter().map(|r| r.id.clone()).collect(),
        base_level: spec.levels.iter().copied().find(|&l| spec.is_identity(l)),
        base_resolution: images.iter().all(|i| i.dimensions() == dims).then_some(dims),
        skipped_levels: Vec::new(),
    };
    let min = scorer.min_side();
    'levels: for &level in &spec.levels {
        let mut scores = Vec::with_capacity(images.len());
        for (img, r) in images.iter().zip(&m.records) {
            let p = perturb(img, spec, level, &r.id)?;
            if p.width() < min || p.height() < min {
                log::warn!(
                    "skipping {} level {level}: {} becomes {}x{}, below {min}",
                    spec.kind.name(),
                    r.id,
                    p.width(),
                    p.height()
                );
                curve.skipped_levels.push(level);
                continue 'levels;
            }
            scores.push(scorer.score(&p)?);
        }
        curve.levels.push(level);
        curve.mean_scores.push(scores.iter().sum::<f64>() / scores.len() as f64);
        curve.per_image.push(scores);
    }
    Ok(curve)
}

pub fn curve_csv(c: &SweepCurve) -> String {
    let mut out = String::from("level,mean_score,n\n");
    for (k, level) in c.levels.iter().enumerate() {
        let _ = writeln!(out, "{level},{},{}", c.mean_scores[k], c.per_image[k].len());
    }
    out
}

/// Writes the CSV `level,mean_score,n`.
pub fn export_curve(c: &SweepCurve, out: &Path) -> Result<()> {
    if c.is_empty() {
        return Err(Error::Empty("curve has no levels".into()));
    }
    write_file(out, curve_csv(c).as_bytes())
}

/// Parses a file written by [`export_curve`] into `(level, mean_score, n)` rows.
pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64, usize)>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("level,mean_score,n") {
        return Err(Error::parse("curve csv", "missing header level,mean_score,n"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::parse("curve csv", format!("row {l:?} has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse("curve csv", e));
            Ok((
                num(f[0])?,
                num(f[1])?,
                f[2].parse().map_err(|e| Error::parse("curve csv", e))?,
            ))
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG line plot of mean score against level, one line per curve, with the
/// base level marked by a dashed vertical line.
pub fn render_plot(curves: &[&SweepCurve], out: &Path) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|c| c.is_empty()) {
        return Err(Error::Empty("nothing to plot".into()));
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (64.0, 24.0, 24.0, 56.0);
    let levels = curves.iter().flat_map(|c| c.levels.iter().copied());
    let (mut lo, mut hi) = levels.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |l: f64| left + (l - lo) / (hi - lo) * (w - left - right);
    let y = |s: f64| top + (1.0 - s.clamp(0.0, 1.0)) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(svg, r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" x2="{x1}" y1="{yy}" y2="{yy}" stroke="#ddd"/><text x="{tx}" y="{ty}" text-anchor="end">{s:.2}</text>"##,
            yy = y(s),
            tx = x0 - 6.0,
            ty = y(s) + 4.0
        );
    }
    let mut ticks: Vec<f64> = curves.iter().flat_map(|c| c.levels.iter().copied()).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for l in &ticks {
        let _ = writeln!(
            svg,
            r#"<text x="{tx}" y="{ty}" text-anchor="middle">{l}</text>"#,
            tx = x(*l),
            ty = y1 + 16.0
        );
    }
    if let Some(base) = curves.iter().find_map(|c| c.base_level) {
        let _ = writeln!(
            svg,
            r##"<line x1="{bx}" x2="{bx}" y1="{y0}" y2="{y1}" stroke="#555" stroke-dasharray="4 3"/>"##,
            bx = x(base)
        );
    }
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .levels
            .iter()
            .zip(&c.mean_scores)
            .map(|(&l, &s)| format!("{:.2},{:.2}", x(l), y(s)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{lx}" y="{ly}" fill="{color}">{}</text>"#,
            escape(&c.label),
            lx = x0 + 10.0,
            ly = y0 + 14.0 + 16.0 * i as f64
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{ty}" text-anchor="middle">{}</text>"#,
        curves[0].kind.name(),
        cx = (x0 + x1) / 2.0,
        ty = h - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{cy}) rotate(-90)" text-anchor="middle">mean score</text>"#,
        cy = (y0 + y1) / 2.0
    );
    svg.push_str("</svg>\n");
    write_file(out, svg.as_bytes())
}
