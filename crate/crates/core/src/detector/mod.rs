//! Detector backbones with a single-logit global-average-pooling head.

mod checkpoint;
mod train;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image};
use crate::nn::{
    self, BatchNorm2d, Conv2d, ConvGeometry, GlobalAvgPool, Layer, Linear, MaxPool2d, Relu, Residual, Sequential, Tensor,
};
use crate::seed;

pub use checkpoint::{DetectorCheckpoint, EpochRecord, Provenance, CHECKPOINT_FILE, HISTORY_FILE, WEIGHTS_FILE};
pub use train::{
    compose_batch, schedule_step, train, train_with, validate, Batch, BatchComposer, Composer, PatienceSchedule,
    ScheduleDecision, TrainConfig, TrainOutcome,
};

/// Environment variable naming the directory searched for pretrained weights.
pub const WEIGHTS_DIR_ENV: &str = "FAKEPRINT_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneFamily {
    SmallCnn,
    Resnet50Like,
}

impl BackboneFamily {
    pub fn name(self) -> &'static str {
        match self {
            BackboneFamily::SmallCnn => "small-cnn",
            BackboneFamily::Resnet50Like => "resnet50-like",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Init {
    Random,
    /// Weights read from `$FAKEPRINT_WEIGHTS_DIR/<family>-imagenet.bin`.
    PretrainedImagenet,
    /// Weight blob at the given path.
    External(PathBuf),
}

impl TryFrom<String> for Init {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Init> for String {
    fn from(i: Init) -> String {
        match i {
            Init::Random => "random".into(),
            Init::PretrainedImagenet => "pretrained-imagenet".into(),
            Init::External(p) => format!("external:{}", p.display()),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "pretrained-imagenet" => Ok(Init::PretrainedImagenet),
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Ok(Init::External(PathBuf::from(p))),
                _ => Err(Error::InvalidArgument(format!(
                    "init {s:?} is not random, pretrained-imagenet or external:<path>"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    /// Stride 1 in the stem and no stem pooling.
    pub stem_downsampling_removed: bool,
    pub init: Init,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: BackboneFamily::SmallCnn,
            stem_downsampling_removed: true,
            init: Init::Random,
        }
    }
}

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Conv2d {
    Conv2d::new(
        ConvGeometry {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        },
        false,
        rng,
    )
}

fn conv_bn_relu(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Sequential {
    Sequential::new()
        .with(conv(in_c, out_c, k, stride, rng))
        .with(BatchNorm2d::new(out_c))
        .with(Relu::new())
}

fn small_cnn(stem_removed: bool, rng: &mut impl Rng) -> Sequential {
    let stem_stride = if stem_removed { 1 } else { 2 };
    let stem = Sequential::new()
        .with(conv(3, 16, 3, stem_stride, rng).without_input_grad())
        .with(BatchNorm2d::new(16))
        .with(Relu::new());
    let body = Sequential::new()
        .with(conv_bn_relu(16, 32, 3, 2, rng))
        .with(conv_bn_relu(32, 64, 3, 2, rng))
        .with(conv_bn_relu(64, 64, 3, 2, rng));
    let head = Sequential::new().with(GlobalAvgPool::new()).with(Linear::new(64, 1, rng));
    Sequential::new().with(stem).with(body).with(head)
}

fn bottleneck(in_c: usize, mid: usize, stride: usize, rng: &mut impl Rng) -> Residual {
    let out_c = mid * 4;
    let main = Sequential::new()
        .with(conv_bn_relu(in_c, mid, 1, 1, rng))
        .with(conv_bn_relu(mid, mid, 3, stride, rng))
        .with(conv(mid, out_c, 1, 1, rng))
        .with(BatchNorm2d::new(out_c));
    let shortcut = (stride != 1 || in_c != out_c).then(|| {
        Sequential::new()
            .with(conv(in_c, out_c, 1, stride, rng))
            .with(BatchNorm2d::new(out_c))
    });
    Residual::new(main, shortcut)
}

fn resnet50_like(stem_removed: bool, rng: &mut impl Rng) -> Sequential {
    let mut stem = Sequential::new();
    if stem_removed {
        stem.push(conv(3, 64, 7, 1, rng).without_input_grad());
    } else {
        stem.push(conv(3, 64, 7, 2, rng).without_input_grad());
    }
    stem.push(BatchNorm2d::new(64)).push(Relu::new());
    if !stem_removed {
        stem.push(MaxPool2d::new(3, 2, 1));
    }
    let mut body = Sequential::new();
    let mut in_c = 64;
    for (stage, (&blocks, &mid)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            body.push(bottleneck(in_c, mid, stride, rng));
            in_c = mid * 4;
        }
    }
    let head = Sequential::new().with(GlobalAvgPool::new()).with(Linear::new(in_c, 1, rng));
    Sequential::new().with(stem).with(body).with(head)
}

/// A binary classifier producing one logit per image; `sigmoid(logit)` is the
/// probability of "fake".
pub struct Detector {
    config: BackboneConfig,
    net: Sequential,
    min_side: u32,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("config", &self.config)
            .field("params", &self.net.param_count())
            .finish()
    }
}

fn pretrained_path(family: BackboneFamily) -> Result<PathBuf> {
    let dir = std::env::var_os(WEIGHTS_DIR_ENV).ok_or_else(|| {
        Error::NotFound(format!(
            "pretrained {} weights requested but {WEIGHTS_DIR_ENV} is not set",
            family.name()
        ))
    })?;
    let path = Path::new(&dir).join(format!("{}-imagenet.bin", family.name()));
    if !path.is_file() {
        return Err(Error::NotFound(format!("pretrained weights {} do not exist", path.display())));
    }
    Ok(path)
}

/// Builds the network for `cfg`, initialized per `cfg.init` (random weights
/// derive from `seed`).
pub fn build_detector(cfg: &BackboneConfig, seed: u64) -> Result<Detector> {
    let weights = match &cfg.init {
        Init::Random => None,
        Init::PretrainedImagenet => Some(pretrained_path(cfg.family)?),
        Init::External(p) => {
            if !p.is_file() {
                return Err(Error::NotFound(format!("external weights {} do not exist", p.display())));
            }
            Some(p.clone())
        }
    };
    let mut rng = seed::rng(seed, "detector/init");
    let net = match cfg.family {
        BackboneFamily::SmallCnn => small_cnn(cfg.stem_downsampling_removed, &mut rng),
        BackboneFamily::Resnet50Like => resnet50_like(cfg.stem_downsampling_removed, &mut rng),
    };
    let mut det = Detector {
        config: cfg.clone(),
        net,
        min_side: 1,
    };
    if let Some(p) = weights {
        nn::io::load_state(&mut det.net, &p)?;
    }
    Ok(det)
}

impl Detector {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Smallest side accepted for scoring; normally the training crop side.
    pub fn min_side(&self) -> u32 {
        self.min_side
    }

    pub fn set_min_side(&mut self, side: u32) {
        self.min_side = side.max(1);
    }

    pub(crate) fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub(crate) fn net(&self) -> &Sequential {
        &self.net
    }

    /// `[c, h, w]` after the stem for an input of `h × w`.
    pub fn stem_output_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        self.net.layers()[0].output_shape([3, h, w], &mut Vec::new())
    }

    /// `[c, h, w]` of the logit output for an input of `h × w`.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        self.net.output_shape([3, h, w], &mut Vec::new())
    }

    /// Logits `[n, 1, 1, 1]` in inference mode.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.net.infer(x)
    }

    pub fn weights(&self) -> Vec<u8> {
        nn::io::encode_state(&self.net)
    }

    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<()> {
        nn::io::decode_state(bytes, &mut self.net)
    }
}

/// Anything that maps an image to a probability of being fake.
pub trait Scorer: Sync {
    fn identity(&self) -> String;

    /// Smallest side accepted by [`score`](Self::score).
    fn min_side(&self) -> u32 {
        1
    }

    fn score(&self, img: &Image) -> Result<f64>;
}

fn check_side(img: &Image, min: u32) -> Result<()> {
    if img.width() < min || img.height() < min {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min,
        });
    }
    Ok(())
}

impl Scorer for Detector {
    fn identity(&self) -> String {
        format!(
            "{}{}@{}",
            self.config.family.name(),
            if self.config.stem_downsampling_removed { "-nostem" } else { "" },
            &seed::sha256_hex(&self.weights())[7..19]
        )
    }

    fn min_side(&self) -> u32 {
        self.min_side
    }

    /// `sigmoid(logit)` on the whole image.
    fn score(&self, img: &Image) -> Result<f64> {
        check_side(img, self.min_side)?;
        let logit = self.logits(&imaging::to_tensor(img)).data()[0] as f64;
        Ok(1.0 / (1.0 + (-logit).exp()))
    }
}

/// Returns the same score for every image.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn identity(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn score(&self, _img: &Image) -> Result<f64> {
        Ok(self.0)
    }
}
