//! Small convolutional autoencoder trained on the fly, standing in for a
//! pretrained latent-diffusion autoencoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AutoencoderHandle;
use crate::accounting::NetworkCostConfig;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, Image};
use crate::manifest::DatasetManifest;
use crate::nn::{self, io, Adam, Conv2d, ConvGeometry, Layer, Relu, Sequential, Sigmoid, Tensor, Upsample2x};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyAutoencoderConfig {
    /// Spatial downsampling factor, 4 or 8.
    pub f: usize,
    pub latent_channels: usize,
    /// Conv widths, one per encoder stage: a stride-1 stage then `log2(f)` stride-2 stages.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Side of the random training crops; rounded down to a multiple of `f`.
    pub crop_side: usize,
    /// Crops drawn per training image per epoch.
    pub crops_per_image: usize,
    pub held_out_fraction: f64,
    /// Held-out MSE on the `[0, 1]` scale the run is expected to reach.
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for ToyAutoencoderConfig {
    fn default() -> Self {
        ToyAutoencoderConfig {
            f: 4,
            latent_channels: 4,
            widths: vec![16, 32, 32],
            epochs: 4,
            lr: 2e-3,
            batch_size: 16,
            crop_side: 64,
            crops_per_image: 1,
            held_out_fraction: 0.1,
            target_mse: 0.01,
            seed: 0,
        }
    }
}

impl ToyAutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !matches!(self.f, 2 | 4 | 8 | 16) {
            return bad(format!("toy autoencoder factor must be 2, 4, 8 or 16, got {}", self.f));
        }
        let stages = self.f.trailing_zeros() as usize + 1;
        if self.widths.len() != stages || self.widths.contains(&0) {
            return bad(format!("factor {} needs {stages} positive widths, got {:?}", self.f, self.widths));
        }
        if self.latent_channels == 0 || self.batch_size == 0 || self.crops_per_image == 0 {
            return bad("latent channels, batch size and crops per image must be positive".into());
        }
        if self.crop_side < self.f {
            return bad(format!("crop side {} is below the factor {}", self.crop_side, self.f));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return bad(format!("held-out fraction {} outside [0, 1)", self.held_out_fraction));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

pub struct ToyAutoencoder {
    config: ToyAutoencoderConfig,
    encoder: Sequential,
    decoder: Sequential,
}

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Conv2d {
    let geom = ConvGeometry {
        in_c,
        out_c,
        k,
        stride,
        pad: k / 2,
    };
    Conv2d::new(geom, true, rng)
}

impl ToyAutoencoder {
    /// Randomly initialized network for `config`.
    pub fn new(config: ToyAutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "toy-ae/init");
        let w = &config.widths;

        let mut encoder = Sequential::new();
        encoder.push(conv(3, w[0], 3, 1, &mut rng).without_input_grad()).push(Relu::new());
        for i in 1..w.len() {
            encoder.push(conv(w[i - 1], w[i], 3, 2, &mut rng)).push(Relu::new());
        }
        encoder.push(conv(w[w.len() - 1], config.latent_channels, 1, 1, &mut rng));

        let mut decoder = Sequential::new();
        decoder
            .push(conv(config.latent_channels, w[w.len() - 1], 1, 1, &mut rng))
            .push(Relu::new());
        for i in (1..w.len()).rev() {
            decoder
                .push(Upsample2x::new())
                .push(conv(w[i], w[i - 1], 3, 1, &mut rng))
                .push(Relu::new());
        }
        decoder.push(conv(w[0], 3, 3, 1, &mut rng)).push(Sigmoid::new());

        Ok(ToyAutoencoder {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ToyAutoencoderConfig {
        &self.config
    }

    pub fn weights_digest(&self) -> String {
        let mut bytes = io::encode_state(&self.encoder);
        bytes.extend(io::encode_state(&self.decoder));
        seed::sha256_hex(&bytes)
    }

    /// Writes `autoencoder.json`, `encoder.bin` and `decoder.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let path = dir.join("autoencoder.json");
        std::fs::write(&path, json).at(&path)?;
        io::save_state(&self.encoder, &dir.join("encoder.bin"))?;
        io::save_state(&self.decoder, &dir.join("decoder.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("autoencoder.json");
        let text = std::fs::read_to_string(&path).at(&path)?;
        let config: ToyAutoencoderConfig =
            serde_json::from_str(&text).map_err(|e| Error::parse("autoencoder config", e))?;
        let mut ae = ToyAutoencoder::new(config)?;
        io::load_state(&mut ae.encoder, &dir.join("encoder.bin"))?;
        io::load_state(&mut ae.decoder, &dir.join("decoder.bin"))?;
        Ok(ae)
    }

    fn train_step(&mut self, batch: &Tensor, opt: &mut (Adam, Adam)) -> f64 {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        let z = self.encoder.forward(batch);
        let y = self.decoder.forward(&z);
        let (loss, grad) = nn::loss::mse(&y, batch);
        let gz = self.decoder.backward(&grad);
        self.encoder.backward(&gz);
        opt.0.step(&mut self.encoder);
        opt.1.step(&mut self.decoder);
        loss
    }
}

impl AutoencoderHandle for ToyAutoencoder {
    fn identity(&self) -> String {
        let digest = self.weights_digest();
        format!(
            "toy-f{}-c{}@{}",
            self.config.f,
            self.config.latent_channels,
            &digest["sha256:".len().."sha256:".len() + 12]
        )
    }

    fn downsample_factor(&self) -> usize {
        self.config.f
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn encode(&self, x: &Tensor) -> Tensor {
        self.encoder.infer(x)
    }

    fn decode(&self, z: &Tensor) -> Tensor {
        self.decoder.infer(z)
    }

    fn cost_configs(&self, h: usize, w: usize) -> Option<(NetworkCostConfig, NetworkCostConfig)> {
        let mut enc = Vec::new();
        let latent = self.encoder.output_shape([3, h, w], &mut enc).ok()?;
        let mut dec = Vec::new();
        self.decoder.output_shape(latent, &mut dec).ok()?;
        Some((
            NetworkCostConfig::from_layers("toy-encoder", enc),
            NetworkCostConfig::from_layers("toy-decoder", dec),
        ))
    }
}

#[derive(Debug)]
pub struct TrainedAutoencoder {
    pub autoencoder: ToyAutoencoder,
    /// Mean per-epoch training loss.
    pub train_loss: Vec<f64>,
    pub held_out_mse: f64,
    /// Set when the held-out MSE stayed above the configured target.
    pub missed_target: bool,
}

impl std::fmt::Debug for ToyAutoencoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyAutoencoder").field("config", &self.config).finish_non_exhaustive()
    }
}

fn random_crop(img: &Image, side: usize, rng: &mut impl Rng) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let x = rng.random_range(0..=w - side) as u32;
    let y = rng.random_range(0..=h - side) as u32;
    imaging::to_tensor(&imaging::crop(img, x, y, side as u32, side as u32))
}

/// Trains a toy autoencoder with an L2 loss on random crops. A held-out
/// share of the images measures reconstruction MSE on whole images.
pub fn train_toy_autoencoder(cfg: &ToyAutoencoderConfig, m: &DatasetManifest) -> Result<TrainedAutoencoder> {
    if m.is_empty() {
        return Err(Error::Empty("autoencoder training manifest has no records".into()));
    }
    let mut ae = ToyAutoencoder::new(cfg.clone())?;
    let images: Vec<Image> = m.records.iter().map(|r| m.load_image(r)).collect::<Result<_>>()?;
    let min_side = images.iter().map(|i| i.width().min(i.height()) as usize).min().unwrap_or(0);
    let side = (cfg.crop_side.min(min_side) / cfg.f) * cfg.f;
    if side == 0 {
        return Err(Error::ImageTooSmall {
            width: min_side as u32,
            height: min_side as u32,
            min: cfg.f as u32,
        });
    }

    let mut rng = seed::rng(cfg.seed, "toy-ae/train");
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_held = if images.len() < 2 {
        0
    } else {
        ((images.len() as f64 * cfg.held_out_fraction).round() as usize).min(images.len() - 1)
    };
    let (held, train) = order.split_at(n_held);
    let held: Vec<usize> = if held.is_empty() { train.to_vec() } else { held.to_vec() };
    let mut train = train.to_vec();

    let mut opt = (Adam::new(cfg.lr), Adam::new(cfg.lr));
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut samples: Vec<usize> = train.iter().flat_map(|&i| std::iter::repeat_n(i, cfg.crops_per_image)).collect();
        samples.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let crops: Vec<Tensor> = chunk.iter().map(|&i| random_crop(&images[i], side, &mut rng)).collect();
            let loss = ae.train_step(&Tensor::stack(&crops), &mut opt);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("toy autoencoder epoch {epoch}: loss {mean:.5}");
        train_loss.push(mean);
    }

    let mut held_out_mse = 0.0;
    for &i in &held {
        let rec = super::reconstruct(&ae, &images[i])?;
        held_out_mse += imaging::mse(&images[i], &rec);
    }
    held_out_mse /= held.len() as f64;
    let missed_target = held_out_mse > cfg.target_mse;
    if missed_target {
        log::warn!(
            "toy autoencoder held-out MSE {held_out_mse:.5} above target {:.5}",
            cfg.target_mse
        );
    }
    Ok(TrainedAutoencoder {
        autoencoder: ae,
        train_loss,
        held_out_mse,
        missed_target,
    })
}
