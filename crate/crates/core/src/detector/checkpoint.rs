//! Checkpoint directories: `weights.bin`, `checkpoint.json` and `history.csv`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_detector, BackboneConfig, Detector, Init, TrainConfig};
use crate::error::{Error, IoContext, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_manifest: Option<String>,
    pub val_manifest: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCheckpoint {
    pub backbone: BackboneConfig,
    pub train_crop_side: u32,
    pub history: Vec<EpochRecord>,
    /// Validation accuracy before the first update.
    pub baseline_accuracy: f64,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub stop_reason: String,
    /// Decision threshold on the score; 0.5 unless calibrated.
    pub threshold: f64,
    pub train_config: TrainConfig,
    pub provenance: Provenance,
}

impl DetectorCheckpoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::parse("checkpoint", format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.history.windows(2).any(|w| w[1].lr > w[0].lr) {
            return Err(Error::parse("checkpoint", "learning-rate history increases"));
        }
        Ok(())
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_accuracy\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_accuracy);
        }
        out
    }

    pub fn save(&self, dir: &Path, detector: &Detector) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).at(dir)?;
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).at(&path)
        };
        write(WEIGHTS_FILE, &detector.weights())?;
        write(
            CHECKPOINT_FILE,
            serde_json::to_string_pretty(self).expect("checkpoint serializes").as_bytes(),
        )?;
        write(HISTORY_FILE, self.history_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<(Detector, DetectorCheckpoint)> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let ckpt: DetectorCheckpoint = serde_json::from_str(&text).map_err(|e| Error::parse("checkpoint", e))?;
        ckpt.validate()?;
        let cfg = BackboneConfig {
            init: Init::Random,
            ..ckpt.backbone.clone()
        };
        let mut det = build_detector(&cfg, 0)?;
        let wpath = dir.join(WEIGHTS_FILE);
        det.load_weights(&std::fs::read(&wpath).at(&wpath)?)?;
        det.set_min_side(ckpt.train_crop_side);
        Ok((det, ckpt))
    }
}
