//! Batch composition (Random or Sync) and the finetuning loop with a
//! patience-based learning-rate schedule.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{DetectorCheckpoint, EpochRecord, Provenance};
use super::{Detector, Scorer};
use crate::augmentation::{self, AugmentationParams, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::imaging::{self, Image};
use crate::manifest::{DatasetManifest, Label};
use crate::nn::{loss, Adam, Layer, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Composer {
    /// Images drawn independently, each with its own augmentation.
    Random,
    /// Real/fake pairs in the same batch sharing one augmentation.
    Sync,
}

impl std::str::FromStr for Composer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Composer::Random),
            "sync" => Ok(Composer::Sync),
            _ => Err(Error::InvalidArgument(format!("composer {s:?} is not random or sync"))),
        }
    }
}

impl std::fmt::Display for Composer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Composer::Random => "Random",
            Composer::Sync => "Sync",
        })
    }
}

/// Divide the learning rate by `factor` when the best validation accuracy
/// has improved by less than `min_improvement` over the last `window`
/// epochs; stop once the rate would fall below `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatienceSchedule {
    pub initial_lr: f64,
    pub min_improvement: f64,
    pub window: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for PatienceSchedule {
    fn default() -> Self {
        PatienceSchedule {
            initial_lr: 1e-4,
            min_improvement: 0.001,
            window: 10,
            factor: 10.0,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleDecision {
    Keep,
    /// Continue with this many drops applied in total.
    Drop(u32),
    Stop,
}

impl PatienceSchedule {
    pub fn lr_after(&self, drops: u32) -> f64 {
        self.initial_lr / self.factor.powi(drops as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.min_lr > 0.0 && self.factor > 1.0 && self.window > 0) {
            return Err(Error::InvalidArgument(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// Decision after `epoch` given `best[e]`, the best validation accuracy
/// over epochs `0..=e` (epoch 0 is the untrained baseline), the epoch of
/// the last drop (0 if none) and the number of drops so far.
pub fn schedule_step(s: &PatienceSchedule, best: &[f64], epoch: usize, last_drop: usize, drops: u32) -> ScheduleDecision {
    if epoch < last_drop + s.window || epoch < s.window {
        return ScheduleDecision::Keep;
    }
    if best[epoch] - best[epoch - s.window] >= s.min_improvement - 1e-12 {
        return ScheduleDecision::Keep;
    }
    if s.lr_after(drops + 1) < s.min_lr * (1.0 - 1e-9) {
        ScheduleDecision::Stop
    } else {
        ScheduleDecision::Drop(drops + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub composer: Composer,
    /// Includes the training crop side.
    pub augmentation: AugmentationPolicy,
    pub schedule: PatienceSchedule,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            composer: Composer::Sync,
            augmentation: AugmentationPolicy::default(),
            schedule: PatienceSchedule::default(),
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn train_crop_side(&self) -> u32 {
        self.augmentation.train_crop_side
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size {} below 2", self.batch_size)));
        }
        if self.composer == Composer::Sync && !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "Sync batches hold pairs; batch size {} is odd",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One composed batch; `params[i]` produced sample `i`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<f32>,
    pub params: Vec<AugmentationParams>,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Single(usize),
    Pair(usize, usize),
}

/// Training images held in memory with their labels and pair links.
pub struct BatchComposer {
    images: Vec<Image>,
    labels: Vec<Label>,
    ids: Vec<String>,
    pairs: Vec<(usize, usize)>,
}

impl BatchComposer {
    pub fn new(m: &DatasetManifest) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::Empty("training manifest has no records".into()));
        }
        let images = m.records.iter().map(|r| m.load_image(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_images(
            images,
            m.records.iter().map(|r| r.label).collect(),
            m.records.iter().map(|r| r.id.clone()).collect(),
            m.pairs(),
        ))
    }

    pub fn from_images(images: Vec<Image>, labels: Vec<Label>, ids: Vec<String>, pairs: Vec<(usize, usize)>) -> Self {
        BatchComposer {
            images,
            labels,
            ids,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    fn require_pairs(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Unpaired("Sync batches need linked real/fake pairs".into()));
        }
        Ok(())
    }

    fn require_both_labels(&self) -> Result<()> {
        let fakes = self.labels.iter().filter(|l| **l == Label::Fake).count();
        if fakes == 0 || fakes == self.labels.len() {
            return Err(Error::SingleLabel);
        }
        Ok(())
    }

    /// One epoch: every image once (Random) or every pair once (Sync), shuffled.
    fn epoch_plan(&self, composer: Composer, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<Item>> {
        match composer {
            Composer::Random => {
                let mut items: Vec<Item> = (0..self.len()).map(Item::Single).collect();
                items.shuffle(rng);
                items.chunks(batch_size).map(<[Item]>::to_vec).collect()
            }
            Composer::Sync => {
                let mut items: Vec<Item> = self.pairs.iter().map(|&(r, f)| Item::Pair(r, f)).collect();
                items.shuffle(rng);
                items.chunks(batch_size / 2).map(<[Item]>::to_vec).collect()
            }
        }
    }

    fn compose(&self, items: &[Item], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Batch> {
        let mut samples = Vec::with_capacity(items.len() * 2);
        let mut labels = Vec::with_capacity(samples.capacity());
        let mut params = Vec::with_capacity(samples.capacity());
        let mut ids = Vec::with_capacity(samples.capacity());
        for item in items {
            match *item {
                Item::Single(i) => {
                    let p = augmentation::sample_params(policy, self.images[i].dimensions(), rng)?;
                    samples.push(imaging::to_tensor(&augmentation::apply(&self.images[i], &p)?));
                    labels.push(self.labels[i].as_target());
                    params.push(p);
                    ids.push(self.ids[i].clone());
                }
                Item::Pair(r, f) => {
                    let p = augmentation::sample_params(policy, self.images[r].dimensions(), rng)?;
                    let (a, b) = augmentation::paired_apply(&self.images[r], &self.images[f], &p)?;
                    samples.push(imaging::to_tensor(&a));
                    samples.push(imaging::to_tensor(&b));
                    labels.extend([Label::Real.as_target(), Label::Fake.as_target()]);
                    params.push(p.clone());
                    params.push(p);
                    ids.push(self.ids[r].clone());
                    ids.push(self.ids[f].clone());
                }
            }
        }
        Ok(Batch {
            input: Tensor::stack(&samples),
            labels,
            params,
            ids,
        })
    }
}

/// Draws one batch: `batch_size` distinct images (Random) or
/// `batch_size / 2` distinct pairs (Sync).
pub fn compose_batch(
    composer: &BatchComposer,
    variant: Composer,
    policy: &AugmentationPolicy,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let items: Vec<Item> = match variant {
        Composer::Random => {
            let n = batch_size.min(composer.len());
            index::sample(rng, composer.len(), n).into_iter().map(Item::Single).collect()
        }
        Composer::Sync => {
            composer.require_pairs()?;
            if !batch_size.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!("Sync batch size {batch_size} is odd")));
            }
            let n = (batch_size / 2).min(composer.pair_count());
            index::sample(rng, composer.pair_count(), n)
                .into_iter()
                .map(|k| {
                    let (r, f) = composer.pairs[k];
                    Item::Pair(r, f)
                })
                .collect()
        }
    };
    composer.compose(&items, policy, rng)
}

/// Accuracy at threshold 0.5: fraction of records with
/// `(score >= 0.5) == (label == fake)`. Images the scorer rejects as too
/// small are skipped with a warning.
pub fn validate(scorer: &dyn Scorer, m: &DatasetManifest) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Empty("validation manifest has no records".into()));
    }
    let mut correct = 0usize;
    let mut counted = 0usize;
    for r in &m.records {
        let img = m.load_image(r)?;
        match scorer.score(&img) {
            Ok(s) => {
                counted += 1;
                if (s >= 0.5) == (r.label == Label::Fake) {
                    correct += 1;
                }
            }
            Err(e @ Error::ImageTooSmall { .. }) => log::warn!("skipping {} in validation: {e}", r.id),
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(Error::Empty("no validation image was large enough to score".into()));
    }
    Ok(correct as f64 / counted as f64)
}

struct ValidationSet {
    images: Vec<Image>,
    labels: Vec<Label>,
}

impl ValidationSet {
    fn new(m: &DatasetManifest) -> Result<Self> {
        let fakes = m.count(Label::Fake);
        if fakes == 0 || fakes == m.len() {
            return Err(Error::SingleLabel);
        }
        Ok(ValidationSet {
            images: m.records.iter().map(|r| m.load_image(r)).collect::<Result<_>>()?,
            labels: m.records.iter().map(|r| r.label).collect(),
        })
    }

    fn accuracy(&self, det: &Detector) -> Result<f64> {
        let mut correct = 0usize;
        let mut counted = 0usize;
        for (img, label) in self.images.iter().zip(&self.labels) {
            match det.score(img) {
                Ok(s) => {
                    counted += 1;
                    correct += usize::from((s >= 0.5) == (*label == Label::Fake));
                }
                Err(Error::ImageTooSmall { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if counted == 0 {
            return Err(Error::Empty("no validation image was large enough to score".into()));
        }
        Ok(correct as f64 / counted as f64)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub detector: Detector,
    pub checkpoint: DetectorCheckpoint,
}

/// Trains on `train_m`, validating on whole images of `val_m` after each epoch.
pub fn train(detector: Detector, train_m: &DatasetManifest, val_m: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let val = ValidationSet::new(val_m)?;
    let composer = BatchComposer::new(train_m)?;
    let mut outcome = train_with(detector, &composer, cfg, &mut |det, _| val.accuracy(det))?;
    outcome.checkpoint.provenance.train_manifest = Some(train_m.content_hash());
    outcome.checkpoint.provenance.val_manifest = Some(val_m.content_hash());
    Ok(outcome)
}

/// Training loop with a caller-supplied validation function, called with
/// the current detector and epoch (0 = before training).
pub fn train_with(
    mut detector: Detector,
    composer: &BatchComposer,
    cfg: &TrainConfig,
    validator: &mut dyn FnMut(&Detector, usize) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    composer.require_both_labels()?;
    if cfg.composer == Composer::Sync {
        composer.require_pairs()?;
    }
    detector.set_min_side(cfg.train_crop_side());
    let schedule = cfg.schedule;

    let baseline = validator(&detector, 0)?;
    let mut best = vec![baseline];
    let mut history = Vec::new();
    let mut opt = Adam::new(schedule.initial_lr);
    let mut drops = 0u32;
    let mut last_drop = 0usize;
    let mut best_state: Option<(usize, f64, Vec<Vec<f32>>)> = None;
    let mut stop_reason = "max_epochs";

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr_after(drops);
        opt.lr = lr;
        let mut order_rng = seed::rng(cfg.seed, &format!("train/epoch{epoch}/order"));
        let plan = composer.epoch_plan(cfg.composer, cfg.batch_size, &mut order_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, items) in plan.iter().enumerate() {
            let mut rng = seed::rng(cfg.seed, &format!("train/epoch{epoch}/batch{b}"));
            let batch = composer.compose(items, &cfg.augmentation, &mut rng)?;
            if batch.labels.len() < 2 {
                continue;
            }
            let net = detector.net_mut();
            net.zero_grad();
            let logits = net.forward(&batch.input);
            let (loss, grad) = loss::bce_with_logits(&logits, &batch.labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            net.backward(&grad);
            opt.step(net);
            loss_sum += loss;
            batches += 1;
        }
        let acc = validator(&detector, epoch)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("epoch {epoch}: lr {lr:e} loss {train_loss:.4} val acc {acc:.4}");
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_accuracy: acc,
        });
        best.push(best[epoch - 1].max(acc));
        if best_state.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            best_state = Some((epoch, acc, detector.net().snapshot()));
        }
        match schedule_step(&schedule, &best, epoch, last_drop, drops) {
            ScheduleDecision::Keep => {}
            ScheduleDecision::Drop(d) => {
                drops = d;
                last_drop = epoch;
            }
            ScheduleDecision::Stop => {
                stop_reason = "min_lr";
                break;
            }
        }
    }

    let (best_epoch, best_accuracy) = match best_state {
        Some((e, a, state)) => {
            detector.net_mut().restore(&state)?;
            (e, a)
        }
        None => (0, baseline),
    };
    let checkpoint = DetectorCheckpoint {
        backbone: detector.config().clone(),
        train_crop_side: cfg.train_crop_side(),
        history,
        baseline_accuracy: baseline,
        best_epoch,
        best_accuracy,
        stop_reason: stop_reason.into(),
        threshold: 0.5,
        train_config: cfg.clone(),
        provenance: Provenance {
            train_manifest: None,
            val_manifest: None,
            seed: cfg.seed,
        },
    };
    Ok(TrainOutcome { detector, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_accuracy_drops_twice_then_stops() {
        let s = PatienceSchedule::default();
        let best = vec![0.5; 64];
        let (mut drops, mut last) = (0u32, 0usize);
        let mut lrs = Vec::new();
        let mut stopped_after = None;
        for epoch in 1..64 {
            lrs.push(s.lr_after(drops));
            match schedule_step(&s, &best, epoch, last, drops) {
                ScheduleDecision::Keep => {}
                ScheduleDecision::Drop(d) => {
                    drops = d;
                    last = epoch;
                }
                ScheduleDecision::Stop => {
                    stopped_after = Some(epoch);
                    break;
                }
            }
        }
        assert_eq!(stopped_after, Some(30));
        assert_eq!(drops, 2);
        assert!(lrs[..10].iter().all(|&l| l == 1e-4));
        assert!(lrs[10..20].iter().all(|&l| (l - 1e-5).abs() < 1e-18));
        assert!(lrs[20..].iter().all(|&l| (l - 1e-6).abs() < 1e-18));
    }

    #[test]
    fn steady_improvement_keeps_rate() {
        let s = PatienceSchedule::default();
        let best: Vec<f64> = (0..40).map(|e| 0.5 + 0.002 * e as f64).collect();
        for epoch in 1..40 {
            assert_eq!(schedule_step(&s, &best, epoch, 0, 0), ScheduleDecision::Keep);
        }
    }

    #[test]
    fn odd_sync_batch_rejected() {
        let cfg = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
