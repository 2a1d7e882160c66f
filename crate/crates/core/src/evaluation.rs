//! Scoring, thresholded and threshold-free metrics, threshold calibration,
//! and the reconstruction-distance baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Scorer;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{self, Image};
use crate::manifest::{DatasetManifest, Label};
use crate::reconstruction::{self, AutoencoderHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
    pub detector: String,
    pub manifest_hash: String,
    /// Ids left out because the image was too small to score.
    #[serde(default)]
    pub flagged: Vec<String>,
}

impl ScoreSet {
    /// Entries built from `(score, label)` pairs with generated ids; handy for tests.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Label)>) -> Self {
        let entries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (score, label))| ScoreEntry {
                id: format!("e{i}"),
                score,
                label,
                source_tag: label.to_string(),
            })
            .collect();
        ScoreSet {
            entries,
            detector: String::new(),
            manifest_hash: String::new(),
            flagged: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let fakes = self.entries.iter().filter(|e| e.label == Label::Fake).count();
        (self.entries.len() - fakes, fakes)
    }

    fn require_both_labels(&self) -> Result<()> {
        let (reals, fakes) = self.counts();
        if reals == 0 || fakes == 0 {
            return Err(Error::SingleLabel);
        }
        Ok(())
    }

    pub fn mean_score(&self, label: Label) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.label == label).map(|e| e.score).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("scores serialize");
        std::fs::write(path, text).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse("score set", e))
    }
}

/// Scores every record on the whole image. Images below the scorer's
/// minimum side are flagged and left out.
pub fn score(scorer: &dyn Scorer, m: &DatasetManifest) -> Result<ScoreSet> {
    let mut set = ScoreSet {
        entries: Vec::with_capacity(m.len()),
        detector: scorer.identity(),
        manifest_hash: m.content_hash(),
        flagged: Vec::new(),
    };
    for r in &m.records {
        let img = m.load_image(r)?;
        match scorer.score(&img) {
            Ok(s) => {
                if !(s.is_finite() && (0.0..=1.0).contains(&s)) {
                    return Err(Error::InvalidArgument(format!("score {s} for {} outside [0, 1]", r.id)));
                }
                set.entries.push(ScoreEntry {
                    id: r.id.clone(),
                    score: s,
                    label: r.label,
                    source_tag: r.source_tag.clone(),
                });
            }
            Err(e @ Error::ImageTooSmall { .. }) => {
                log::warn!("excluding {} from scoring: {e}", r.id);
                set.flagged.push(r.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub source_tag: String,
    pub label: Label,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub threshold: f64,
    pub overall: f64,
    pub real: Option<f64>,
    pub fake: Option<f64>,
    /// One group per `(source_tag, label)`.
    pub groups: Vec<GroupAccuracy>,
}

fn correct(score: f64, label: Label, t: f64) -> bool {
    (score >= t) == (label == Label::Fake)
}

/// Classifies "fake" iff `score >= t`.
pub fn accuracy_at_threshold(s: &ScoreSet, t: f64) -> Result<AccuracyReport> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1)")));
    }
    if s.is_empty() {
        return Err(Error::Empty("score set has no entries".into()));
    }
    let mut groups: BTreeMap<(String, Label), (usize, usize)> = BTreeMap::new();
    for e in &s.entries {
        let g = groups.entry((e.source_tag.clone(), e.label)).or_default();
        g.0 += 1;
        g.1 += usize::from(correct(e.score, e.label, t));
    }
    let by_label = |label: Label| {
        let (n, c) = groups
            .iter()
            .filter(|((_, l), _)| *l == label)
            .fold((0, 0), |(n, c), (_, (gn, gc))| (n + gn, c + gc));
        if n == 0 {
            log::warn!("no {label} entries; {label} accuracy omitted");
            None
        } else {
            Some(c as f64 / n as f64)
        }
    };
    let (real, fake) = (by_label(Label::Real), by_label(Label::Fake));
    let total_correct: usize = groups.values().map(|g| g.1).sum();
    Ok(AccuracyReport {
        threshold: t,
        overall: total_correct as f64 / s.len() as f64,
        real,
        fake,
        groups: groups
            .into_iter()
            .map(|((source_tag, label), (n, c))| GroupAccuracy {
                source_tag,
                label,
                n,
                correct: c,
                accuracy: c as f64 / n as f64,
            })
            .collect(),
    })
}

/// Entries sorted by descending score, as `(score, positives, negatives)`
/// per group of tied scores.
fn tie_groups(s: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let mut v: Vec<(f64, bool)> = s.entries.iter().map(|e| (e.score, e.label == Label::Fake)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (score, pos) in v {
        match groups.last_mut() {
            Some(g) if g.0 == score => {
                if pos {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((score, usize::from(pos), usize::from(!pos))),
        }
    }
    groups
}

/// `Σ_k (R_k − R_{k−1}) · P_k` over descending score thresholds with fakes
/// as positives; tied scores enter together.
pub fn average_precision(s: &ScoreSet) -> Result<f64> {
    s.require_both_labels()?;
    let (_, positives) = s.counts();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, pos, neg) in tie_groups(s) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / positives as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Fake iff `score >= threshold`; may be `+∞`.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// The most permissive threshold among observed scores and `+∞` whose
/// false-positive rate is at most `target_fpr`, with its rates.
pub fn operating_point(s: &ScoreSet, target_fpr: f64) -> Result<OperatingPoint> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidArgument(format!("target FPR {target_fpr} outside (0, 1)")));
    }
    s.require_both_labels()?;
    let (negatives, positives) = s.counts();
    let mut best = OperatingPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for (score, pos, neg) in tie_groups(s) {
        tp += pos;
        fp += neg;
        let fpr = fp as f64 / negatives as f64;
        if fpr > target_fpr {
            break;
        }
        best = OperatingPoint {
            threshold: score,
            tpr: tp as f64 / positives as f64,
            fpr,
        };
    }
    if best.threshold.is_infinite() {
        log::warn!("no observed threshold reaches FPR <= {target_fpr}; reporting TPR at +inf");
    }
    Ok(best)
}

/// True-positive rate at the operating point of [`operating_point`].
pub fn tpr_at_fpr(s: &ScoreSet, target_fpr: f64) -> Result<f64> {
    Ok(operating_point(s, target_fpr)?.tpr)
}

/// Accuracy-maximizing threshold among midpoints of adjacent distinct
/// values of `{0} ∪ scores ∪ {1}`; the lowest wins ties.
pub fn calibrate_threshold(val: &ScoreSet) -> Result<f64> {
    val.require_both_labels()?;
    let mut values: Vec<f64> = val.entries.iter().map(|e| e.score).chain([0.0, 1.0]).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    // Ascending sweep: at a candidate between values[k] and values[k+1], the
    // entries with score >= values[k+1] are called fake.
    let groups = {
        let mut g = tie_groups(val);
        g.reverse();
        g
    };
    let (_, positives) = val.counts();
    let mut below_neg = 0usize;
    let mut below_pos = 0usize;
    let mut gi = 0;
    let mut best: Option<(usize, f64)> = None;
    for w in values.windows(2) {
        while gi < groups.len() && groups[gi].0 <= w[0] {
            below_pos += groups[gi].1;
            below_neg += groups[gi].2;
            gi += 1;
        }
        let t = (w[0] + w[1]) / 2.0;
        let correct = below_neg + (positives - below_pos);
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, t));
        }
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| Error::InvalidArgument("scores leave no candidate threshold".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub manifest_hash: String,
    pub threshold: f64,
    pub accuracy: AccuracyReport,
    pub average_precision: Option<f64>,
    pub target_fpr: f64,
    pub tpr_at_fpr: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
    pub n_flagged: usize,
}

impl EvalReport {
    /// Per-group accuracies as CSV rows `source_tag,label,n,accuracy`.
    pub fn groups_csv(&self) -> String {
        let mut out = String::from("source_tag,label,n,accuracy\n");
        for g in &self.accuracy.groups {
            let _ = writeln!(out, "{},{},{},{}", g.source_tag, g.label, g.n, g.accuracy);
        }
        out
    }
}

/// All metrics of one score set; AP and TPR are omitted when only one label is present.
pub fn evaluate(s: &ScoreSet, threshold: f64, target_fpr: f64) -> Result<EvalReport> {
    let accuracy = accuracy_at_threshold(s, threshold)?;
    let (n_real, n_fake) = s.counts();
    let both = n_real > 0 && n_fake > 0;
    Ok(EvalReport {
        detector: s.detector.clone(),
        manifest_hash: s.manifest_hash.clone(),
        threshold,
        accuracy,
        average_precision: if both { Some(average_precision(s)?) } else { None },
        target_fpr,
        tpr_at_fpr: if both { Some(tpr_at_fpr(s, target_fpr)?) } else { None },
        n_real,
        n_fake,
        n_flagged: s.flagged.len(),
    })
}

/// Distance between an image and its reconstruction.
pub trait ImageDistance: Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> f64;
}

/// Mean squared error on the `[0, 1]` scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct MseDistance;

impl ImageDistance for MseDistance {
    fn name(&self) -> &str {
        "mse"
    }

    fn distance(&self, a: &Image, b: &Image) -> f64 {
        imaging::mse(a, b)
    }
}

/// Threshold meant for a learned perceptual distance; it carries no meaning
/// for [`MseDistance`].
pub const PERCEPTUAL_DISTANCE_THRESHOLD: f64 = 0.018;

/// `min_h dist(x, reconstruct(h, x))` over the ensemble; handles that fail
/// on `x` are skipped.
pub fn reconstruction_distance_score(
    ensemble: &[&dyn AutoencoderHandle],
    dist: &dyn ImageDistance,
    x: &Image,
) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("autoencoder ensemble is empty".into()));
    }
    let mut best: Option<f64> = None;
    let mut last_err = None;
    for ae in ensemble {
        match reconstruction::reconstruct(*ae, x) {
            Ok(rec) => {
                let d = dist.distance(x, &rec);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(d), _) => Ok(d),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("non-empty ensemble"),
    }
}

/// Calls an image fake when its reconstruction distance is below `threshold`.
pub struct ReconstructionDistanceDetector<'a> {
    pub ensemble: Vec<&'a dyn AutoencoderHandle>,
    pub distance: &'a dyn ImageDistance,
    pub threshold: f64,
}

impl ReconstructionDistanceDetector<'_> {
    pub fn distance_of(&self, x: &Image) -> Result<f64> {
        reconstruction_distance_score(&self.ensemble, self.distance, x)
    }

    pub fn is_fake(&self, x: &Image) -> Result<bool> {
        Ok(self.distance_of(x)? < self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(reals: &[f64], fakes: &[f64]) -> ScoreSet {
        ScoreSet::from_pairs(
            reals
                .iter()
                .map(|&s| (s, Label::Real))
                .chain(fakes.iter().map(|&s| (s, Label::Fake))),
        )
    }

    #[test]
    fn hand_counted_accuracy() {
        let s = set(&[0.1, 0.2, 0.6, 0.7], &[0.4, 0.8, 0.9, 0.55]);
        let r = accuracy_at_threshold(&s, 0.5).unwrap();
        assert_eq!(r.real, Some(0.5));
        assert_eq!(r.fake, Some(0.75));
        assert_eq!(r.overall, 0.625);
        assert_eq!(accuracy_at_threshold(&set(&[0.6], &[0.4]), 0.5).unwrap().overall, 0.0);
        assert_eq!(accuracy_at_threshold(&set(&[0.0], &[1.0]), 0.5).unwrap().overall, 1.0);
        assert!(accuracy_at_threshold(&s, 1.0).is_err());
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        let tied = set(&[0.5; 7], &[0.5; 3]);
        assert!((average_precision(&tied).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(average_precision(&set(&[0.1], &[])), Err(Error::SingleLabel)));
    }

    #[test]
    fn tpr_edge_cases() {
        let s = set(&[0.0; 20], &[1.0; 20]);
        assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), 1.0);
        // Every real outranks every fake: only +inf keeps FPR at zero.
        let s = set(&[0.9; 10], &[0.1; 10]);
        let p = operating_point(&s, 0.05).unwrap();
        assert!(p.threshold.is_infinite());
        assert_eq!(p.tpr, 0.0);
    }

    #[test]
    fn calibration_separable_gap() {
        let s = set(&[0.1, 0.2, 0.3], &[0.7, 0.8]);
        let t = calibrate_threshold(&s).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert_eq!(accuracy_at_threshold(&s, t).unwrap().overall, 1.0);
    }

    #[test]
    fn identity_stub_distance_is_zero() {
        let ae = reconstruction::IdentityAutoencoder { f: 8 };
        let img = Image::from_fn(40, 33, |x, y| image::Rgb([x as u8, y as u8, (x * y) as u8]));
        let d = reconstruction_distance_score(&[&ae], &MseDistance, &img).unwrap();
        assert_eq!(d, 0.0);
        assert!(reconstruction_distance_score(&[], &MseDistance, &img).is_err());
    }
}
