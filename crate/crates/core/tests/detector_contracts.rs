mod common;

use std::collections::HashMap;

use common::{gradient_image, zero_head};
use fakeprint::augmentation::AugmentationPolicy;
use fakeprint::detector::{
    build_detector, compose_batch, train_with, BackboneConfig, BackboneFamily, BatchComposer, Composer,
    DetectorCheckpoint, Init, PatienceSchedule, Scorer, TrainConfig,
};
use fakeprint::imaging::{to_tensor, Image};
use fakeprint::manifest::Label;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(stem_removed: bool) -> BackboneConfig {
    BackboneConfig {
        family: BackboneFamily::SmallCnn,
        stem_downsampling_removed: stem_removed,
        init: Init::Random,
    }
}

#[test]
fn random_init_is_seeded() {
    let a = build_detector(&small(true), 3).unwrap();
    let b = build_detector(&small(true), 3).unwrap();
    let c = build_detector(&small(true), 4).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn one_logit_at_any_size() {
    let det = build_detector(&small(true), 0).unwrap();
    for side in [96u32, 512] {
        let logits = det.logits(&to_tensor(&gradient_image(side, side, 1)));
        assert_eq!(logits.shape(), [1, 1, 1, 1]);
        assert_eq!(det.output_shape(side as usize, side as usize).unwrap(), [1, 1, 1]);
    }
    assert_eq!(det.logits(&to_tensor(&gradient_image(130, 97, 1))).len(), 1);
}

#[test]
fn resnet_like_backbone_shapes() {
    let cfg = |removed| BackboneConfig {
        family: BackboneFamily::Resnet50Like,
        stem_downsampling_removed: removed,
        init: Init::Random,
    };
    let kept = build_detector(&cfg(false), 0).unwrap();
    assert_eq!(kept.param_count(), 23_510_081);
    assert_eq!(kept.stem_output_shape(96, 96).unwrap(), [64, 24, 24]);
    let removed = build_detector(&cfg(true), 0).unwrap();
    assert_eq!(removed.param_count(), 23_510_081);
    assert_eq!(removed.stem_output_shape(96, 96).unwrap(), [64, 96, 96]);
    for side in [96, 512] {
        assert_eq!(removed.output_shape(side, side).unwrap(), [1, 1, 1]);
    }
    let small_kept = build_detector(&small(false), 0).unwrap();
    assert_eq!(small_kept.stem_output_shape(96, 96).unwrap()[1], 48);
    assert_eq!(build_detector(&small(true), 0).unwrap().stem_output_shape(96, 96).unwrap()[1], 96);
}

#[test]
fn missing_weights_are_reported() {
    let cfg = BackboneConfig {
        init: Init::External("/definitely/not/here.bin".into()),
        ..small(true)
    };
    assert!(build_detector(&cfg, 0).is_err());
    let cfg = BackboneConfig {
        init: Init::PretrainedImagenet,
        ..small(true)
    };
    if std::env::var_os(fakeprint::detector::WEIGHTS_DIR_ENV).is_none() {
        assert!(build_detector(&cfg, 0).is_err());
    }
}

#[test]
fn zero_logit_scores_one_half() {
    let mut det = build_detector(&small(true), 0).unwrap();
    det.load_weights(&zero_head(&det.weights())).unwrap();
    for s in 0..3 {
        assert_eq!(det.score(&gradient_image(40, 50, s)).unwrap(), 0.5);
    }
}

fn paired_composer(n: usize, side: u32) -> BatchComposer {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..n {
        let real = gradient_image(side, side, i as u32);
        let fake = Image::from_fn(side, side, |x, y| {
            let p = real.get_pixel(x, y).0;
            image::Rgb([p[0] / 2 + 60, p[1], p[2]])
        });
        pairs.push((images.len(), images.len() + 1));
        images.push(real);
        images.push(fake);
        labels.extend([Label::Real, Label::Fake]);
        ids.extend([format!("r{i}"), format!("f{i}")]);
    }
    BatchComposer::from_images(images, labels, ids, pairs)
}

#[test]
fn sync_batches_hold_pairs_with_shared_params() {
    let comp = paired_composer(10, 128);
    let mut pol = AugmentationPolicy::default();
    pol.rrc.as_mut().unwrap().output_side = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = compose_batch(&comp, Composer::Sync, &pol, 4, &mut rng).unwrap();
    assert_eq!(b.labels, vec![0.0, 1.0, 0.0, 1.0]);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in &b.params {
        *counts.entry(serde_json::to_string(p).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 2);
    assert!(counts.values().all(|&c| c == 2));
    assert!(compose_batch(&comp, Composer::Sync, &pol, 5, &mut rng).is_err());
}

#[test]
fn sync_requires_pairs() {
    let comp = BatchComposer::from_images(
        vec![gradient_image(100, 100, 0), gradient_image(100, 100, 1)],
        vec![Label::Real, Label::Fake],
        vec!["a".into(), "b".into()],
        vec![],
    );
    let pol = AugmentationPolicy::crop_only(32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(compose_batch(&comp, Composer::Sync, &pol, 2, &mut rng).is_err());
    assert!(compose_batch(&comp, Composer::Random, &pol, 2, &mut rng).is_ok());
}

fn quick_cfg(composer: Composer, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        composer,
        augmentation: AugmentationPolicy::crop_only(32),
        schedule: PatienceSchedule {
            initial_lr: 1e-3,
            ..Default::default()
        },
        max_epochs: epochs,
        seed: 2,
    }
}

#[test]
fn frozen_validation_drops_twice_then_stops() {
    let comp = paired_composer(2, 32);
    let det = build_detector(&small(false), 0).unwrap();
    let mut cfg = quick_cfg(Composer::Sync, 1000);
    cfg.schedule = PatienceSchedule::default();
    let out = train_with(det, &comp, &cfg, &mut |_, _| Ok(0.5)).unwrap();
    let h = &out.checkpoint.history;
    assert_eq!(h.len(), 30);
    assert_eq!(out.checkpoint.stop_reason, "min_lr");
    let lrs: Vec<f64> = h.iter().map(|r| r.lr).collect();
    assert!(lrs[..10].iter().all(|&l| l == 1e-4));
    assert!(lrs[10..20].iter().all(|&l| (l - 1e-5).abs() < 1e-18));
    assert!(lrs[20..].iter().all(|&l| (l - 1e-6).abs() < 1e-18));
}

#[test]
fn training_learns_a_trivial_cue_and_round_trips() {
    let comp = paired_composer(16, 48);
    let det = build_detector(&small(true), 0).unwrap();
    let cfg = quick_cfg(Composer::Sync, 6);
    // accuracy on one held-out probe pair, scored on whole images
    let out = train_with(det, &comp, &cfg, &mut |d, _| {
        let r = d.score(&gradient_image(48, 48, 100))?;
        let f = d.score(&Image::from_fn(48, 48, |x, y| {
            let p = gradient_image(48, 48, 100).get_pixel(x, y).0;
            image::Rgb([p[0] / 2 + 60, p[1], p[2]])
        }))?;
        Ok(((r < 0.5) as u8 + (f >= 0.5) as u8) as f64 / 2.0)
    })
    .unwrap();
    assert!(out.checkpoint.history.iter().all(|r| r.train_loss.is_finite()));
    assert!(out.checkpoint.best_accuracy >= out.checkpoint.baseline_accuracy);

    let dir = tempfile::tempdir().unwrap();
    let mut ck = out.checkpoint.clone();
    ck.threshold = 0.4;
    ck.save(dir.path(), &out.detector).unwrap();
    let (back, back_ck) = DetectorCheckpoint::load(dir.path()).unwrap();
    assert_eq!(back.weights(), out.detector.weights());
    assert_eq!(back_ck, ck);
    assert_eq!(back.min_side(), 32);
}
