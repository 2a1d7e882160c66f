use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fakeprint::accounting::{pipeline_macs, AttentionCounting, PipelineConfigs, PipelineMode};
use fakeprint::augmentation::{self, AugmentationPolicy};
use fakeprint::evaluation::{self, ScoreSet};
use fakeprint::manifest::Label;
use fakeprint::reconstruction::{reconstruct, ToyAutoencoder, ToyAutoencoderConfig};
use fakeprint::robustness::{perturb, SweepKind, SweepSpec};
use fakeprint::{seed, textures};

fn texture(side: u32) -> fakeprint::imaging::Image {
    textures::sample_rendered(&mut seed::rng(0, "bench"), (3, 5), side, side).unwrap().1
}

fn bench_reconstruction(c: &mut Criterion) {
    let ae = ToyAutoencoder::new(ToyAutoencoderConfig::default()).unwrap();
    let img = texture(128);
    c.bench_function("toy_reconstruct_128", |b| b.iter(|| reconstruct(&ae, black_box(&img)).unwrap()));
}

fn bench_augmentation(c: &mut Criterion) {
    let policy = AugmentationPolicy::default();
    let real = texture(256);
    let fake = texture(256);
    let mut rng = seed::rng(1, "bench/aug");
    c.bench_function("paired_apply_256", |b| {
        b.iter(|| {
            let p = augmentation::sample_params(&policy, (256, 256), &mut rng).unwrap();
            augmentation::paired_apply(&real, &fake, &p).unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let n = 10_000;
    let s = ScoreSet::from_pairs((0..n).map(|i| {
        let x = ((i as u64).wrapping_mul(2654435761) % 1000) as f64 / 1000.0;
        (x, if i % 2 == 0 { Label::Fake } else { Label::Real })
    }));
    c.bench_function("average_precision_10k", |b| b.iter(|| evaluation::average_precision(black_box(&s)).unwrap()));
    c.bench_function("calibrate_threshold_10k", |b| b.iter(|| evaluation::calibrate_threshold(black_box(&s)).unwrap()));
}

fn bench_perturb(c: &mut Criterion) {
    let img = texture(256);
    let spec = SweepSpec::new(SweepKind::JpegQuality, vec![50.0, 100.0]);
    c.bench_function("jpeg_perturb_256", |b| b.iter(|| perturb(&img, &spec, 50.0, "bench").unwrap()));
}

fn bench_accounting(c: &mut Criterion) {
    let cfgs = PipelineConfigs::reference();
    c.bench_function("pipeline_macs_reference", |b| {
        b.iter(|| pipeline_macs(&cfgs, 50, 1, PipelineMode::Both, AttentionCounting::Full).unwrap())
    });
}

criterion_group!(benches, bench_reconstruction, bench_augmentation, bench_metrics, bench_perturb, bench_accounting);
criterion_main!(benches);
