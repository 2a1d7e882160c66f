#![allow(dead_code)]

use std::path::Path;

use fakeprint::accounting::LayerDesc;
use fakeprint::evaluation::ScoreSet;
use fakeprint::imaging::Image;
use fakeprint::manifest::Label;
use rand::Rng;

/// Precision evaluated at each positive's own score, averaged over positives.
pub fn ap_oracle(pairs: &[(f64, Label)]) -> f64 {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1 == Label::Fake).map(|p| p.0).collect();
    let mut sum = 0.0;
    for &t in &pos {
        let called = pairs.iter().filter(|p| p.0 >= t).count();
        let hits = pairs.iter().filter(|p| p.0 >= t && p.1 == Label::Fake).count();
        sum += hits as f64 / called as f64;
    }
    sum / pos.len() as f64
}

/// Tries every observed score (and +inf) as a `score >= t` threshold and
/// keeps the best TPR among those with FPR within target.
pub fn tpr_oracle(pairs: &[(f64, Label)], target: f64) -> f64 {
    let neg = pairs.iter().filter(|p| p.1 == Label::Real).count() as f64;
    let pos = pairs.iter().filter(|p| p.1 == Label::Fake).count() as f64;
    let mut best = 0.0f64;
    for &(t, _) in pairs {
        let fp = pairs.iter().filter(|p| p.0 >= t && p.1 == Label::Real).count() as f64;
        let tp = pairs.iter().filter(|p| p.0 >= t && p.1 == Label::Fake).count() as f64;
        if fp / neg <= target {
            best = best.max(tp / pos);
        }
    }
    best
}

pub fn accuracy_oracle(pairs: &[(f64, Label)], t: f64) -> f64 {
    let ok = pairs.iter().filter(|p| (p.0 >= t) == (p.1 == Label::Fake)).count();
    ok as f64 / pairs.len() as f64
}

/// Best accuracy over the grid `k / (points - 1)`.
pub fn grid_best(pairs: &[(f64, Label)], points: usize) -> (f64, f64) {
    (0..points)
        .map(|k| k as f64 / (points - 1) as f64)
        .filter(|t| *t > 0.0 && *t < 1.0)
        .map(|t| (accuracy_oracle(pairs, t), t))
        .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Both labels guaranteed; about half the sets draw from a coarse grid so
/// ties are common.
pub fn random_pairs(rng: &mut impl Rng, max_len: usize) -> Vec<(f64, Label)> {
    let n = rng.random_range(2..=max_len);
    let coarse = rng.random_bool(0.5);
    let mut v: Vec<(f64, Label)> = (0..n)
        .map(|_| {
            let label = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
            let shift = if label == Label::Fake { 0.15 } else { 0.0 };
            let mut s: f64 = (rng.random::<f64>() * 0.85 + shift).clamp(0.0, 1.0);
            if coarse {
                s = (s * 20.0).round() / 20.0;
            }
            (s, label)
        })
        .collect();
    v[0].1 = Label::Real;
    v[1].1 = Label::Fake;
    v
}

pub fn score_set(pairs: &[(f64, Label)]) -> ScoreSet {
    ScoreSet::from_pairs(pairs.iter().copied())
}

/// Counts one per multiply by walking the loops of each operation.
pub fn brute_force_macs(d: &LayerDesc) -> u128 {
    let mut count = 0u128;
    match *d {
        LayerDesc::Conv {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h,
            in_w,
        } => {
            let mut oy = 0;
            while oy * stride + k <= in_h + 2 * pad {
                let mut ox = 0;
                while ox * stride + k <= in_w + 2 * pad {
                    for _ in 0..out_c {
                        for _ in 0..in_c {
                            for _ in 0..k * k {
                                count += 1;
                            }
                        }
                    }
                    ox += 1;
                }
                oy += 1;
            }
        }
        LayerDesc::Linear { in_dim, out_dim, tokens } => {
            for _ in 0..tokens * out_dim {
                for _ in 0..in_dim {
                    count += 1;
                }
            }
        }
        LayerDesc::Attention { dim, heads, tokens } => {
            let head_dim = dim / heads;
            // q, k, v and output projections
            for _ in 0..4 * tokens * dim {
                for _ in 0..dim {
                    count += 1;
                }
            }
            for _ in 0..heads {
                for _ in 0..tokens * tokens {
                    // q·k and the weighted sum of v
                    for _ in 0..2 * head_dim {
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

pub fn gradient_image(w: u32, h: u32, salt: u32) -> Image {
    Image::from_fn(w, h, |x, y| {
        image::Rgb([
            (x * 7 + y * 3).wrapping_add(salt) as u8,
            (x * 2 + y * 11).wrapping_add(salt.wrapping_mul(5)) as u8,
            (x ^ y).wrapping_add(salt) as u8,
        ])
    })
}

pub fn write_png(path: &Path, img: &Image) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save_with_format(path, image::ImageFormat::Png).unwrap();
}

/// Zeroes the last two state tensors of a weight blob (the head's weight
/// and bias), so the detector emits logit 0 everywhere.
pub fn zero_head(blob: &[u8]) -> Vec<u8> {
    let count = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
    let mut spans = Vec::new();
    let mut pos = 8;
    for _ in 0..count {
        let len = u64::from_le_bytes(blob[pos..pos + 8].try_into().unwrap()) as usize;
        spans.push((pos + 8, pos + 8 + 4 * len));
        pos += 8 + 4 * len;
    }
    let mut out = blob.to_vec();
    for &(a, b) in &spans[count - 2..] {
        out[a..b].fill(0);
    }
    out
}
