//! Finite-difference checks of every hand-written backward pass.
//!
//! Each layer is compared against a naive f64 reference forward written
//! independently here; central differences of `L = Σ out·r` under that
//! reference give the expected gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

type RefFn = dyn Fn(&[f64], &[Vec<f64>]) -> Vec<f64>;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn check(layer: &mut dyn Layer, shape: [usize; 4], reference: &RefFn, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(shape, random_vec(&mut rng, shape.iter().product()));
    let out = layer.forward(&x);
    let r = random_vec(&mut rng, out.len());
    let r64: Vec<f64> = r.iter().map(|&v| v as f64).collect();
    let dx = layer.backward(&Tensor::from_vec(out.shape(), r));

    let mut params: Vec<Vec<f64>> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    layer.visit_params(&mut |p| {
        params.push(p.value.iter().map(|&v| v as f64).collect());
        grads.push(p.grad.iter().map(|&v| v as f64).collect());
    });
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let ref_out = reference(&x64, &params);
    let ours: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
    assert!(rel_err(&ours, &ref_out) < 1e-5, "forward disagrees with reference");

    let loss = |x: &[f64], p: &[Vec<f64>]| -> f64 { reference(x, p).iter().zip(&r64).map(|(a, b)| a * b).sum() };

    let mut fd_x = vec![0.0; x64.len()];
    for i in 0..x64.len() {
        let mut xp = x64.clone();
        xp[i] += STEP;
        let mut xm = x64.clone();
        xm[i] -= STEP;
        fd_x[i] = (loss(&xp, &params) - loss(&xm, &params)) / (2.0 * STEP);
    }
    let dx64: Vec<f64> = dx.data().iter().map(|&v| v as f64).collect();
    let e = rel_err(&dx64, &fd_x);
    assert!(e < REL_TOL, "input gradient relative error {e}");

    for (pi, grad) in grads.iter().enumerate() {
        let mut fd = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let mut pp = params.clone();
            pp[pi][i] += STEP;
            let mut pm = params.clone();
            pm[pi][i] -= STEP;
            fd[i] = (loss(&x64, &pp) - loss(&x64, &pm)) / (2.0 * STEP);
        }
        let e = rel_err(grad, &fd);
        assert!(e < REL_TOL, "param {pi} gradient relative error {e}");
    }
}

fn conv_ref(x: &[f64], [n, c, h, w]: [usize; 4], weight: &[f64], bias: Option<&[f64]>, g: ConvGeometry) -> Vec<f64> {
    let oh = (h + 2 * g.pad - g.k) / g.stride + 1;
    let ow = (w + 2 * g.pad - g.k) / g.stride + 1;
    let mut out = vec![0.0; n * g.out_c * oh * ow];
    for b in 0..n {
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for ci in 0..c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * c + ci) * g.k + ki) * g.k + kj]
                                    * x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * g.out_c + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_strided_padded_with_bias() {
    let g = ConvGeometry {
        in_c: 3,
        out_c: 4,
        k: 3,
        stride: 2,
        pad: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = Conv2d::new(g, true, &mut rng);
    let shape = [2, 3, 7, 6];
    check(&mut conv, shape, &move |x, p| conv_ref(x, shape, &p[0], Some(&p[1]), g), 2);
}

#[test]
fn conv_pointwise_without_bias() {
    let g = ConvGeometry {
        in_c: 5,
        out_c: 3,
        k: 1,
        stride: 1,
        pad: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut conv = Conv2d::new(g, false, &mut rng);
    let shape = [2, 5, 4, 3];
    check(&mut conv, shape, &move |x, p| conv_ref(x, shape, &p[0], None, g), 4);
}

#[test]
fn conv_large_kernel_stride_one() {
    let g = ConvGeometry {
        in_c: 2,
        out_c: 2,
        k: 5,
        stride: 1,
        pad: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut conv = Conv2d::new(g, true, &mut rng);
    let shape = [1, 2, 6, 6];
    check(&mut conv, shape, &move |x, p| conv_ref(x, shape, &p[0], Some(&p[1]), g), 6);
}

#[test]
fn batch_norm_training_mode() {
    let mut bn = BatchNorm2d::new(3);
    // non-trivial affine parameters
    bn.visit_params(&mut |p| {
        for (i, v) in p.value.iter_mut().enumerate() {
            *v += 0.3 * i as f32 - 0.2;
        }
    });
    let shape = [3, 3, 4, 5];
    let reference = move |x: &[f64], p: &[Vec<f64>]| {
        let [n, c, h, w] = shape;
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| (0..plane).map(move |i| (b * c + ch) * plane + i)).map(|i| x[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for b in 0..n {
                for i in 0..plane {
                    let idx = (b * c + ch) * plane + i;
                    out[idx] = p[0][ch] * (x[idx] - mean) / (var + 1e-5).sqrt() + p[1][ch];
                }
            }
        }
        out
    };
    check(&mut bn, shape, &reference, 7);
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lin = Linear::new(12, 3, &mut rng);
    let shape = [4, 3, 2, 2];
    let reference = |x: &[f64], p: &[Vec<f64>]| {
        let mut out = vec![0.0; 4 * 3];
        for b in 0..4 {
            for o in 0..3 {
                out[b * 3 + o] = p[1][o] + (0..12).map(|i| p[0][o * 12 + i] * x[b * 12 + i]).sum::<f64>();
            }
        }
        out
    };
    check(&mut lin, shape, &reference, 9);
}

#[test]
fn pooling_and_resampling() {
    let shape = [2, 2, 5, 4];
    let mut gap = GlobalAvgPool::new();
    let gap_ref = |x: &[f64], _: &[Vec<f64>]| x.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    check(&mut gap, shape, &gap_ref, 10);

    let mut up = Upsample2x::new();
    let up_ref = |x: &[f64], _: &[Vec<f64>]| {
        let mut out = Vec::new();
        for plane in x.chunks(20) {
            for y in 0..10 {
                for xx in 0..8 {
                    out.push(plane[(y / 2) * 4 + xx / 2]);
                }
            }
        }
        out
    };
    check(&mut up, shape, &up_ref, 11);

    // random inputs have no ties, so max pooling is differentiable here
    let mut pool = MaxPool2d::new(3, 2, 1);
    let pool_ref = |x: &[f64], _: &[Vec<f64>]| {
        let mut out = Vec::new();
        for plane in x.chunks(20) {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..3isize {
                        for kj in 0..3isize {
                            let (iy, ix) = (oy as isize * 2 + ki - 1, ox as isize * 2 + kj - 1);
                            if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                best = best.max(plane[iy as usize * 4 + ix as usize]);
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    };
    check(&mut pool, shape, &pool_ref, 12);
}

#[test]
fn activations() {
    let shape = [2, 3, 3, 3];
    let mut sig = Sigmoid::new();
    check(&mut sig, shape, &|x, _| x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(), 13);
    // kink at zero; uniform inputs in [-1, 1] stay well clear of it at this step size
    let mut relu = Relu::new();
    check(&mut relu, shape, &|x, _| x.iter().map(|v| v.max(0.0)).collect(), 14);
}

#[test]
fn residual_block_with_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g1 = ConvGeometry {
        in_c: 2,
        out_c: 3,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let gs = ConvGeometry {
        in_c: 2,
        out_c: 3,
        k: 1,
        stride: 1,
        pad: 0,
    };
    let main = Sequential::new().with(Conv2d::new(g1, true, &mut rng));
    let short = Sequential::new().with(Conv2d::new(gs, false, &mut rng));
    let mut block = Residual::new(main, Some(short));
    let shape = [2, 2, 4, 4];
    let reference = move |x: &[f64], p: &[Vec<f64>]| {
        let a = conv_ref(x, shape, &p[0], Some(&p[1]), g1);
        let b = conv_ref(x, shape, &p[2], None, gs);
        a.iter().zip(&b).map(|(u, v)| (u + v).max(0.0)).collect()
    };
    check(&mut block, shape, &reference, 16);
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let logits = Tensor::from_vec([6, 1, 1, 1], random_vec(&mut rng, 6).iter().map(|v| v * 4.0).collect());
    let labels = [0.0f64, 1.0, 1.0, 0.0, 1.0, 0.0];
    let labels32: Vec<f32> = labels.iter().map(|&v| v as f32).collect();
    let bce = |z: &[f64]| -> f64 {
        z.iter()
            .zip(&labels)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / z.len() as f64
    };
    let (loss, grad) = loss::bce_with_logits(&logits, &labels32);
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    assert!((loss - bce(&z)).abs() < 1e-9);
    let fd: Vec<f64> = (0..z.len())
        .map(|i| {
            let mut zp = z.clone();
            zp[i] += STEP;
            let mut zm = z.clone();
            zm[i] -= STEP;
            (bce(&zp) - bce(&zm)) / (2.0 * STEP)
        })
        .collect();
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    assert!(rel_err(&g, &fd) < REL_TOL);

    let pred = Tensor::from_vec([1, 1, 2, 3], random_vec(&mut rng, 6));
    let target = Tensor::from_vec([1, 1, 2, 3], random_vec(&mut rng, 6));
    let t64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let mse = |p: &[f64]| p.iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0;
    let (_, grad) = loss::mse(&pred, &target);
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let fd: Vec<f64> = (0..6)
        .map(|i| {
            let mut pp = p.clone();
            pp[i] += STEP;
            let mut pm = p.clone();
            pm[i] -= STEP;
            (mse(&pp) - mse(&pm)) / (2.0 * STEP)
        })
        .collect();
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    assert!(rel_err(&g, &fd) < REL_TOL);
}

#[test]
fn weight_blob_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let g = ConvGeometry {
        in_c: 3,
        out_c: 2,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let make = |rng: &mut ChaCha8Rng| {
        Sequential::new()
            .with(Conv2d::new(g, true, rng))
            .with(BatchNorm2d::new(2))
            .with(Relu::new())
    };
    let mut a = make(&mut rng);
    let x = Tensor::from_vec([2, 3, 4, 4], random_vec(&mut rng, 96));
    a.forward(&x); // moves running statistics away from their initial values
    let blob = io::encode_state(&a);
    let mut b = make(&mut rng);
    io::decode_state(&blob, &mut b).unwrap();
    assert_eq!(a.infer(&x), b.infer(&x));
    assert!(io::decode_state(&blob[..blob.len() - 1], &mut b).is_err());
}
