use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::accounting::LayerDesc;
use crate::error::{Error, Result};

/// Trainable parameter with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A differentiable network stage.
///
/// `infer` is the read-only evaluation path. `forward` runs in training mode
/// and caches whatever `backward` needs; `backward` takes the gradient of the
/// loss with respect to the layer output, accumulates parameter gradients and
/// returns the gradient with respect to the layer input.
pub trait Layer: Send + Sync {
    fn infer(&self, x: &Tensor) -> Tensor;
    fn forward(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param)) {}

    /// Visits parameter values followed by non-trainable buffers, in a fixed order.
    fn visit_state(&self, f: &mut dyn FnMut(&[f32])) {
        self.visit_params_ref(&mut |p| f(&p.value));
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        self.visit_params(&mut |p| f(&mut p.value));
    }

    /// Output `[c, h, w]` for an input of `[c, h, w]`, appending the
    /// multiply-accumulate descriptors of any weighted operation.
    fn output_shape(&self, input: [usize; 3], costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]>;
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// `dst (+)= lhs · rhs` for `m×k` by `k×n` matrices with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn matmul(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [f32],
    (dst_rs, dst_cs): (isize, isize),
    accumulate: bool,
    lhs: &[f32],
    (lhs_rs, lhs_cs): (isize, isize),
    rhs: &[f32],
    (rhs_rs, rhs_cs): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(span(m, n, dst_rs, dst_cs) as usize <= dst.len());
    assert!(span(m, k, lhs_rs, lhs_cs) as usize <= lhs.len());
    assert!(span(k, n, rhs_rs, rhs_cs) as usize <= rhs.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `dst` does not alias the inputs (it is borrowed mutably).
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs,
            dst_rs,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeometry, h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = oh * ow;
    for ci in 0..g.in_c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = oh * ow;
    for ci in 0..g.in_c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding, weights laid out `[out_c, in_c, k, k]`.
pub struct Conv2d {
    geom: ConvGeometry,
    weight: Param,
    bias: Option<Param>,
    input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(geom: ConvGeometry, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = geom.patch();
        Conv2d {
            geom,
            weight: Param::new(kaiming(rng, fan_in, geom.out_c * fan_in)),
            bias: bias.then(|| Param::new(vec![0.0; geom.out_c])),
            input_grad: true,
            cache: None,
        }
    }

    /// Skips computing the input gradient; used for the first layer of a network.
    pub fn without_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    fn out_hw(&self, x: &Tensor) -> (usize, usize) {
        assert_eq!(x.c(), self.geom.in_c, "conv input channel mismatch");
        let oh = self.geom.out_dim(x.h()).expect("conv input smaller than kernel");
        let ow = self.geom.out_dim(x.w()).expect("conv input smaller than kernel");
        (oh, ow)
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let g = &self.geom;
        let (oh, ow) = self.out_hw(x);
        let (h, w) = (x.h(), x.w());
        let plane = oh * ow;
        let patch = g.patch();
        let mut out = Tensor::zeros([x.n(), g.out_c, oh, ow]);
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![0.0; patch * plane]
        };
        for n in 0..x.n() {
            let src: &[f32] = if g.pointwise() {
                x.sample(n)
            } else {
                im2col(x.sample(n), g, h, w, oh, ow, &mut cols);
                &cols
            };
            let dst = out.sample_mut(n);
            matmul(
                g.out_c,
                plane,
                patch,
                dst,
                (plane as isize, 1),
                false,
                &self.weight.value,
                (patch as isize, 1),
                src,
                (plane as isize, 1),
            );
            if let Some(b) = &self.bias {
                for (o, bv) in b.value.iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.run(x);
        self.cache = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("backward before forward");
        let g = self.geom;
        let (oh, ow) = self.out_hw(&x);
        let (h, w) = (x.h(), x.w());
        let plane = oh * ow;
        let patch = g.patch();
        assert_eq!(grad.shape(), [x.n(), g.out_c, oh, ow]);
        let mut dx = if self.input_grad {
            Tensor::zeros(x.shape())
        } else {
            Tensor::zeros([0, 0, 0, 0])
        };
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![0.0; patch * plane]
        };
        let mut dcols = if self.input_grad && !g.pointwise() {
            vec![0.0; patch * plane]
        } else {
            Vec::new()
        };
        for n in 0..x.n() {
            let gn = grad.sample(n);
            let src: &[f32] = if g.pointwise() {
                x.sample(n)
            } else {
                im2col(x.sample(n), &g, h, w, oh, ow, &mut cols);
                &cols
            };
            // dW += G_n · cols_nᵀ
            matmul(
                g.out_c,
                patch,
                plane,
                &mut self.weight.grad,
                (patch as isize, 1),
                true,
                gn,
                (plane as isize, 1),
                src,
                (1, plane as isize),
            );
            if let Some(b) = &mut self.bias {
                for (o, bg) in b.grad.iter_mut().enumerate() {
                    *bg += gn[o * plane..(o + 1) * plane].iter().sum::<f32>();
                }
            }
            if self.input_grad {
                // dcols = Wᵀ · G_n
                let target: &mut [f32] = if g.pointwise() {
                    dx.sample_mut(n)
                } else {
                    &mut dcols
                };
                matmul(
                    patch,
                    plane,
                    g.out_c,
                    target,
                    (plane as isize, 1),
                    false,
                    &self.weight.value,
                    (1, patch as isize),
                    gn,
                    (plane as isize, 1),
                );
                if !g.pointwise() {
                    col2im(&dcols, &g, h, w, oh, ow, dx.sample_mut(n));
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn output_shape(&self, [c, h, w]: [usize; 3], costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        let g = &self.geom;
        if c != g.in_c {
            return Err(Error::DimensionMismatch(format!(
                "conv expects {} channels, got {c}",
                g.in_c
            )));
        }
        let (Some(oh), Some(ow)) = (g.out_dim(h), g.out_dim(w)) else {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w} input is smaller than the {}x{} kernel",
                g.k, g.k
            )));
        };
        costs.push(LayerDesc::Conv {
            in_c: g.in_c,
            out_c: g.out_c,
            k: g.k,
            stride: g.stride,
            pad: g.pad,
            in_h: h,
            in_w: w,
        });
        Ok([g.out_c, oh, ow])
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    momentum: f32,
    eps: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let plane = x.h() * x.w();
        for n in 0..x.n() {
            let s = out.sample_mut(n);
            for c in 0..x.c() {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (nb, ch, plane) = (x.n(), x.c(), x.h() * x.w());
        let count = (nb * plane) as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0f32; ch];
        for c in 0..ch {
            let mut sum = 0.0f64;
            for n in 0..nb {
                sum += x.sample(n)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for n in 0..nb {
                sq += x.sample(n)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean as f32;
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased as f32;
            for n in 0..nb {
                xhat.sample_mut(n)[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
            }
        }
        let mut out = xhat.clone();
        for n in 0..nb {
            let s = out.sample_mut(n);
            for c in 0..ch {
                let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
                s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v * gm + bt);
            }
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("backward before forward");
        let (nb, ch, plane) = (grad.n(), grad.c(), grad.h() * grad.w());
        let count = (nb * plane) as f32;
        let mut dx = Tensor::zeros(grad.shape());
        for c in 0..ch {
            let mut dgamma = 0.0f32;
            let mut dbeta = 0.0f32;
            for n in 0..nb {
                let g = &grad.sample(n)[c * plane..(c + 1) * plane];
                let xh = &xhat.sample(n)[c * plane..(c + 1) * plane];
                for (gv, xv) in g.iter().zip(xh) {
                    dgamma += gv * xv;
                    dbeta += gv;
                }
            }
            self.gamma.grad[c] += dgamma;
            self.beta.grad[c] += dbeta;
            let k = self.gamma.value[c] * inv_std[c] / count;
            for n in 0..nb {
                let g = &grad.sample(n)[c * plane..(c + 1) * plane];
                let xh = &xhat.sample(n)[c * plane..(c + 1) * plane];
                let d = &mut dx.sample_mut(n)[c * plane..(c + 1) * plane];
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xh) {
                    *dv = k * (count * gv - dbeta - xv * dgamma);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[f32])) {
        f(&self.gamma.value);
        f(&self.beta.value);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        f(&mut self.gamma.value);
        f(&mut self.beta.value);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn output_shape(&self, input: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        if input[0] != self.gamma.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch norm expects {} channels, got {}",
                self.gamma.len(),
                input[0]
            )));
        }
        Ok(input)
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl Layer for Relu {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(out.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.take().expect("backward before forward");
        let mut dx = grad.clone();
        for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
            if *yv <= 0.0 {
                *d = 0.0;
            }
        }
        dx
    }

    fn output_shape(&self, input: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        Ok(input)
    }
}

#[derive(Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid::default()
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer for Sigmoid {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(out.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.take().expect("backward before forward");
        let mut dx = grad.clone();
        for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= yv * (1.0 - yv);
        }
        dx
    }

    fn output_shape(&self, input: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        Ok(input)
    }
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Max pooling with `-inf` padding (the ResNet stem pool is k=3, s=2, p=1).
pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_dim(&self, d: usize) -> Option<usize> {
        let padded = d + 2 * self.pad;
        (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
    }

    fn run(&self, x: &Tensor, argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let oh = self.out_dim(h).expect("pool input smaller than window");
        let ow = self.out_dim(w).expect("pool input smaller than window");
        let mut out = Tensor::zeros([x.n(), x.c(), oh, ow]);
        let mut idx = Vec::new();
        let track = argmax.is_some();
        for n in 0..x.n() {
            for c in 0..x.c() {
                let src = &x.sample(n)[c * h * w..(c + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0u32;
                        for ki in 0..self.k {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.k {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = iy as usize * w + ix as usize;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i as u32;
                                }
                            }
                        }
                        out.sample_mut(n)[(c * oh + oy) * ow + ox] = best;
                        if track {
                            idx.push(best_i);
                        }
                    }
                }
            }
        }
        if let Some(a) = argmax {
            *a = idx;
        }
        out
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut idx = Vec::new();
        let out = self.run(x, Some(&mut idx));
        self.cache = Some((x.shape(), idx));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (shape, idx) = self.cache.take().expect("backward before forward");
        let mut dx = Tensor::zeros(shape);
        let plane_in = shape[2] * shape[3];
        let plane_out = grad.h() * grad.w();
        for n in 0..grad.n() {
            for c in 0..grad.c() {
                let base = (n * grad.c() + c) * plane_out;
                let g = &grad.sample(n)[c * plane_out..(c + 1) * plane_out];
                let d = &mut dx.sample_mut(n)[c * plane_in..(c + 1) * plane_in];
                for (o, gv) in g.iter().enumerate() {
                    d[idx[base + o] as usize] += gv;
                }
            }
        }
        dx
    }

    fn output_shape(&self, [c, h, w]: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        match (self.out_dim(h), self.out_dim(w)) {
            (Some(oh), Some(ow)) => Ok([c, oh, ow]),
            _ => Err(Error::DimensionMismatch(format!("{h}x{w} input is smaller than the pool window"))),
        }
    }
}

/// Averages every channel over its spatial extent, producing `[n, c, 1, 1]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    cache: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        let plane = x.h() * x.w();
        let data = x
            .data()
            .chunks(plane)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        Tensor::from_vec([x.n(), x.c(), 1, 1], data)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.cache.take().expect("backward before forward");
        let plane = shape[2] * shape[3];
        let mut dx = Tensor::zeros(shape);
        for (chunk, g) in dx.data_mut().chunks_mut(plane).zip(grad.data()) {
            let v = g / plane as f32;
            chunk.iter_mut().for_each(|d| *d = v);
        }
        dx
    }

    fn output_shape(&self, [c, _, _]: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        Ok([c, 1, 1])
    }
}

/// Nearest-neighbour 2× upsampling.
#[derive(Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn new() -> Self {
        Upsample2x
    }
}

impl Layer for Upsample2x {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let mut out = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (h, w) = (grad.h() / 2, grad.w() / 2);
        let mut dx = Tensor::zeros([grad.n(), grad.c(), h, w]);
        for (src, dst) in grad.data().chunks(4 * h * w).zip(dx.data_mut().chunks_mut(h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                }
            }
        }
        dx
    }

    fn output_shape(&self, [c, h, w]: [usize; 3], _costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        Ok([c, 2 * h, 2 * w])
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// Affine map over the flattened per-sample features, producing `[n, out, 1, 1]`.
pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Linear {
            in_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_features]),
            cache: None,
        }
    }
}

impl Layer for Linear {
    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.in_features, "linear input size mismatch");
        let (n, i, o) = (x.n(), self.in_features, self.out_features);
        let mut out = Tensor::zeros([n, o, 1, 1]);
        for s in 0..n {
            out.sample_mut(s).copy_from_slice(&self.bias.value);
        }
        matmul(
            n,
            o,
            i,
            out.data_mut(),
            (o as isize, 1),
            true,
            x.data(),
            (i as isize, 1),
            &self.weight.value,
            (1, i as isize),
        );
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("backward before forward");
        let (n, i, o) = (x.n(), self.in_features, self.out_features);
        // dW += Gᵀ · X
        matmul(
            o,
            i,
            n,
            &mut self.weight.grad,
            (i as isize, 1),
            true,
            grad.data(),
            (1, o as isize),
            x.data(),
            (i as isize, 1),
        );
        for s in 0..n {
            for (b, g) in self.bias.grad.iter_mut().zip(grad.sample(s)) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(
            n,
            i,
            o,
            dx.data_mut(),
            (i as isize, 1),
            false,
            grad.data(),
            (o as isize, 1),
            &self.weight.value,
            (i as isize, 1),
        );
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn output_shape(&self, [c, h, w]: [usize; 3], costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        if c * h * w != self.in_features {
            return Err(Error::DimensionMismatch(format!(
                "linear expects {} features, got {}",
                self.in_features,
                c * h * w
            )));
        }
        costs.push(LayerDesc::Linear {
            in_dim: self.in_features,
            out_dim: self.out_features,
            tokens: 1,
        });
        Ok([self.out_features, 1, 1])
    }
}
