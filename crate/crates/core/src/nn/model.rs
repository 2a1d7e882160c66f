use super::layers::{Layer, Param};
use super::tensor::Tensor;
use crate::accounting::LayerDesc;
use crate::error::{Error, Result};

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.len());
        n
    }

    /// Copies every parameter and buffer, in visiting order.
    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.visit_state(&mut |s| out.push(s.to_vec()));
        out
    }

    pub fn restore(&mut self, state: &[Vec<f32>]) -> Result<()> {
        let mut it = state.iter();
        let mut err = None;
        self.visit_state_mut(&mut |dst| match it.next() {
            Some(src) if src.len() == dst.len() => dst.copy_from_slice(src),
            Some(src) => {
                err.get_or_insert_with(|| {
                    Error::Weights(format!("tensor has {} values, expected {}", src.len(), dst.len()))
                });
            }
            None => {
                err.get_or_insert_with(|| Error::Weights("too few tensors".into()));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::Weights("too many tensors".into()));
        }
        Ok(())
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur);
        }
        cur
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut cur = grad.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit_params_ref(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[f32])) {
        for l in &self.layers {
            l.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        for l in &mut self.layers {
            l.visit_state_mut(f);
        }
    }

    fn output_shape(&self, input: [usize; 3], costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s, costs))
    }
}

/// `relu(main(x) + shortcut(x))`, with an identity shortcut when none is given.
pub struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
    cache: Option<Tensor>,
}

impl Residual {
    pub fn new(main: Sequential, shortcut: Option<Sequential>) -> Self {
        Residual {
            main,
            shortcut,
            cache: None,
        }
    }

    fn combine(mut a: Tensor, b: &Tensor) -> Tensor {
        a.add_assign(b);
        a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        a
    }
}

impl Layer for Residual {
    fn infer(&self, x: &Tensor) -> Tensor {
        let main = self.main.infer(x);
        match &self.shortcut {
            Some(s) => Self::combine(main, &s.infer(x)),
            None => Self::combine(main, x),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let main = self.main.forward(x);
        let out = match &mut self.shortcut {
            Some(s) => Self::combine(main, &s.forward(x)),
            None => Self::combine(main, x),
        };
        self.cache = Some(out.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.take().expect("backward before forward");
        let mut g = grad.clone();
        for (d, yv) in g.data_mut().iter_mut().zip(y.data()) {
            if *yv <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dx = self.main.backward(&g);
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.main.visit_params(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.main.visit_params_ref(f);
        if let Some(s) = &self.shortcut {
            s.visit_params_ref(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&[f32])) {
        self.main.visit_state(f);
        if let Some(s) = &self.shortcut {
            s.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        self.main.visit_state_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_state_mut(f);
        }
    }

    fn output_shape(&self, input: [usize; 3], costs: &mut Vec<LayerDesc>) -> Result<[usize; 3]> {
        let out = self.main.output_shape(input, costs)?;
        let side = match &self.shortcut {
            Some(s) => s.output_shape(input, costs)?,
            None => input,
        };
        if out != side {
            return Err(Error::DimensionMismatch(format!(
                "residual branches disagree: {out:?} vs {side:?}"
            )));
        }
        Ok(out)
    }
}
