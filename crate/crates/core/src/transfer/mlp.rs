//! Fully connected networks with tanh hidden layers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::invalid(format!("unknown activation `{s}`"))),
        }
    }
}

/// `y = act(x W^T + b)`, with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer { w: Array2::zeros((n_out, n_in)), b: Array1::zeros(n_out) }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: Activation,
}

/// Per-layer outputs kept for the backward pass. `acts[0]` is the input.
pub struct Trace {
    acts: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace has at least the input")
    }
}

impl Mlp {
    /// Zero weights everywhere.
    pub fn zeros(sizes: &[usize], output: Activation) -> Self {
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Mlp { layers, output }
    }

    /// Glorot-uniform weights, zero biases. With `zero_last` the final layer starts at zero.
    pub fn random(sizes: &[usize], output: Activation, zero_last: bool, rng: &mut impl Rng) -> Self {
        let mut net = Mlp::zeros(sizes, output);
        let last = net.layers.len().saturating_sub(1);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            if zero_last && l == last {
                continue;
            }
            let a = (6.0 / (layer.n_in() + layer.n_out()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            layer.w.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        net
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.first().map(|l| vec![l.n_in()]).unwrap_or_default();
        s.extend(self.layers.iter().map(Layer::n_out));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, Layer::n_in)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, Layer::n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid(format!("{name}: network has no layers")));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::invalid(format!(
                    "{name}: layer {l} outputs {} but layer {} takes {}",
                    pair[0].n_out(),
                    l + 1,
                    pair[1].n_in()
                )));
            }
        }
        for layer in &self.layers {
            if layer.b.len() != layer.n_out() {
                return Err(Error::invalid(format!("{name}: bias length does not match layer width")));
            }
            if !layer.w.iter().chain(layer.b.iter()).all(|x| x.is_finite()) {
                return Err(Error::numerical(format!("{name}: non-finite weight")));
            }
        }
        Ok(())
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    /// Row-wise forward pass, keeping every layer output.
    pub fn trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        if x.ncols() != self.n_in() {
            return Err(Error::dim("network input width", self.n_in(), x.ncols()));
        }
        let mut acts = vec![x.to_owned()];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t());
            z += &layer.b;
            if self.activation(l) == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Ok(Trace { acts })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(x)?.acts.pop().expect("non-empty trace"))
    }

    /// Accumulates parameter gradients into `grad` given `dy = dL/d output`;
    /// returns `dL/d input`.
    pub fn backward(&self, trace: &Trace, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy;
        for l in (0..self.layers.len()).rev() {
            if self.activation(l) == Activation::Tanh {
                d.zip_mut_with(&trace.acts[l + 1], |g, y| *g *= 1.0 - y * y);
            }
            let gl = &mut grad.layers[l];
            gl.w += &d.t().dot(&trace.acts[l]);
            gl.b += &d.sum_axis(Axis(0));
            d = d.dot(&self.layers[l].w);
        }
        d
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = x[k];
                k += 1;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn quantized(&self) -> Mlp {
        let mut q = self.clone();
        for l in &mut q.layers {
            l.w.mapv_inplace(|w| w as f32 as f64);
            l.b.mapv_inplace(|w| w as f32 as f64);
        }
        q
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|&w| w == 0.0))
    }
}
