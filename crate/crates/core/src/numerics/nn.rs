//! Layers shared by the attention blocks and the embedders.
//!
//! Layers are generic over their parameter storage: `Tensor` for a
//! thread-safe model, `Var` for one forward graph.

use std::hash::{Hash, Hasher};

use rand::Rng;

use super::autodiff::Var;
use super::tensor::Tensor;
use crate::error::Result;

/// Anything that exposes a tensor value.
pub trait TensorLike {
    fn tensor(&self) -> &Tensor;
}

impl TensorLike for Tensor {
    fn tensor(&self) -> &Tensor {
        self
    }
}

impl TensorLike for Var {
    fn tensor(&self) -> &Tensor {
        self.value()
    }
}

/// A named collection of parameters visited in a fixed order.
pub trait ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Hash of every parameter's shape and bit pattern, in visit order.
pub fn fingerprint<T: TensorLike>(tree: &impl ParamTree<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    tree.visit("", &mut |_, t| {
        let t = t.tensor();
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    });
    h.finish()
}

/// Parameters in visit order.
pub fn flatten<'a, T>(tree: &'a impl ParamTree<T>) -> Vec<(String, &'a T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, t| out.push((name, t)));
    out
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl Linear<Tensor> {
    /// Uniform init in `±1/sqrt(in)`.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            w: Tensor::raw(vec![d_in, d_out], w),
            b: Tensor::raw(vec![d_out], b),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

impl<T> ParamTree<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
}

impl Linear<Var> {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

impl LayerNorm<Tensor> {
    pub fn init(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl<T> LayerNorm<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerNorm<U> {
        LayerNorm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> ParamTree<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
}

impl LayerNorm<Var> {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        x.layer_norm(&self.gain, &self.bias)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp<T = Tensor> {
    pub layers: Vec<Linear<T>>,
}

impl Mlp<Tensor> {
    /// `widths = [in, hidden.., out]`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl<T> ParamTree<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

impl Mlp<Var> {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
