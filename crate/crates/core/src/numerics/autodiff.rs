//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node holding a tensor value and,
//! when any input needs a gradient, the closure that maps the output
//! gradient onto its inputs. Nodes that do not need gradients keep no
//! parents, so inference through `Var` frees intermediates as soon as they
//! go out of scope.

use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Maps the output gradient to one optional gradient per input.
///
/// Arguments: output gradient, input values, output value, and which inputs
/// need a gradient.
type BackwardFn =
    dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<Box<BackwardFn>>,
}

/// A differentiable tensor handle.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl Var {
    /// A trainable leaf.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    fn id(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Records a custom operation. `backward` is only kept (together with
    /// the inputs) when at least one input requires a gradient.
    pub fn custom(
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>
            + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        if !requires_grad {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            value,
            requires_grad,
            parents: inputs.iter().map(|v| (*v).clone()).collect(),
            backward: Some(Box::new(backward)),
        }))
    }

    // ---- primitive operations ------------------------------------------

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let out = self.value().matmul(other.value())?;
        Ok(Var::custom(out, &[self, other], |g, x, _, need| {
            Ok(vec![
                need[0].then(|| g.matmul_nt(x[1])).transpose()?,
                need[1].then(|| x[0].matmul_tn(g)).transpose()?,
            ])
        }))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        let out = self.value().matmul_nt(other.value())?;
        Ok(Var::custom(out, &[self, other], |g, x, _, need| {
            Ok(vec![
                need[0].then(|| g.matmul(x[1])).transpose()?,
                need[1].then(|| g.matmul_tn(x[0])).transpose()?,
            ])
        }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let out = self.value().add(other.value())?;
        Ok(Var::custom(out, &[self, other], |g, _, _, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let out = self.value().sub(other.value())?;
        Ok(Var::custom(out, &[self, other], |g, _, _, need| {
            Ok(vec![
                Some(g.clone()),
                need[1].then(|| g.scale(-1.0)).transpose()?,
            ])
        }))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let out = self.value().mul(other.value())?;
        Ok(Var::custom(out, &[self, other], |g, x, _, need| {
            Ok(vec![
                need[0].then(|| g.mul(x[1])).transpose()?,
                need[1].then(|| g.mul(x[0])).transpose()?,
            ])
        }))
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        let out = self.value().scale(s)?;
        Ok(Var::custom(out, &[self], move |g, _, _, _| {
            Ok(vec![Some(g.scale(s)?)])
        }))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let out = self.value().add_row(bias.value())?;
        Ok(Var::custom(out, &[self, bias], |g, _, _, need| {
            Ok(vec![
                Some(g.clone()),
                need[1].then(|| g.col_sums()).transpose()?,
            ])
        }))
    }

    pub fn relu(&self) -> Result<Var> {
        let out = self.value().relu()?;
        Ok(Var::custom(out, &[self], |g, x, _, _| {
            Ok(vec![Some(g.zip(x[0], "relu'", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)])
        }))
    }

    pub fn softplus(&self) -> Result<Var> {
        let out = self.value().softplus()?;
        Ok(Var::custom(out, &[self], |g, x, _, _| {
            Ok(vec![Some(g.mul(&x[0].sigmoid()?)?)])
        }))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Result<Var> {
        let out = self.value().softmax_rows()?;
        Ok(Var::custom(out, &[self], |g, _, y, _| {
            // dx = y ⊙ (g − rowsum(g ⊙ y))
            let n = y.cols();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - s)));
            }
            Ok(vec![Some(Tensor::raw(y.shape().to_vec(), dx).checked("softmax'")?)])
        }))
    }

    /// Row-wise layer norm with gain and bias vectors.
    pub fn layer_norm(&self, gain: &Var, bias: &Var) -> Result<Var> {
        let (out, xhat, inv_std) = self.value().layer_norm_parts(gain.value(), bias.value())?;
        Ok(Var::custom(out, &[self, gain, bias], move |g, x, _, need| {
            let n = xhat.cols();
            let gain = x[1].data();
            let gd = g.data();
            let xh = xhat.data();
            let dx = if need[0] {
                let mut dx = Vec::with_capacity(g.len());
                for (i, &inv) in inv_std.iter().enumerate() {
                    let gr = &gd[i * n..(i + 1) * n];
                    let hr = &xh[i * n..(i + 1) * n];
                    // dxhat = g ⊙ gain; dx = inv/n (n·dxhat − Σdxhat − xhat Σ(dxhat ⊙ xhat))
                    let dh: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    dx.extend(
                        dh.iter()
                            .zip(hr)
                            .map(|(d, h)| inv / n as f64 * (n as f64 * d - s1 - h * s2)),
                    );
                }
                Some(Tensor::raw(g.shape().to_vec(), dx).checked("layer_norm'")?)
            } else {
                None
            };
            let dgain = need[1].then(|| g.mul(&xhat)?.col_sums()).transpose()?;
            let dbias = need[2].then(|| g.col_sums()).transpose()?;
            Ok(vec![dx, dgain, dbias])
        }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let out = self.value().slice_cols(start, end)?;
        Ok(Var::custom(out, &[self], move |g, x, _, _| {
            let (m, n) = (x[0].rows(), x[0].cols());
            let w = end - start;
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            Ok(vec![Some(Tensor::raw(vec![m, n], dx))])
        }))
    }

    pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_cols(&values)?;
        let widths: Vec<usize> = values.iter().map(|t| t.cols()).collect();
        Ok(Var::custom(out, parts, move |g, _, _, need| {
            let mut grads = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (&w, &nd) in widths.iter().zip(need) {
                grads.push(nd.then(|| g.slice_cols(start, start + w)).transpose()?);
                start += w;
            }
            Ok(grads)
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let out = self.value().reshape(shape)?;
        Ok(Var::custom(out, &[self], |g, x, _, _| {
            Ok(vec![Some(g.reshape(x[0].shape())?)])
        }))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&self) -> Result<Var> {
        let out = Tensor::scalar(self.value().sum()).checked("sum")?;
        Ok(Var::custom(out, &[self], |g, x, _, _| {
            Ok(vec![Some(Tensor::full(x[0].shape(), g.item()?))])
        }))
    }
}

/// Gradients of a scalar loss with respect to every leaf that reached it.
pub struct Gradients {
    leaves: HashMap<*const Node, (Var, Tensor)>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` if the loss does not depend on it.
    pub fn get(&self, leaf: &Var) -> Option<&Tensor> {
        self.leaves.get(&leaf.id()).map(|(_, g)| g)
    }

    /// Gradient for `leaf`, or zeros of the leaf's shape.
    pub fn get_or_zeros(&self, leaf: &Var) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Reverse-topological order of the nodes reachable from `root` that need
/// gradients. Each node appears once.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen: HashMap<*const Node, ()> = HashMap::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if seen.insert(v.id(), ()).is_some() {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order.reverse();
    order
}

/// Backpropagates from a one-element `loss`.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.value().len() != 1 {
        return shape_err(
            "backward",
            format!("loss must be scalar, shape {:?}", loss.shape()),
        );
    }
    let mut leaves = HashMap::new();
    if !loss.requires_grad() {
        return Ok(Gradients { leaves });
    }
    let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
    for node in topo_order(loss) {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let Some(back) = &node.0.backward else {
            leaves.insert(node.id(), (node.clone(), g));
            continue;
        };
        let inputs: Vec<&Tensor> = node.0.parents.iter().map(Var::value).collect();
        let need: Vec<bool> = node.0.parents.iter().map(Var::requires_grad).collect();
        let pgrads = back(&g, &inputs, &node.0.value, &need)?;
        for ((parent, pg), &nd) in node.0.parents.iter().zip(pgrads).zip(&need) {
            let Some(pg) = pg else { continue };
            if !nd {
                continue;
            }
            if pg.shape() != parent.shape() {
                return Err(Error::Shape {
                    op: "backward",
                    detail: format!("gradient {:?} for input {:?}", pg.shape(), parent.shape()),
                });
            }
            match grads.remove(&parent.id()) {
                Some(acc) => grads.insert(parent.id(), acc.add(&pg)?),
                None => grads.insert(parent.id(), pg),
            };
        }
    }
    Ok(Gradients { leaves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                plus[i] += h;
                let mut minus = x.to_vec();
                minus[i] -= h;
                let fp = f(&Tensor::new(x.shape(), plus).unwrap());
                let fm = f(&Tensor::new(x.shape(), minus).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-8 {
            (a - b).abs()
        } else {
            (a - b).abs() / scale
        }
    }

    fn check_unary(x: Tensor, f: impl Fn(&Var) -> Var) {
        let xv = Var::leaf(x.clone());
        let loss = f(&xv);
        let g = backward(&loss).unwrap().get_or_zeros(&xv);
        let num = numeric_grad(&x, &|t| f(&Var::constant(t.clone())).value().item().unwrap());
        for (a, n) in g.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-4, "autodiff {a} vs numeric {n}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Var::leaf(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
        let g = backward(&x.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec(), vec![1.0; 6]);
    }

    #[test]
    fn square_of_three() {
        let x = Var::leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        assert_eq!(backward(&y).unwrap().get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let x = Var::leaf(Tensor::zeros(&[2]));
        assert!(backward(&x).is_err());
    }

    #[test]
    fn shared_node_accumulates_once_per_use() {
        // y = (x + x) * x → dy/dx = 4x
        let x = Var::leaf(Tensor::scalar(1.5));
        let y = x.add(&x).unwrap().mul(&x).unwrap();
        assert_eq!(backward(&y).unwrap().get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&[3, 4], &mut rng);
        let wc = w.clone();
        check_unary(random(&[2, 3], &mut rng), move |x| {
            x.matmul(&Var::constant(wc.clone())).unwrap().relu().unwrap().sum().unwrap()
        });
        let k = random(&[5, 3], &mut rng);
        let kc = k.clone();
        check_unary(random(&[2, 3], &mut rng), move |x| {
            let s = x.matmul_nt(&Var::constant(kc.clone())).unwrap().softmax_rows().unwrap();
            s.mul(&s).unwrap().sum().unwrap()
        });
        let (g, b) = (random(&[4], &mut rng), random(&[4], &mut rng));
        let coef = random(&[3, 4], &mut rng);
        check_unary(random(&[3, 4], &mut rng), move |x| {
            x.layer_norm(&Var::constant(g.clone()), &Var::constant(b.clone()))
                .unwrap()
                .mul(&Var::constant(coef.clone()))
                .unwrap()
                .sum()
                .unwrap()
        });
        check_unary(random(&[2, 4], &mut rng), |x| {
            let l = x.slice_cols(0, 1).unwrap();
            let r = x.slice_cols(1, 4).unwrap().softplus().unwrap();
            let c = Var::concat_cols(&[&r, &l]).unwrap();
            c.mul(&c).unwrap().sum().unwrap()
        });
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5, 3], &mut rng);
        let params: Vec<Tensor> = vec![
            random(&[3, 8], &mut rng),
            random(&[8], &mut rng),
            random(&[8, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        let forward = |p: &[Var]| -> Var {
            let h = Var::constant(x.clone())
                .matmul(&p[0])
                .unwrap()
                .add_row(&p[1])
                .unwrap()
                .relu()
                .unwrap();
            let o = h.matmul(&p[2]).unwrap().add_row(&p[3]).unwrap();
            o.mul(&o).unwrap().sum().unwrap()
        };
        let leaves: Vec<Var> = params.iter().cloned().map(Var::leaf).collect();
        let grads = backward(&forward(&leaves)).unwrap();
        let mut worst: f64 = 0.0;
        for (k, p) in params.iter().enumerate() {
            let num = numeric_grad(p, &|t| {
                let mut vars: Vec<Var> = params.iter().cloned().map(Var::constant).collect();
                vars[k] = Var::constant(t.clone());
                forward(&vars).value().item().unwrap()
            });
            for (a, n) in grads.get(&leaves[k]).unwrap().data().iter().zip(&num) {
                worst = worst.max(rel_err(*a, *n));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn constants_keep_no_graph() {
        let a = Var::constant(Tensor::zeros(&[2, 2]));
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(backward(&b.sum().unwrap()).unwrap().is_empty());
    }
}
