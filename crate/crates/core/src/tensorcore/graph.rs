//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. Calling
//! [`Graph::backward`] walks that record in reverse and sums each node's
//! gradient contributions across fan-out.

use crate::error::{Error, Result};

use super::kernels::{self, AttentionShape};
use super::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// The operation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that keeps values but records no backward closures.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf (a parameter or a point under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.record;
        self.push(value, Vec::new(), None, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        let rg = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.push(value, parents, bw, rg)
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape("backward root", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs)?;
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => grads[p.0] = Some(pg),
                }
            }
            // keep the gradient of leaves only
            if node.backward.is_some() {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ---- operations -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.record_op(out, vec![a, b], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.record_op(out, vec![a, b], move |g, _| {
            let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
            let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
            Ok(vec![Some(Tensor::new(g.shape(), ga)?), Some(Tensor::new(g.shape(), gb)?)])
        }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let s: f64 = va.data().iter().map(|x| x.as_f64()).sum();
        self.record_op(Tensor::scalar(T::from_f64_lossy(s)), vec![a], move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let out = self.value(a).map(|x| x * f);
        self.record_op(out, vec![a], move |g, _| Ok(vec![Some(g.map(|x| x * f))]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let orig = va.shape().to_vec();
        let out = va.reshape(shape)?;
        Ok(self.record_op(out, vec![a], move |g, _| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = kernels::relu(&x);
        self.record_op(out, vec![a], move |g, _| Ok(vec![Some(kernels::relu_backward(&x, g)?)]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vk, vb) = (
            self.value(x).clone(),
            self.value(kernel).clone(),
            self.value(bias).clone(),
        );
        let out = kernels::conv2d(&vx, &vk, &vb, stride, pad)?;
        Ok(self.record_op(out, vec![x, kernel, bias], move |g, needs| {
            let gr = kernels::conv2d_backward(&vx, &vk, &vb, stride, pad, g, needs[0])?;
            Ok(vec![gr.input, Some(gr.kernel), Some(gr.bias)])
        }))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out, arg) = kernels::maxpool2d(self.value(x))?;
        Ok(self.record_op(out, vec![x], move |g, _| {
            Ok(vec![Some(kernels::maxpool2d_backward(&shape, &arg, g)?)])
        }))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (
            self.value(x).clone(),
            self.value(weight).clone(),
            self.value(bias).clone(),
        );
        let out = kernels::linear(&vx, &vw, &vb)?;
        Ok(self.record_op(out, vec![x, weight, bias], move |g, _| {
            let gr = kernels::linear_backward(&vx, &vw, &vb, g)?;
            Ok(vec![Some(gr.input), Some(gr.weight), Some(gr.bias)])
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = kernels::matmul(&va, &vb)?;
        Ok(self.record_op(out, vec![a, b], move |g, _| {
            let (ga, gb) = kernels::matmul_backward(&va, &vb, g)?;
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let vg = self.value(gain).clone();
        let (out, cache) = kernels::layer_norm(self.value(x), &vg, self.value(shift), kernels::LAYER_NORM_EPS)?;
        Ok(self.record_op(out, vec![x, gain, shift], move |g, _| {
            let (gx, gg, gs) = kernels::layer_norm_backward(&cache, &vg, g)?;
            Ok(vec![Some(gx), Some(gg), Some(gs)])
        }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax(self.value(x));
        let y = out.clone();
        self.record_op(out, vec![x], move |g, _| Ok(vec![Some(kernels::softmax_backward(&y, g))]))
    }

    /// Batched multi-head scaled dot-product attention (see
    /// [`kernels::attention`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_valid: &[bool], shape: AttentionShape) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let (out, probs) = kernels::attention(&vq, &vk, &vv, key_valid, shape)?;
        Ok(self.record_op(out, vec![q, k, v], move |g, _| {
            let (gq, gk, gv) = kernels::attention_backward(&vq, &vk, &vv, &probs, shape, g)?;
            Ok(vec![Some(gq), Some(gk), Some(gv)])
        }))
    }

    /// Mean cross-entropy of `logits` (`N x V`) against `targets`; rows whose
    /// target equals `ignore` do not count. Also returns `(counted, correct)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<(Var, usize, usize)> {
        let ce = kernels::cross_entropy(self.value(logits), targets, ignore)?;
        let (counted, correct) = (ce.counted, ce.correct);
        let out = Tensor::scalar(T::from_f64_lossy(ce.loss));
        let targets = targets.to_vec();
        let var = self.record_op(out, vec![logits], move |g, _| {
            Ok(vec![Some(kernels::cross_entropy_backward(&ce, &targets, ignore, g.data()[0].as_f64()))])
        });
        Ok((var, counted, correct))
    }

    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let shape = vt.shape().to_vec();
        let out = kernels::gather_rows(vt, index)?;
        let index = index.to_vec();
        Ok(self.record_op(out, vec![table], move |g, _| {
            Ok(vec![Some(kernels::scatter_rows(&shape, &index, g)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let c = g.constant(Tensor::full(&[2], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        assert!(g.backward(x).is_err());
    }
}
