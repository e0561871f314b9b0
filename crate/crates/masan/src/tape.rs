//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Forward calls record one node per operation; [`Tape::backward`] replays
//! the recorded nodes in exact reverse execution order, so gradient
//! accumulation is deterministic.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, EwOp, ReduceOp};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Ew {
        op: EwOp,
        a: usize,
        b: Option<usize>,
    },
    Scale {
        a: usize,
        c: T,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose2d {
        a: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        bias: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Upsample2x {
        x: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: T,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Reduce {
        op: ReduceOp,
        x: usize,
        axes: Vec<usize>,
        argmax: Option<Vec<usize>>,
        count: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        x: usize,
    },
    Expand {
        x: usize,
    },
    IndexAxis0 {
        x: usize,
        i: usize,
    },
    Gather {
        x: usize,
        map: Arc<Vec<usize>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Append-only record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Record an input value. It participates in differentiation iff its
    /// `grad_tracked` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.grad_tracked;
        self.push(Op::Leaf, t, tracked)
    }

    /// Untracked input, regardless of the tensor's flag.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn ew(&mut self, op: EwOp, a: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::elementwise_forward(
            op,
            &self.nodes[a.0].value,
            b.map(|v| &self.nodes[v.0].value),
        )?;
        let mut ids = vec![a.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let needs = self.needs(&ids);
        Ok(self.push(
            Op::Ew {
                op,
                a: a.0,
                b: b.map(|v| v.0),
            },
            value,
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwOp::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.ew(EwOp::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.ew(EwOp::Sigmoid, a, None)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.ew(EwOp::Abs, a, None)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = ops::scale_forward(&self.nodes[a.0].value, c);
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::Scale { a: a.0, c }, value, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, value, needs))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::InvalidShape(format!(
                "transpose2d needs rank 2, got {:?}",
                self.shape(a)
            )));
        }
        let value = ops::transpose2d_forward(&self.nodes[a.0].value);
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::Transpose2d { a: a.0 }, value, needs))
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv3d_grouped(x, w, bias, stride, padding, 1)
    }

    pub fn conv3d_grouped(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let value = ops::conv3d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[bias.0].value,
            stride,
            padding,
            groups,
        )?;
        let needs = self.needs(&[x.0, w.0, bias.0]);
        Ok(self.push(
            Op::Conv3d {
                x: x.0,
                w: w.0,
                bias: bias.0,
                stride,
                padding,
                groups,
            },
            value,
            needs,
        ))
    }

    pub fn upsample_trilinear2x(&mut self, x: Var) -> Result<Var> {
        let value = ops::upsample_trilinear2x_forward(&self.nodes[x.0].value)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::Upsample2x { x: x.0 }, value, needs))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let value = ops::group_norm_forward(
            &self.nodes[x.0].value,
            groups,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
            value,
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax_forward(&self.nodes[x.0].value, axis)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::Softmax { x: x.0, axis }, value, needs))
    }

    pub fn reduce(
        &mut self,
        op: ReduceOp,
        x: Var,
        axes: &[usize],
        keep_dims: bool,
    ) -> Result<Var> {
        let reduced = ops::reduce_forward(op, &self.nodes[x.0].value, axes, keep_dims)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Op::Reduce {
                op,
                x: x.0,
                axes: axes.to_vec(),
                argmax: reduced.argmax,
                count: reduced.count,
            },
            reduced.out,
            needs,
        ))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Sum, x, &axes, false)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::concat_forward(&tensors, axis)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Op::Concat { xs: ids, axis }, value, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::Reshape { x: x.0 }, value, needs))
    }

    pub fn expand(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let value = ops::expand_forward(&self.nodes[x.0].value, target)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::Expand { x: x.0 }, value, needs))
    }

    pub fn index_axis0(&mut self, x: Var, i: usize) -> Result<Var> {
        let value = ops::index_axis0_forward(&self.nodes[x.0].value, i)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::IndexAxis0 { x: x.0, i }, value, needs))
    }

    /// Bijective element permutation `out[k] = x[map[k]]`.
    pub fn gather(&mut self, x: Var, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        if map.len() != out_shape.iter().product::<usize>()
            || map.len() != self.nodes[x.0].value.numel()
        {
            return Err(Error::InvalidShape(format!(
                "gather map of {} entries cannot produce {:?} from {:?}",
                map.len(),
                out_shape,
                self.shape(x)
            )));
        }
        let value = ops::gather_forward(&self.nodes[x.0].value, &map, &out_shape);
        let needs = self.needs(&[x.0]);
        Ok(self.push(Op::Gather { x: x.0, map }, value, needs))
    }

    /// Mean cross-entropy from logits; probabilities are clamped at 1e-12
    /// before the log. Gradient uses the analytic (probs - onehot)/N form.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::InvalidShape(format!(
                "cross_entropy expects logits [N, C] with N == labels, got {:?} and {} labels",
                shape,
                labels.len()
            )));
        }
        let classes = shape[1];
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        let probs = ops::softmax_forward(&self.nodes[logits.0].value, 1)?;
        let floor = lit::<T>(1e-12);
        let n = lit::<T>(labels.len() as f64);
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let p = probs.data()[row * classes + label].max(floor);
            total = total - p.ln();
        }
        let value = Tensor::scalar(total / n);
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            value,
            needs,
        ))
    }

    /// Reverse accumulation from a scalar loss. Returns one gradient slot per
    /// node; untouched tracked leaves simply have no entry (callers treat
    /// that as a zero gradient).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(loss_shape.to_vec(), vec![T::one()]).unwrap());

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dy) = grads[id].clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Ew { op, a, b } => {
                    let (da, db) = ops::elementwise_backward(
                        *op,
                        &self.nodes[*a].value,
                        b.map(|i| &self.nodes[i].value),
                        &self.nodes[id].value,
                        &dy,
                    );
                    self.accumulate(&mut grads, *a, da);
                    if let (Some(b), Some(db)) = (b, db) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale { a, c } => {
                    self.accumulate(&mut grads, *a, ops::scale_forward(&dy, *c));
                }
                Op::Matmul { a, b } => {
                    let (da, db) =
                        ops::matmul_backward(&self.nodes[*a].value, &self.nodes[*b].value, &dy);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Transpose2d { a } => {
                    self.accumulate(&mut grads, *a, ops::transpose2d_forward(&dy));
                }
                Op::Conv3d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                    groups,
                } => {
                    let (dx, dw, db) = ops::conv3d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &dy,
                        *stride,
                        *padding,
                        *groups,
                    );
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::Upsample2x { x } => {
                    let dx = ops::upsample_trilinear2x_backward(&self.nodes[*x].value, &dy);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = ops::group_norm_backward(
                        &self.nodes[*x].value,
                        *groups,
                        &self.nodes[*gamma].value,
                        *eps,
                        &dy,
                    );
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::Softmax { x, axis } => {
                    let dx = ops::softmax_backward(&self.nodes[id].value, *axis, &dy);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Reduce {
                    op,
                    x,
                    axes,
                    argmax,
                    count,
                } => {
                    let dx = ops::reduce_backward(
                        *op,
                        self.nodes[*x].value.shape(),
                        axes,
                        false,
                        &dy,
                        argmax.as_deref(),
                        *count,
                    );
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> = xs
                        .iter()
                        .map(|&i| self.nodes[i].value.shape().to_vec())
                        .collect();
                    let parts = ops::concat_backward(&shapes, *axis, &dy);
                    for (&i, part) in xs.iter().zip(parts) {
                        self.accumulate(&mut grads, i, part);
                    }
                }
                Op::Reshape { x } => {
                    let dx = dy
                        .reshaped(self.nodes[*x].value.shape().to_vec())
                        .expect("reshape backward");
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Expand { x } => {
                    let dx = ops::expand_backward(self.nodes[*x].value.shape(), &dy);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::IndexAxis0 { x, i } => {
                    let dx = ops::index_axis0_backward(self.nodes[*x].value.shape(), *i, &dy);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Gather { x, map } => {
                    let dx = ops::gather_backward(self.nodes[*x].value.shape(), map, &dy);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = probs.shape()[1];
                    let n = lit::<T>(labels.len() as f64);
                    let scale = dy.item() / n;
                    let mut dl = probs.data().to_vec();
                    for (row, &label) in labels.iter().enumerate() {
                        dl[row * classes + label] = dl[row * classes + label] - T::one();
                    }
                    for v in dl.iter_mut() {
                        *v = *v * scale;
                    }
                    let dlogits = Tensor::from_vec(probs.shape().to_vec(), dl).unwrap();
                    self.accumulate(&mut grads, *logits, dlogits);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(
            Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])
                .unwrap()
                .tracked(),
        );
        let loss = tape.sum_all(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(
            Tensor::from_vec(vec![2], vec![1.0, -2.0])
                .unwrap()
                .tracked(),
        );
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn untouched_parameter_has_no_grad_entry() {
        let mut tape = Tape::<f32>::new();
        let used = tape.leaf(Tensor::scalar(2.0).tracked());
        let unused = tape.leaf(Tensor::scalar(5.0).tracked());
        let loss = tape.mul(used, used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().tracked());
        assert!(matches!(
            tape.backward(w).unwrap_err(),
            Error::NonScalarLoss(_)
        ));
    }

    #[test]
    fn grad_accumulates_across_fanout() {
        // loss = sum(w) + sum(w) -> grad = 2
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().tracked());
        let s1 = tape.sum_all(w).unwrap();
        let s2 = tape.sum_all(w).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2]).unwrap().tracked());
        let loss = tape.cross_entropy_logits(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - 0.6931f32).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2]).unwrap());
        assert!(matches!(
            tape.cross_entropy_logits(logits, &[2]).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));
    }
}
