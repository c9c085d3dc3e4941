//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value. Nodes are stored in
//! creation order, which is a topological order, so `backward` walks the tape
//! once from the end.

pub(crate) mod kernels;

use kernels::ConvGeometry;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    FullyConnected,
    Relu,
    SoftmaxCrossEntropy,
    Add,
    Mul,
    Mse,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Relu { .. } => OpKind::Relu,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Mse { .. } => OpKind::Mse,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes that do not
/// depend on any differentiable leaf have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Whether `b` can be combined elementwise with `a`: same shape, or `[1, ...]`
/// repeated over `a`'s leading dimension.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (a.len() == b.len() && b[0] == 1 && a[1..] == b[1..])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (weight or optimized input).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// 2-D convolution with zero padding `pad` on each border. `x`:
    /// `[n, c, h, w]`, `weight`: `[oc, c, kh, kw]`, `bias`: `[oc]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4
            || ws.len() != 4
            || xs[1] != ws[1]
            || xs[2] + 2 * pad < ws[2]
            || xs[3] + 2 * pad < ws[3]
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![xs.first().copied().unwrap_or(1), ws[1], ws[2], ws[3]],
                actual: xs,
            });
        }
        self.value(bias).expect_shape("conv2d bias", &[ws[0]])?;
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let (n, oc) = (xs[0], ws[0]);
        let patch = geom.patch_len();
        let pos = geom.out_positions();
        let keep_cols = self.requires_grad(weight);
        let mut cols_all = if keep_cols {
            vec![0.0; n * patch * pos]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; patch * pos];
        let mut out = vec![0.0; n * oc * pos];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let bv = self.value(bias).data();
            let sample_len = geom.channels * geom.height * geom.width;
            for i in 0..n {
                let cols = if keep_cols {
                    &mut cols_all[i * patch * pos..(i + 1) * patch * pos]
                } else {
                    &mut scratch[..]
                };
                kernels::im2col(&xv[i * sample_len..(i + 1) * sample_len], &geom, cols);
                let dst = &mut out[i * oc * pos..(i + 1) * oc * pos];
                for (o, row) in dst.chunks_mut(pos).enumerate() {
                    row.fill(bv[o]);
                }
                kernels::gemm(oc, patch, pos, wv, false, cols, false, 1.0, dst);
            }
        }
        let rg = self.requires_grad(x) || keep_cols || self.requires_grad(bias);
        let value = Tensor::from_parts(vec![n, oc, geom.out_h(), geom.out_w()], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
                cols: keep_cols.then_some(cols_all),
            },
            rg,
        ))
    }

    /// Max pooling with a square window on `[n, c, h, w]`.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < size || xs[3] < size || size == 0 || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                expected: vec![xs.first().copied().unwrap_or(1), 1, size, size],
                actual: xs,
            });
        }
        let (out, argmax) = kernels::max_pool(
            self.value(x).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            size,
            stride,
        );
        let shape = vec![
            xs[0],
            xs[1],
            (xs[2] - size) / stride + 1,
            (xs[3] - size) / stride + 1,
        ];
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxPool2d { input: x, argmax },
            rg,
        ))
    }

    /// `y = x·Wᵀ + b` with `x` flattened to `[n, in]`, `weight`: `[out, in]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let ws = self.value(weight).shape().to_vec();
        let (n, fan_in) = (xv.batch(), xv.sample_len());
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                expected: vec![n, ws.get(1).copied().unwrap_or(0)],
                actual: xv.shape().to_vec(),
            });
        }
        let fan_out = ws[0];
        self.value(bias)
            .expect_shape("fully_connected bias", &[fan_out])?;
        let mut out = vec![0.0; n * fan_out];
        let bv = self.value(bias).data();
        for row in out.chunks_mut(fan_out) {
            row.copy_from_slice(bv);
        }
        kernels::gemm(
            n,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.requires_grad(x) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, fan_out], out),
            Op::FullyConnected {
                input: x,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu { input: x }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.batch() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: vec![labels.len(), lv.sample_len()],
                actual: lv.shape().to_vec(),
            });
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let probs = softmax_rows(lv);
        let n = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * classes + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let blen = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % blen])
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let blen = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv.data()[i % blen])
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = mse(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(value), Op::Mse { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum { input: x }, rg)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !broadcast_ok(sa, sb) {
            return Err(Error::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(target) {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.value(target).numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Relu { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(x).zip(g) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    let len = db.len();
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % len] += gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let blen = bv.len();
                self.accumulate(grads, *a, |da| {
                    for (i, (d, &gi)) in da.iter_mut().zip(g).enumerate() {
                        *d += gi * bv[i % blen];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % blen] += gi * av[i];
                    }
                });
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / av.len() as f64;
                self.accumulate(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accumulate(grads, *logits, |dl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[i * classes + j] += scale * (probs[i * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                });
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let (n, fan_in) = (xv.batch(), xv.sample_len());
                let fan_out = wv.shape()[0];
                self.accumulate(grads, *input, |dx| {
                    kernels::gemm(n, fan_out, fan_in, g, false, wv.data(), false, 1.0, dx);
                });
                self.accumulate(grads, *weight, |dw| {
                    kernels::gemm(fan_out, n, fan_in, g, true, xv.data(), false, 1.0, dw);
                });
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(fan_out) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = self.value(*input).batch();
                let wv = self.value(*weight).data();
                let oc = self.value(*weight).shape()[0];
                let patch = geom.patch_len();
                let pos = geom.out_positions();
                self.accumulate(grads, *bias, |db| {
                    for (idx, plane) in g.chunks(pos).enumerate() {
                        db[idx % oc] += plane.iter().sum::<f64>();
                    }
                });
                if let Some(cols) = cols {
                    self.accumulate(grads, *weight, |dw| {
                        for i in 0..n {
                            kernels::gemm(
                                oc,
                                pos,
                                patch,
                                &g[i * oc * pos..(i + 1) * oc * pos],
                                false,
                                &cols[i * patch * pos..(i + 1) * patch * pos],
                                true,
                                1.0,
                                dw,
                            );
                        }
                    });
                }
                let sample_len = geom.channels * geom.height * geom.width;
                self.accumulate(grads, *input, |dx| {
                    let mut dcols = vec![0.0; patch * pos];
                    for i in 0..n {
                        kernels::gemm(
                            patch,
                            oc,
                            pos,
                            wv,
                            true,
                            &g[i * oc * pos..(i + 1) * oc * pos],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        kernels::col2im_add(
                            &dcols,
                            geom,
                            &mut dx[i * sample_len..(i + 1) * sample_len],
                        );
                    }
                });
            }
        }
    }
}

/// Row-wise softmax of a `[n, classes]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let classes = logits.sample_len();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean squared error between equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape("mse", b.shape())?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(total / a.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn fc_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn pool_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mse_gradient_zero_at_equality() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        let loss = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_values() {
        let a = Tensor::from_vec(vec![0.0, 0.0]);
        let b = Tensor::from_vec(vec![2.0, 0.0]);
        assert_eq!(mse(&a, &b).unwrap(), 2.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let r = tape.relu(a);
        assert!(matches!(tape.backward(r), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_matches_neg_log_prob() {
        let mut tape = Tape::new();
        let logits =
            tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[2, 1]).unwrap();
        let p = softmax_rows(tape.value(logits));
        let want = (-p[2].ln() - p[4].ln()) / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-14);
        assert!(tape.softmax_cross_entropy(logits, &[3, 0]).is_err());
    }

    #[test]
    fn batch_broadcast_add_gradient_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.variable(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 1., 2., 1., 2.]);
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(a).is_none());
    }
}
