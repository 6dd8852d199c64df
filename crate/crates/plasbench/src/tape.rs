//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as an ordered node list; values are
//! computed eagerly, so node order is a topological order by construction.
//! [`Tape::backward`] walks the list once in reverse, accumulating gradients
//! into per-variable buffers (summing across uses). Tapes are rebuilt every
//! forward pass and confined to one worker at a time.

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormSaved, ConvDims};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Scalar> {
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: E,
    },
    /// [N,K] + [K], bias broadcast across rows.
    AddBiasRow {
        x: usize,
        bias: usize,
    },
    /// NCHW + [C], bias broadcast across batch and plane.
    AddBiasChannel {
        x: usize,
        bias: usize,
        plane: usize,
    },
    Relu {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        dims: ConvDims,
    },
    BatchNormTrain {
        x: usize,
        scale: usize,
        shift: usize,
        plane: usize,
        saved: BatchNormSaved<E>,
    },
    BatchNormEval {
        x: usize,
        scale: usize,
        shift: usize,
        plane: usize,
        mean: Vec<E>,
        var: Vec<E>,
        eps: E,
    },
    GlobalAvgPool {
        x: usize,
        plane: usize,
    },
    Reshape {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<u32>,
        probs: Vec<E>,
    },
    /// Mean squared error against a constant target.
    MseLoss {
        pred: usize,
        target: Vec<E>,
    },
}

struct Node<E: Scalar> {
    op: Op<E>,
    out: usize,
}

pub struct Tape<E: Scalar> {
    vals: Vec<Tensor<E>>,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a tensor as a leaf; gradients reach it only if
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.vals.push(t);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<E>, out: Tensor<E>) -> Var {
        self.vals.push(out);
        self.grads.push(None);
        let out_idx = self.vals.len() - 1;
        self.nodes.push(Node { op, out: out_idx });
        Var(out_idx)
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.vals[v.0].shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Dim {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dim {
                op: "matmul",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(
            &self.vals[a.0].data,
            &self.vals[b.0].data,
            m,
            k,
            n,
            &mut out.data,
        );
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, out))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Dim {
                op,
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.vals[a.0].clone();
        out.grad = None;
        out.requires_grad = false;
        for (o, &x) in out.data.iter_mut().zip(&self.vals[b.0].data) {
            *o += x;
        }
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.vals[a.0].clone();
        out.grad = None;
        out.requires_grad = false;
        for (o, &x) in out.data.iter_mut().zip(&self.vals[b.0].data) {
            *o -= x;
        }
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.vals[a.0].clone();
        out.grad = None;
        out.requires_grad = false;
        for (o, &x) in out.data.iter_mut().zip(&self.vals[b.0].data) {
            *o *= x;
        }
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let mut out = self.vals[x.0].clone();
        out.grad = None;
        out.requires_grad = false;
        out.data.iter_mut().for_each(|v| *v *= c);
        self.push(Op::Scale { x: x.0, c }, out)
    }

    /// [N,K] + bias[K].
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = self.shape2(x, "add_bias_row")?;
        if self.vals[bias.0].shape() != [k] {
            return Err(Error::Dim {
                op: "add_bias_row",
                lhs: self.vals[x.0].shape().to_vec(),
                rhs: self.vals[bias.0].shape().to_vec(),
            });
        }
        let mut out = self.vals[x.0].clone();
        out.grad = None;
        out.requires_grad = false;
        let b = &self.vals[bias.0].data;
        for row in out.data.chunks_mut(k) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(
            Op::AddBiasRow {
                x: x.0,
                bias: bias.0,
            },
            out,
        ))
    }

    /// NCHW + bias[C].
    pub fn add_bias_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.vals[x.0].shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Dim {
                op: "add_bias_channel",
                lhs: shape,
                rhs: self.vals[bias.0].shape().to_vec(),
            });
        };
        if self.vals[bias.0].shape() != [c] {
            return Err(Error::Dim {
                op: "add_bias_channel",
                lhs: shape,
                rhs: self.vals[bias.0].shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = self.vals[x.0].clone();
        out.grad = None;
        out.requires_grad = false;
        let b = &self.vals[bias.0].data;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    out.data[base + i] += b[ci];
                }
            }
        }
        Ok(self.push(
            Op::AddBiasChannel {
                x: x.0,
                bias: bias.0,
                plane,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.vals[x.0].clone();
        out.grad = None;
        out.requires_grad = false;
        out.data
            .iter_mut()
            .for_each(|v| *v = if *v > E::zero() { *v } else { E::zero() });
        self.push(Op::Relu { x: x.0 }, out)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        let ws = self.vals[w.0].shape().to_vec();
        let ([n, c, h, wd], [f, wc, kh, kw]) = (match xs[..] {
            [a, b, cc, d] => [a, b, cc, d],
            _ => {
                return Err(Error::Dim {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        }, match ws[..] {
            [a, b, cc, d] => [a, b, cc, d],
            _ => {
                return Err(Error::Dim {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        });
        if wc != c || kh > h + 2 * pad || kw > wd + 2 * pad || stride == 0 {
            return Err(Error::Dim {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let dims = ConvDims {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let mut out = Tensor::zeros(vec![n, f, dims.out_h(), dims.out_w()]);
        kernels::conv2d(&self.vals[x.0].data, &self.vals[w.0].data, &dims, &mut out.data);
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                dims,
            },
            out,
        ))
    }

    /// Train-mode batch norm over NCHW; returns the output together with the
    /// batch mean/variance so the caller can update its running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: E,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let shape = self.vals[x.0].shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Dim {
                op: "batch_norm",
                lhs: shape,
                rhs: self.vals[scale.0].shape().to_vec(),
            });
        };
        if self.vals[scale.0].shape() != [c] || self.vals[shift.0].shape() != [c] {
            return Err(Error::Dim {
                op: "batch_norm",
                lhs: shape,
                rhs: self.vals[scale.0].shape().to_vec(),
            });
        }
        let plane = h * w;
        if n * plane == 1 && eps <= E::zero() {
            return Err(Error::Numeric(
                "batch_norm: single-element channel with eps == 0 has degenerate variance".into(),
            ));
        }
        let mut out = Tensor::zeros(shape);
        let saved = kernels::batch_norm_train(
            &self.vals[x.0].data,
            &self.vals[scale.0].data,
            &self.vals[shift.0].data,
            n,
            c,
            plane,
            eps,
            &mut out.data,
        );
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let v = self.push(
            Op::BatchNormTrain {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                plane,
                saved,
            },
            out,
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm: running statistics are constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<Var> {
        let shape = self.vals[x.0].shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Dim {
                op: "batch_norm",
                lhs: shape,
                rhs: self.vals[scale.0].shape().to_vec(),
            });
        };
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dim {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![running_mean.len()],
            });
        }
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        kernels::batch_norm_eval(
            &self.vals[x.0].data,
            &self.vals[scale.0].data,
            &self.vals[shift.0].data,
            running_mean,
            running_var,
            n,
            c,
            plane,
            eps,
            &mut out.data,
        );
        Ok(self.push(
            Op::BatchNormEval {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                plane,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
            },
            out,
        ))
    }

    /// NCHW -> [N,C] mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.vals[x.0].shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Dim {
                op: "global_avg_pool",
                lhs: shape,
                rhs: vec![],
            });
        };
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let mut out = Tensor::zeros(vec![n, c]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mut s = E::zero();
                for i in 0..plane {
                    s += self.vals[x.0].data[base + i];
                }
                out.data[ni * c + ci] = s * inv;
            }
        }
        Ok(self.push(Op::GlobalAvgPool { x: x.0, plane }, out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.vals[x.0].reshaped(shape)?;
        Ok(self.push(Op::Reshape { x: x.0 }, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::zero();
        for &v in &self.vals[x.0].data {
            s += v;
        }
        self.push(Op::SumAll { x: x.0 }, Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let mut s = E::zero();
        for &v in &self.vals[x.0].data {
            s += v;
        }
        self.push(
            Op::MeanAll { x: x.0 },
            Tensor::scalar(s / E::from_f64(n as f64)),
        )
    }

    /// Mean over the batch of -log softmax(logits)[label], computed with
    /// max-subtraction so large logits do not overflow.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (n, k) = self.shape2(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dim {
                op: "softmax_cross_entropy",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= k {
                return Err(Error::Label {
                    label: y,
                    num_classes: k,
                    index: i,
                });
            }
        }
        let z = &self.vals[logits.0].data;
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(row[0], E::max);
            let mut denom = E::zero();
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / denom;
            }
            let y = labels[i] as usize;
            loss += denom.ln() - (row[y] - m);
        }
        loss = loss / E::from_f64(n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean of squared residuals against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var> {
        if self.vals[pred.0].shape() != target.shape() {
            return Err(Error::Dim {
                op: "mse_loss",
                lhs: self.vals[pred.0].shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let p = &self.vals[pred.0].data;
        let mut s = E::zero();
        for (a, b) in p.iter().zip(&target.data) {
            let d = *a - *b;
            s += d * d;
        }
        let n = E::from_f64(p.len() as f64);
        Ok(self.push(
            Op::MseLoss {
                pred: pred.0,
                target: target.data.clone(),
            },
            Tensor::scalar(s / n),
        ))
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<E> {
        let len = self.vals[idx].numel();
        self.grads[idx].get_or_insert_with(|| vec![E::zero(); len])
    }

    /// Accumulates dL/d(var) for every variable the loss depends on. The loss
    /// must be a scalar produced on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::one()]);

        for node_idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[node_idx].out;
            let Some(g) = self.grads[out].take() else {
                continue;
            };
            // Reborrow per-op to satisfy the borrow checker while mutating
            // multiple gradient buffers.
            match &self.nodes[node_idx].op {
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let [m, k] = self.vals[a].shape()[..] else { unreachable!() };
                    let n = self.vals[b].shape()[1];
                    let (av, bv) = (self.vals[a].data.clone(), self.vals[b].data.clone());
                    let mut da = std::mem::take(self.grad_buf(a));
                    let mut db = std::mem::take(self.grad_buf(b));
                    kernels::matmul_backward(&av, &bv, &g, m, k, n, &mut da, &mut db);
                    self.grads[a] = Some(da);
                    self.grads[b] = Some(db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (d, &gv) in self.grad_buf(a).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in self.grad_buf(b).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    for (d, &gv) in self.grad_buf(a).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in self.grad_buf(b).iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (self.vals[a].data.clone(), self.vals[b].data.clone());
                    for ((d, &gv), &other) in self.grad_buf(a).iter_mut().zip(&g).zip(&bv) {
                        *d += gv * other;
                    }
                    for ((d, &gv), &other) in self.grad_buf(b).iter_mut().zip(&g).zip(&av) {
                        *d += gv * other;
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    for (d, &gv) in self.grad_buf(x).iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
                Op::AddBiasRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let k = self.vals[bias].numel();
                    for (d, &gv) in self.grad_buf(x).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let db = self.grad_buf(bias);
                    for row in g.chunks(k) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
                Op::AddBiasChannel { x, bias, plane } => {
                    let (x, bias, plane) = (*x, *bias, *plane);
                    let c = self.vals[bias].numel();
                    for (d, &gv) in self.grad_buf(x).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let db = self.grad_buf(bias);
                    for (chunk_idx, chunk) in g.chunks(plane).enumerate() {
                        let ci = chunk_idx % c;
                        for &gv in chunk {
                            db[ci] += gv;
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = self.vals[x].data.clone();
                    for ((d, &gv), &inp) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        if inp > E::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::Conv2d { x, w, dims } => {
                    let (x, w, dims) = (*x, *w, *dims);
                    let (xv, wv) = (self.vals[x].data.clone(), self.vals[w].data.clone());
                    let mut dx = std::mem::take(self.grad_buf(x));
                    let mut dw = std::mem::take(self.grad_buf(w));
                    kernels::conv2d_backward(&xv, &wv, &g, &dims, &mut dx, &mut dw);
                    self.grads[x] = Some(dx);
                    self.grads[w] = Some(dw);
                }
                Op::BatchNormTrain {
                    x,
                    scale,
                    shift,
                    plane,
                    saved,
                } => {
                    let (x, scale, shift, plane) = (*x, *scale, *shift, *plane);
                    let saved = saved.clone();
                    let xv = self.vals[x].data.clone();
                    let sv = self.vals[scale].data.clone();
                    let c = sv.len();
                    let n = xv.len() / (c * plane);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    let mut ds = std::mem::take(self.grad_buf(scale));
                    let mut db = std::mem::take(self.grad_buf(shift));
                    kernels::batch_norm_train_backward(
                        &xv, &sv, &saved, &g, n, c, plane, &mut dx, &mut ds, &mut db,
                    );
                    self.grads[x] = Some(dx);
                    self.grads[scale] = Some(ds);
                    self.grads[shift] = Some(db);
                }
                Op::BatchNormEval {
                    x,
                    scale,
                    shift,
                    plane,
                    mean,
                    var,
                    eps,
                } => {
                    let (x, scale, shift, plane, eps) = (*x, *scale, *shift, *plane, *eps);
                    let (mean, var) = (mean.clone(), var.clone());
                    let xv = self.vals[x].data.clone();
                    let sv = self.vals[scale].data.clone();
                    let c = sv.len();
                    let n = xv.len() / (c * plane);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    let mut ds = std::mem::take(self.grad_buf(scale));
                    let mut db = std::mem::take(self.grad_buf(shift));
                    kernels::batch_norm_eval_backward(
                        &xv, &sv, &mean, &var, &g, n, c, plane, eps, &mut dx, &mut ds, &mut db,
                    );
                    self.grads[x] = Some(dx);
                    self.grads[scale] = Some(ds);
                    self.grads[shift] = Some(db);
                }
                Op::GlobalAvgPool { x, plane } => {
                    let (x, plane) = (*x, *plane);
                    let inv = E::from_f64(1.0 / plane as f64);
                    let dx = self.grad_buf(x);
                    for (i, &gv) in g.iter().enumerate() {
                        let base = i * plane;
                        for j in 0..plane {
                            dx[base + j] += gv * inv;
                        }
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    for (d, &gv) in self.grad_buf(x).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let gv = g[0];
                    for d in self.grad_buf(x).iter_mut() {
                        *d += gv;
                    }
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let gv = g[0] * E::from_f64(1.0 / self.vals[x].numel() as f64);
                    for d in self.grad_buf(x).iter_mut() {
                        *d += gv;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let n = labels.len();
                    let k = probs.len() / n;
                    let gv = g[0] * E::from_f64(1.0 / n as f64);
                    let dz = self.grad_buf(logits);
                    for i in 0..n {
                        let y = labels[i] as usize;
                        for j in 0..k {
                            let onehot = if j == y { E::one() } else { E::zero() };
                            dz[i * k + j] += gv * (probs[i * k + j] - onehot);
                        }
                    }
                }
                Op::MseLoss { pred, target } => {
                    let pred = *pred;
                    let target = target.clone();
                    let pv = self.vals[pred].data.clone();
                    let n = E::from_f64(pv.len() as f64);
                    let two = E::from_f64(2.0);
                    let gv = g[0];
                    for ((d, &p), &t) in self.grad_buf(pred).iter_mut().zip(&pv).zip(&target) {
                        *d += gv * two * (p - t) / n;
                    }
                }
            }
            // Keep the output gradient available to callers inspecting
            // intermediate values.
            self.grads[out] = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_ones_oracle() {
        // d/da sum(a*b) with b = [[1],[1]] is a matrix of ones; cross-checked
        // against central finite differences at step 1e-5.
        let a_data = [0.3, -1.2, 2.0, 0.7];
        let b_data = [1.0, 1.0];
        let loss_of = |a: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let av = tape.leaf(t2([2, 2], a).with_grad());
            let bv = tape.leaf(Tensor::new(vec![2, 1], b_data.to_vec()).unwrap());
            let prod = tape.matmul(av, bv).unwrap();
            let loss = tape.sum_all(prod);
            tape.value(loss).data[0]
        };

        let mut tape = Tape::new();
        let av = tape.leaf(t2([2, 2], &a_data).with_grad());
        let bv = tape.leaf(Tensor::new(vec![2, 1], b_data.to_vec()).unwrap());
        let prod = tape.matmul(av, bv).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let grad = tape.grad(av).unwrap();

        let h = 1e-5;
        for i in 0..4 {
            let mut plus = a_data;
            let mut minus = a_data;
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8);
            assert!((grad[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);

        // gradient of sum(relu(x)) at [-1, 2] is [0, 1]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap().with_grad());
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![1, 10]));
        let loss = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((tape.value(loss).data[0] - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_saturated_does_not_overflow() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t2([1, 2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(loss).data[0];
        assert!(v.is_finite() && v.abs() < 1e-9);
    }

    #[test]
    fn softmax_cross_entropy_frozen_value() {
        // -log softmax([1,2,3])[2], high-precision reference value.
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t2([1, 3], &[1.0, 2.0, 3.0]));
        let loss = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(loss).data[0] - 0.4076059644443803).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.softmax_cross_entropy(z, &[1, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::Label {
                label: 3,
                index: 1,
                ..
            }
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        // loss = sum(theta): grad is ones.
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::filled(vec![5], 0.3).with_grad());
        let loss = tape.sum_all(theta);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(theta).unwrap(), &[1.0; 5]);

        // loss = 0.5 * |theta|^2 at [1,-2]: grad is [1,-2].
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad());
        let sq = tape.mul(theta, theta).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(theta).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        // loss = theta + theta: grad 2.
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::scalar(1.5).with_grad());
        let doubled = tape.add(theta, theta).unwrap();
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(theta).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 4.0).collect();
        let x = tape.leaf(Tensor::new(vec![1, 2, 3, 3], data.clone()).unwrap());
        // 1x1 kernels acting as per-channel identity: w[f,c,0,0] = delta_fc
        let w = tape.leaf(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data, data);
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn batch_norm_eval_formula() {
        // running mean 0, var 1, scale 2, shift 1 on input 3: 2*3/sqrt(1+eps)+1
        let eps = 1e-5f64;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let s = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = tape.batch_norm_eval(x, s, b, &[0.0], &[1.0], eps).unwrap();
        let expect = 2.0 * 3.0 / (1.0 + eps).sqrt() + 1.0;
        assert!((tape.value(y).data[0] - expect).abs() < 1e-12);
        assert!((tape.value(y).data[0] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_train_is_normalization_fixed_point() {
        // Per-channel zero-mean unit-variance input with scale 1 shift 0 maps
        // to itself up to the eps-induced factor.
        let eps = 1e-5f64;
        let raw = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4, 1, 1, 2], raw.to_vec()).unwrap());
        let s = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let (y, mean, var) = tape.batch_norm_train(x, s, b, eps).unwrap();
        assert!(mean[0].abs() < 1e-12);
        assert!((var[0] - 1.0).abs() < 1e-12);
        let factor = (1.0 + eps).sqrt();
        for (out, inp) in tape.value(y).data.iter().zip(&raw) {
            assert!((out * factor - inp).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect();
            let x = tape.leaf(Tensor::new(vec![3, 4], data).unwrap());
            let w: Vec<f32> = (0..8).map(|i| (i as f32 * 0.3).cos()).collect();
            let wv = tape.leaf(Tensor::new(vec![4, 2], w).unwrap());
            let h = tape.matmul(x, wv).unwrap();
            let a = tape.relu(h);
            let loss = tape.softmax_cross_entropy(a, &[0, 1, 0]).unwrap();
            tape.value(loss).data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
