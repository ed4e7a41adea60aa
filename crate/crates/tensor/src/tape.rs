//! Reverse-mode automatic differentiation over a linear record of operations.
//!
//! Every operation appends one node holding its result; operands always have
//! smaller indices than their results, so a single reverse sweep over the
//! node list visits each record once in a valid order.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::{self, ConvGeom, Elementwise};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Relu,
    Gelu,
    Exp,
    Log,
    Abs,
    Powf(T),
    Scale(T),
    AddScalar(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// A tape is confined to the thread that builds it. Leaves registered with
/// [`Tape::param`] receive gradients; [`Tape::constant`] leaves do not, and
/// operations whose operands are all constant record no gradient state.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn param(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the tensor (with its gradient, if any) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (x, y) = (self.value(a), self.value(b));
        let out = match kind {
            Binary::Add => ops::broadcast_binary("add", x, y, |p, q| p + q)?,
            Binary::Sub => ops::broadcast_binary("sub", x, y, |p, q| p - q)?,
            Binary::Mul => ops::broadcast_binary("mul", x, y, |p, q| p * q)?,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    fn unary(&mut self, kind: Unary<T>, x: Var) -> Result<Var> {
        self.live()?;
        let src = self.value(x);
        let out = match kind {
            Unary::Relu => src.map(ops::relu),
            Unary::Gelu => src.map(ops::gelu),
            Unary::Exp => src.map(T::exp),
            Unary::Log => ops::elementwise(Elementwise::Log, &[src])?,
            Unary::Abs => src.map(T::abs),
            Unary::Powf(p) => {
                if let Some(&bad) = src.data().iter().find(|v| **v < T::zero()) {
                    return Err(TensorError::Domain {
                        op: "powf",
                        value: bad.as_f64(),
                    });
                }
                src.map(|v| v.powf(p))
            }
            Unary::Scale(c) => src.map(|v| v * c),
            Unary::AddScalar(c) => src.map(|v| v + c),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary(Unary::Powf(p), x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    /// Dispatches one of the named elementwise operations.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != op.arity() {
            return Err(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{op:?} takes {} operands, got {}", op.arity(), args.len()),
            });
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Gelu => self.gelu(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Log => self.log(args[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.live()?;
        let out = ops::bmm(self.value(a), self.value(b), trans_b)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.live()?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let width = bv.numel();
        if xv.shape().last() != Some(&width) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(width) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.live()?;
        let parts = ops::layernorm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let out = Tensor::from_vec(self.shape(x), parts.out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        let (normalized, inv_std) = if rg {
            (parts.normalized, parts.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.live()?;
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let data = ops::conv2d_raw(&geom, self.value(x).data(), self.value(k).data());
        let out = Tensor::from_vec(&geom.out_shape(self.value(x).rank() == 4), data)?;
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(out, Op::Conv2d { x, k, geom }, rg))
    }

    /// Per-channel scale and shift of a `[B, C, H, W]` tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.live()?;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() != 4 || gv.numel() != xv.shape()[1] || bv.numel() != xv.shape()[1] {
            return Err(TensorError::Shape {
                op: "channel_affine",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let channels = xv.shape()[1];
        let spatial = xv.shape()[2] * xv.shape()[3];
        let mut data = xv.data().to_vec();
        for (i, plane) in data.chunks_mut(spatial).enumerate() {
            let c = i % channels;
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for v in plane {
                *v = *v * g + b;
            }
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    /// `out[i] = x.flat[index[i]]`, shaped as `shape`. Indices may repeat;
    /// their gradients accumulate.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Arc<[usize]>) -> Result<Var> {
        self.live()?;
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", src.len()),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let total: T = v.data().iter().copied().sum();
        let out = Tensor::scalar(total / T::from_usize(v.numel()).unwrap());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(x);
        let (outer, len, _) = ops::axis_split(v.shape(), v.rank().saturating_sub(1))?;
        let n = T::from_usize(len.max(1)).unwrap();
        let data = (0..outer)
            .map(|r| v.data()[r * len..(r + 1) * len].iter().copied().sum::<T>() / n)
            .collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanLast(x), rg))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.live()?;
        let v = self.value(logits);
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let classes = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {classes} classes"),
            });
        }
        let probs = ops::softmax(v, 1)?.into_data();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &v.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        loss /= T::from_usize(targets.len().max(1)).unwrap();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one, then marks the tape consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.live()?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        self.consumed = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick = |s: &[T], j: usize| if s.len() == 1 { s[0] } else { s[j] };
                let (kind, a, b) = (*kind, *a, *b);
                acc(a, &mut |da| {
                    let local = |j: usize| match kind {
                        Binary::Add | Binary::Sub => T::one(),
                        Binary::Mul => pick(bv, j),
                    };
                    reduce_into(da, g, local);
                });
                acc(b, &mut |db| {
                    let local = |j: usize| match kind {
                        Binary::Add => T::one(),
                        Binary::Sub => -T::one(),
                        Binary::Mul => pick(av, j),
                    };
                    reduce_into(db, g, local);
                });
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        let d = match *kind {
                            Unary::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => ops::gelu_grad(xv[j]),
                            Unary::Exp => yv[j],
                            Unary::Log => T::one() / xv[j],
                            Unary::Abs => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else if xv[j] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Powf(p) => {
                                if xv[j] == T::zero() && p > T::one() {
                                    T::zero()
                                } else {
                                    p * xv[j].powf(p - T::one())
                                }
                            }
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => T::one(),
                        };
                        dx[j] += g[j] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |da| {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        bd,
                        1,
                        n as isize,
                        T::one(),
                        da,
                        k as isize,
                        1,
                    );
                });
                acc(*b, &mut |db| {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ad,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        db,
                        n as isize,
                        1,
                    );
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = ops::bmm_dims(av.shape(), bv.shape(), *trans_b).unwrap();
                let (ad, bd) = (av.data(), bv.data());
                let trans_b = *trans_b;
                acc(*a, &mut |da| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        // dA = G · B^T where B is [k, n], or G · B where B is stored [n, k].
                        let (rs, cs) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gs,
                            n as isize,
                            1,
                            bs,
                            rs,
                            cs,
                            T::one(),
                            &mut da[s * m * k..(s + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // dB [n, k] = G^T · A
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                gs,
                                1,
                                n as isize,
                                as_,
                                k as isize,
                                1,
                                T::one(),
                                out,
                                k as isize,
                                1,
                            );
                        } else {
                            // dB [k, n] = A^T · G
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                as_,
                                1,
                                k as isize,
                                gs,
                                n as isize,
                                1,
                                T::one(),
                                out,
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc(*bias, &mut |db| {
                    let w = db.len();
                    for row in g.chunks(w) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis).unwrap();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gd = self.value(*gain).data();
                let width = gd.len();
                acc(*gain, &mut |dg| {
                    for (grow, zrow) in g.chunks(width).zip(normalized.chunks(width)) {
                        for j in 0..width {
                            dg[j] += grow[j] * zrow[j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(width) {
                        for j in 0..width {
                            db[j] += grow[j];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let n = T::from_usize(width).unwrap();
                    for (r, (grow, zrow)) in
                        g.chunks(width).zip(normalized.chunks(width)).enumerate()
                    {
                        let dz: Vec<T> = (0..width).map(|j| grow[j] * gd[j]).collect();
                        let mean_dz = dz.iter().copied().sum::<T>() / n;
                        let mean_dzz = dz.iter().zip(zrow).map(|(&a, &z)| a * z).sum::<T>() / n;
                        for j in 0..width {
                            dx[r * width + j] +=
                                inv_std[r] * (dz[j] - mean_dz - zrow[j] * mean_dzz);
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom } => {
                let (xd, kd) = (self.value(*x).data(), self.value(*k).data());
                let (rows, n, f) = (geom.col_rows(), geom.col_cols(), geom.filters);
                let in_size = geom.channels * geom.height * geom.width;
                let out_size = f * n;
                let mut cols = vec![T::zero(); rows * n];
                acc(*k, &mut |dk| {
                    for b in 0..geom.batch {
                        geom.im2col(&xd[b * in_size..(b + 1) * in_size], &mut cols);
                        let gb = &g[b * out_size..(b + 1) * out_size];
                        T::gemm(
                            f,
                            n,
                            rows,
                            T::one(),
                            gb,
                            n as isize,
                            1,
                            &cols,
                            1,
                            n as isize,
                            T::one(),
                            dk,
                            rows as isize,
                            1,
                        );
                    }
                });
                acc(*x, &mut |dx| {
                    for b in 0..geom.batch {
                        let gb = &g[b * out_size..(b + 1) * out_size];
                        T::gemm(
                            rows,
                            f,
                            n,
                            T::one(),
                            kd,
                            1,
                            rows as isize,
                            gb,
                            n as isize,
                            1,
                            T::zero(),
                            &mut cols,
                            n as isize,
                            1,
                        );
                        geom.col2im(&cols, &mut dx[b * in_size..(b + 1) * in_size]);
                    }
                });
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let channels = xv.shape()[1];
                let spatial = xv.shape()[2] * xv.shape()[3];
                let gam = self.value(*gamma).data();
                acc(*x, &mut |dx| {
                    for (p, (dplane, gplane)) in
                        dx.chunks_mut(spatial).zip(g.chunks(spatial)).enumerate()
                    {
                        let s = gam[p % channels];
                        for (d, &gv) in dplane.iter_mut().zip(gplane) {
                            *d += gv * s;
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (p, (xplane, gplane)) in
                        xv.data().chunks(spatial).zip(g.chunks(spatial)).enumerate()
                    {
                        dg[p % channels] +=
                            xplane.iter().zip(gplane).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
                acc(*beta, &mut |db| {
                    for (p, gplane) in g.chunks(spatial).enumerate() {
                        db[p % channels] += gplane.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |dx| {
                    for (&src, &gv) in index.iter().zip(g) {
                        dx[src] += gv;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |dp| {
                        for (d, &gv) in dp.iter_mut().zip(slice) {
                            *d += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                acc(*x, &mut |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                acc(*x, &mut |dx| {
                    let s = g[0] / T::from_usize(dx.len()).unwrap();
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::MeanLast(x) => {
                acc(*x, &mut |dx| {
                    let len = dx.len() / g.len().max(1);
                    let n = T::from_usize(len.max(1)).unwrap();
                    for (r, &gv) in g.iter().enumerate() {
                        for d in &mut dx[r * len..(r + 1) * len] {
                            *d += gv / n;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                acc(*logits, &mut |dl| {
                    let classes = dl.len() / targets.len();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Accumulates `g[j] * local(j)` into `out`, summing everything when `out`
/// is a broadcast single element.
fn reduce_into<T: Scalar>(out: &mut [T], g: &[T], local: impl Fn(usize) -> T) {
    if out.len() == g.len() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += g[j] * local(j);
        }
    } else {
        let total: T = (0..g.len()).map(|j| g[j] * local(j)).sum();
        out[0] += total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_by_hand() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::TapeConsumed));
        assert!(tape.relu(x).is_err());
    }

    #[test]
    fn constants_record_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let p = tape.param(Tensor::ones(&[3]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn operands_precede_results() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::ones(&[2]));
        let b = tape.relu(a).unwrap();
        let c = tape.add(a, b).unwrap();
        assert!(a < b && b < c);
        assert_eq!(tape.len(), 3);
    }
}
