//! Reverse-mode tape over dense tensors.
//!
//! Ops append nodes in execution order, which is already a topological order;
//! `backward` walks it once in reverse and accumulates gradients additively at
//! fan-out. Any non-finite op output aborts immediately with the op name.
//!
//! Reductions in `matmul` and `softmax` sort their addends by total order
//! before summing, so forward results are bit-identical under any permutation
//! of the reduced axis (the prior pool's key axis in particular).

use rayon::prelude::*;

use super::conv;
use super::tensor::{sorted_sum, Scalar, Tensor};
use super::DiffError;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Val(pub(crate) usize);

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv3d { x: Val, w: Val, b: Option<Val>, dims: conv::ConvDims },
    ConvTranspose3d { x: Val, w: Val, b: Option<Val>, dims: conv::ConvTDims },
    Matmul { a: Val, b: Val },
    Softmax { x: Val, axis: usize },
    Concat { xs: Vec<Val>, axis: usize },
    Reshape { x: Val },
    Permute { x: Val, perm: Vec<usize> },
    Relu { x: Val },
    GroupNorm { x: Val, gamma: Val, beta: Val, groups: usize },
    L1Masked { pred: Val, target: Tensor<T>, mask: Tensor<T>, count: usize },
    Add { a: Val, b: Val },
    Scale { x: Val, c: T },
    Tanh { x: Val },
    Sum { x: Val },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv3d_transpose",
            Op::Matmul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Relu { .. } => "relu",
            Op::GroupNorm { .. } => "group_norm",
            Op::L1Masked { .. } => "l1_masked",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Tanh { .. } => "tanh",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Val) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn has(&self, v: Val) -> bool {
        self.get(v).is_some()
    }
}

/// A recorded computation. Build one per forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Val, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Registers a constant (no gradient will flow into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Val, DiffError> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Val {
        self.nodes.push(Node { value, op, requires_grad });
        Val(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Val, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn any_grad(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 3D cross-correlation: output spatial size `(in + 2*pad - k)/stride + 1`.
    pub fn conv3d(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
        pad: usize,
    ) -> Result<Val, DiffError> {
        let dims = conv::conv_dims(self.value(x), self.value(w), stride, pad)?;
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [dims.c_out] {
                return Err(DiffError::Shape {
                    op: "conv3d",
                    detail: format!("bias shape {bs:?} != [{}]", dims.c_out),
                });
            }
        }
        let out = conv::conv3d_forward(self.value(x), self.value(w), b.map(|v| self.value(v)), &dims);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.record(out, Op::Conv3d { x, w, b, dims }, rg)
    }

    /// Adjoint of pad-free conv3d; output spatial size `(in - 1)*stride + k`.
    pub fn conv3d_transpose(
        &mut self,
        x: Val,
        w: Val,
        b: Option<Val>,
        stride: usize,
    ) -> Result<Val, DiffError> {
        let dims = conv::conv_transpose_dims(self.value(x), self.value(w), stride)?;
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [dims.c_out] {
                return Err(DiffError::Shape {
                    op: "conv3d_transpose",
                    detail: format!("bias shape {bs:?} != [{}]", dims.c_out),
                });
            }
        }
        let out =
            conv::conv_transpose3d_forward(self.value(x), self.value(w), b.map(|v| self.value(v)), &dims);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        self.record(out, Op::ConvTranspose3d { x, w, b, dims }, rg)
    }

    /// 2-D matrix product, fixed accumulation order (bit-deterministic).
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let (m, k, n) = matmul_dims(self.value(a), self.value(b))?;
        let out = matmul_plain(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.record(out, Op::Matmul { a, b }, rg)
    }

    /// 2-D matrix product whose accumulation order is permutation-stable:
    /// permuting the inner axis of `a` and the rows of `b` together leaves
    /// the result bit-identical, and a one-hot `a` row reproduces its `b`
    /// row verbatim. Same gradient as [`Tape::matmul`].
    pub fn matmul_stable(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let (m, k, n) = matmul_dims(self.value(a), self.value(b))?;
        let out = matmul_sorted(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.record(out, Op::Matmul { a, b }, rg)
    }

    fn softmax_checked(&mut self, x: Val, axis: usize, stable: bool) -> Result<Val, DiffError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(DiffError::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if shape[axis] == 0 {
            return Err(DiffError::EmptyInput { op: "softmax" });
        }
        let out = softmax_forward(self.value(x), axis, stable);
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Softmax { x, axis }, rg)
    }

    /// Softmax along `axis`; every lane sums to 1.
    pub fn softmax(&mut self, x: Val, axis: usize) -> Result<Val, DiffError> {
        self.softmax_checked(x, axis, false)
    }

    /// Softmax whose denominator is summed in total order, so lanes are
    /// bit-identical under any permutation of the reduced axis.
    pub fn softmax_stable(&mut self, x: Val, axis: usize) -> Result<Val, DiffError> {
        self.softmax_checked(x, axis, true)
    }

    pub fn concat(&mut self, xs: &[Val], axis: usize) -> Result<Val, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::EmptyInput { op: "concat" });
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(DiffError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut axis_total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DiffError::Shape {
                    op: "concat",
                    detail: format!("incompatible shapes {first:?} and {s:?} on axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let rows = t.shape()[axis];
                let block = rows * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(xs);
        self.record(out, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    pub fn reshape(&mut self, x: Val, shape: &[usize]) -> Result<Val, DiffError> {
        let t = self.value(x);
        let want: usize = shape.iter().product();
        if want != t.len() {
            return Err(DiffError::Shape {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {shape:?}", t.shape()),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Reshape { x }, rg)
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, x: Val, perm: &[usize]) -> Result<Val, DiffError> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::Shape {
                op: "permute",
                detail: format!("invalid permutation {perm:?} for rank {rank}"),
            });
        }
        let out = permute_tensor(t, perm);
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    pub fn relu(&mut self, x: Val) -> Result<Val, DiffError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Relu { x }, rg)
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine params.
    pub fn group_norm(&mut self, x: Val, gamma: Val, beta: Val, groups: usize) -> Result<Val, DiffError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(DiffError::Shape {
                op: "group_norm",
                detail: format!("want at least [N, C], got {shape:?}"),
            });
        }
        let c = shape[1];
        if groups == 0 || c % groups != 0 {
            return Err(DiffError::Shape {
                op: "group_norm",
                detail: format!("{groups} groups do not divide {c} channels"),
            });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(DiffError::Shape {
                op: "group_norm",
                detail: format!("gamma/beta must be [{c}]"),
            });
        }
        let out = group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.record(out, Op::GroupNorm { x, gamma, beta, groups }, rg)
    }

    /// Mean absolute error over the entries selected by `mask` (nonzero =
    /// selected); 0 when the mask selects nothing. The mask and target are
    /// constants of the forward pass.
    pub fn l1_masked(&mut self, pred: Val, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Val, DiffError> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(DiffError::Shape {
                op: "l1_masked",
                detail: format!(
                    "pred {:?}, target {:?}, mask {:?} must match",
                    p.shape(),
                    target.shape(),
                    mask.shape()
                ),
            });
        }
        if !target.all_finite() || !mask.all_finite() {
            return Err(DiffError::NonFinite { op: "l1_masked" });
        }
        let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
        let mut acc = T::zero();
        if count > 0 {
            for i in 0..p.len() {
                if mask.data()[i] != T::zero() {
                    acc = acc + (p.data()[i] - target.data()[i]).abs();
                }
            }
            acc = acc / T::from_f64(count as f64);
        }
        let rg = self.any_grad(&[pred]);
        self.record(
            Tensor::scalar(acc),
            Op::L1Masked { pred, target: target.clone(), mask: mask.clone(), count },
            rg,
        )
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.record(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Val, c: T) -> Result<Val, DiffError> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Scale { x, c }, rg)
    }

    pub fn tanh(&mut self, x: Val) -> Result<Val, DiffError> {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.record(out, Op::Tanh { x }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Val) -> Result<Val, DiffError> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let rg = self.any_grad(&[x]);
        self.record(Tensor::scalar(acc), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per node that
    /// gradient actually reached; frozen leaves never appear.
    pub fn backward(&self, loss: Val) -> Result<Gradients<T>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3d { x, w, b, dims } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = conv::conv3d_grad_input(&g, self.value(*w), dims);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = conv::conv3d_grad_weight(&g, self.value(*x), dims);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].requires_grad {
                            accumulate(&mut grads, *b, conv::grad_bias(&g, dims.n, dims.c_out));
                        }
                    }
                }
                Op::ConvTranspose3d { x, w, b, dims } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = conv::conv_transpose3d_grad_input(&g, self.value(*w), dims);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = conv::conv_transpose3d_grad_weight(&g, self.value(*x), dims);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].requires_grad {
                            accumulate(&mut grads, *b, conv::grad_bias(&g, dims.n, dims.c_out));
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k, n) = matmul_dims(self.value(*a), self.value(*b)).expect("checked");
                    if self.nodes[a.0].requires_grad {
                        // dA = g . B^T
                        let da = matmul_plain_nt(&g, self.value(*b), m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T . g
                        let db = matmul_plain_tn(self.value(*a), &g, m, k, n);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = softmax_backward(&node.value, &g, *axis);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Concat { xs, axis } => {
                    let first = self.value(xs[0]).shape();
                    let outer: usize = first[..*axis].iter().product();
                    let inner: usize = first[*axis + 1..].iter().product();
                    let mut offset = 0usize;
                    let g_axis = node.value.shape()[*axis];
                    for &v in xs {
                        let shape = self.value(v).shape().to_vec();
                        let rows = shape[*axis];
                        if self.nodes[v.0].requires_grad {
                            let mut dv = Tensor::zeros(&shape);
                            for o in 0..outer {
                                let src = (o * g_axis + offset) * inner;
                                let dst = o * rows * inner;
                                dv.data_mut()[dst..dst + rows * inner]
                                    .copy_from_slice(&g.data()[src..src + rows * inner]);
                            }
                            accumulate(&mut grads, v, dv);
                        }
                        offset += rows;
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[x.0].requires_grad {
                        let shape = self.value(*x).shape().to_vec();
                        let dv = Tensor::new(shape, g.data().to_vec()).expect("same length");
                        accumulate(&mut grads, *x, dv);
                    }
                }
                Op::Permute { x, perm } => {
                    if self.nodes[x.0].requires_grad {
                        let mut inverse = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inverse[p] = i;
                        }
                        accumulate(&mut grads, *x, permute_tensor(&g, &inverse));
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let data = xv
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups } => {
                    let (dx, dgamma, dbeta) =
                        group_norm_backward(self.value(*x), self.value(*gamma), &g, *groups);
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[gamma.0].requires_grad {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.nodes[beta.0].requires_grad {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::L1Masked { pred, target, mask, count } => {
                    if self.nodes[pred.0].requires_grad && *count > 0 {
                        let scale = g.data()[0] / T::from_f64(*count as f64);
                        let pv = self.value(*pred);
                        let data = (0..pv.len())
                            .map(|i| {
                                if mask.data()[i] != T::zero() {
                                    let diff = pv.data()[i] - target.data()[i];
                                    if diff > T::zero() {
                                        scale
                                    } else if diff < T::zero() {
                                        -scale
                                    } else {
                                        T::zero()
                                    }
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), data).unwrap());
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, g.map(|v| v * *c));
                    }
                }
                Op::Tanh { x } => {
                    if self.nodes[x.0].requires_grad {
                        let y = &node.value;
                        let data = y
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                            .collect();
                        accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), data).unwrap());
                    }
                }
                Op::Sum { x } => {
                    if self.nodes[x.0].requires_grad {
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads, *x, Tensor::full(&shape, g.data()[0]));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Val, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), DiffError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(DiffError::Shape {
            op: "matmul",
            detail: format!("incompatible shapes {sa:?} x {sb:?}"),
        });
    }
    Ok((sa[0], sa[1], sb[1]))
}

/// `[m,k] x [k,n]` with plain fixed-order accumulation (inner axis ascending).
fn matmul_plain<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, n]);
    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &ad[i * k..(i + 1) * k];
        for (j, &aval) in a_row.iter().enumerate() {
            let b_row = &bd[j * n..(j + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + aval * bv;
            }
        }
    });
    out
}

/// `[m,k] x [k,n]` with a permutation-stable accumulation order: per output
/// row, addends accumulate in the total order of the `(a value, b row)`
/// pairs, so permuting the inner axis (keys and values together) leaves the
/// result bit-identical. Zero weights contribute nothing, which also makes
/// one-hot rows reproduce their `b` row verbatim.
fn matmul_sorted<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, n]);
    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &ad[i * k..(i + 1) * k];
        let mut order: Vec<u32> = (0..k as u32).collect();
        order.sort_unstable_by(|&x, &y| {
            let c = T::total_order(a_row[x as usize], a_row[y as usize]);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
            // tie-break equal weights by their paired value rows
            let bx = &bd[x as usize * n..(x as usize + 1) * n];
            let by = &bd[y as usize * n..(y as usize + 1) * n];
            for (p, q) in bx.iter().zip(by) {
                let c = T::total_order(*p, *q);
                if c != std::cmp::Ordering::Equal {
                    return c;
                }
            }
            std::cmp::Ordering::Equal
        });
        let mut first = true;
        for &j in &order {
            let aval = a_row[j as usize];
            if aval == T::zero() {
                continue;
            }
            let b_row = &bd[j as usize * n..(j as usize + 1) * n];
            if first {
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o = aval * bv;
                }
                first = false;
            } else {
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o = *o + aval * bv;
                }
            }
        }
    });
    out
}

/// `g [m,n] x b^T` where `b` is `[k,n]`, producing `[m,k]`. Plain reductions.
fn matmul_plain_nt<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>, m: usize, n: usize, k: usize) -> Tensor<T> {
    let gd = g.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, k]);
    out.data_mut().par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let g_row = &gd[i * n..(i + 1) * n];
        for (t, slot) in row.iter_mut().enumerate() {
            let b_row = &bd[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + g_row[j] * b_row[j];
            }
            *slot = acc;
        }
    });
    out
}

/// `a^T [k,m] x g [m,n] -> [k,n]`, plain sequential reductions.
fn matmul_plain_tn<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let ad = a.data();
    let gd = g.data();
    let mut out = Tensor::zeros(&[k, n]);
    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(t, row)| {
        for i in 0..m {
            let ait = ad[i * k + t];
            let g_row = &gd[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = row[j] + ait * g_row[j];
            }
        }
    });
    out
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize, stable: bool) -> Tensor<T> {
    let shape = x.shape();
    let l = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let mut buf = vec![T::zero(); l];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * l * inner + i;
            let mut max = xd[base];
            for j in 1..l {
                let v = xd[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            for j in 0..l {
                buf[j] = (xd[base + j * inner] - max).exp();
            }
            let denom = if stable {
                let exps: Vec<T> = buf.clone();
                let d = sorted_sum(&mut buf);
                buf.copy_from_slice(&exps);
                d
            } else {
                let mut acc = T::zero();
                for &v in buf.iter() {
                    acc = acc + v;
                }
                acc
            };
            for j in 0..l {
                od[base + j * inner] = buf[j] / denom;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = y.shape();
    let l = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let yd = y.data();
    let gd = g.data();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * l * inner + i;
            let mut s = T::zero();
            for j in 0..l {
                s = s + gd[base + j * inner] * yd[base + j * inner];
            }
            for j in 0..l {
                let idx = base + j * inner;
                od[idx] = yd[idx] * (gd[idx] - s);
            }
        }
    }
    out
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let xd = x.data();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut idx = vec![0usize; rank];
    for slot in od.iter_mut() {
        let mut src = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[a]];
        }
        *slot = xd[src];
        // advance the multi-index in out-shape order
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Tensor<T> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let cg = c / groups;
    let m = cg * spatial;
    let eps = T::from_f64(NORM_EPS);
    let xd = x.data();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for nn in 0..n {
        for g in 0..groups {
            let start = (nn * c + g * cg) * spatial;
            let mut mean = T::zero();
            for i in 0..m {
                mean = mean + xd[start + i];
            }
            mean = mean / T::from_f64(m as f64);
            let mut var = T::zero();
            for i in 0..m {
                let d = xd[start + i] - mean;
                var = var + d * d;
            }
            var = var / T::from_f64(m as f64);
            let inv = T::one() / (var + eps).sqrt();
            for cc in 0..cg {
                let ch = g * cg + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for sp in 0..spatial {
                    let idx = start + cc * spatial + sp;
                    od[idx] = (xd[idx] - mean) * inv * ga + be;
                }
            }
        }
    }
    out
}

fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let cg = c / groups;
    let m = cg * spatial;
    let m_t = T::from_f64(m as f64);
    let eps = T::from_f64(NORM_EPS);
    let xd = x.data();
    let gd = g.data();
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for nn in 0..n {
        for gr in 0..groups {
            let start = (nn * c + gr * cg) * spatial;
            let mut mean = T::zero();
            for i in 0..m {
                mean = mean + xd[start + i];
            }
            mean = mean / m_t;
            let mut var = T::zero();
            for i in 0..m {
                let d = xd[start + i] - mean;
                var = var + d * d;
            }
            var = var / m_t;
            let inv = T::one() / (var + eps).sqrt();

            // dxhat = g * gamma; reduce over the group
            let mut sum1 = T::zero();
            let mut sum2 = T::zero();
            for cc in 0..cg {
                let ch = gr * cg + cc;
                let ga = gamma.data()[ch];
                for sp in 0..spatial {
                    let idx = start + cc * spatial + sp;
                    let xhat = (xd[idx] - mean) * inv;
                    let dxh = gd[idx] * ga;
                    sum1 = sum1 + dxh;
                    sum2 = sum2 + dxh * xhat;
                    dgamma.data_mut()[ch] = dgamma.data_mut()[ch] + gd[idx] * xhat;
                    dbeta.data_mut()[ch] = dbeta.data_mut()[ch] + gd[idx];
                }
            }
            for cc in 0..cg {
                let ch = gr * cg + cc;
                let ga = gamma.data()[ch];
                for sp in 0..spatial {
                    let idx = start + cc * spatial + sp;
                    let xhat = (xd[idx] - mean) * inv;
                    let dxh = gd[idx] * ga;
                    dx.data_mut()[idx] = (dxh * m_t - sum1 - xhat * sum2) * inv / m_t;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
