//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is written in terms of the differentiable operations
//! defined here, so gradients can themselves be differentiated. That is what
//! the gradient penalty of a Wasserstein critic and the unrolled temporary
//! model both rely on: call [`grad`] with `create_graph = true` and the
//! returned gradients stay attached to the graph.
//!
//! Graphs are built eagerly and are single-threaded (`Var` is `!Send`).
//! Node ids increase monotonically, so a descending sort of reachable nodes
//! is a valid reverse topological order.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{
    conv2d_forward, conv2d_input_grad, conv2d_weight_grad, gemm, numel, ConvGeom, Tensor,
};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    /// parents (x, w)
    Forward,
    /// parents (grad_out, w), produces an input-shaped tensor
    InputGrad,
    /// parents (x, grad_out), produces a weight-shaped tensor
    WeightGrad,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
    LeakyRelu(f64),
    Clamp(f64, f64),
    BroadcastTo,
    SumTo,
    Reshape,
    Transpose,
    MatMul,
    Conv(ConvKind, ConvGeom),
    Upsample2x,
    SumPool2x,
    Concat { axis: usize, sizes: Vec<usize> },
    Narrow { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
    InstanceNorm(f64),
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    fn make(value: Tensor, op: Op, parents: Vec<Var>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Self::leaf(value, false);
        }
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            op,
            parents,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients are tracked for.
    pub fn parameter(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        Var::make(self.0.value.map(f), op, vec![self.clone()])
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise {op:?} on mismatched shapes"
        );
        Var::make(
            self.0.value.zip_map(&other.0.value, f),
            op,
            vec![self.clone(), other.clone()],
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(Op::Scale(s), |a| a * s)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary(Op::Offset, |a| a + c)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Var {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(Op::LeakyRelu(slope), move |a| if a > 0.0 { a } else { a * slope })
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(lo, hi), move |a| a.clamp(lo, hi))
    }

    /// Numpy-style broadcast; `self` may have lower rank than `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = broadcast_tensor(&self.0.value, shape);
        Var::make(value, Op::BroadcastTo, vec![self.clone()])
    }

    /// Sum over broadcast axes so the result has `shape` (the inverse of
    /// [`Var::broadcast_to`]).
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_tensor(&self.0.value, shape);
        Var::make(value, Op::SumTo, vec![self.clone()])
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.0.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::make(self.0.value.reshape(shape), Op::Reshape, vec![self.clone()])
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&self) -> Var {
        Var::make(transpose_tensor(&self.0.value), Op::Transpose, vec![self.clone()])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (&self.0.value, &other.0.value);
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), k as isize, 1, b.data(), n as isize, 1, 0.0, &mut out);
        Var::make(
            Tensor::from_vec(&[m, n], out),
            Op::MatMul,
            vec![self.clone(), other.clone()],
        )
    }

    /// 2-D cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, weight: &Var, stride: usize, pad: usize) -> Var {
        let (x, w) = (self.shape(), weight.shape());
        assert!(x.len() == 4 && w.len() == 4, "conv2d expects NCHW input and OIHW kernel");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, kernel {w:?}");
        let geom = ConvGeom {
            batch: x[0],
            c_in: x[1],
            c_out: w[0],
            h: x[2],
            w: x[3],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        };
        conv_node(ConvKind::Forward, geom, self, weight)
    }

    /// Nearest-neighbour 2× upsampling of an NCHW value.
    pub fn upsample2x(&self) -> Var {
        Var::make(upsample2x_tensor(&self.0.value), Op::Upsample2x, vec![self.clone()])
    }

    /// Zero-mean, unit-variance over each `(n, c)` plane of an NCHW tensor,
    /// with `eps` added to the variance.
    pub fn instance_normalize(&self, eps: f64) -> Var {
        Var::make(instance_norm_tensor(&self.0.value, eps), Op::InstanceNorm(eps), vec![self.clone()])
    }

    /// Sum over non-overlapping 2×2 blocks (adjoint of [`Var::upsample2x`]).
    pub fn sum_pool2x(&self) -> Var {
        Var::make(sum_pool2x_tensor(&self.0.value), Op::SumPool2x, vec![self.clone()])
    }

    pub fn avg_pool2x(&self) -> Var {
        self.sum_pool2x().scale(0.25)
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.0.value).collect();
        let sizes = values.iter().map(|t| t.shape()[axis]).collect();
        Var::make(concat_tensors(&values, axis), Op::Concat { axis, sizes }, parts.to_vec())
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        Var::make(
            narrow_tensor(&self.0.value, axis, start, len),
            Op::Narrow { axis, start },
            vec![self.clone()],
        )
    }

    /// Place `self` at `start` inside a zero tensor of extent `total` along `axis`.
    fn embed(&self, axis: usize, start: usize, total: usize) -> Var {
        Var::make(
            embed_tensor(&self.0.value, axis, start, total),
            Op::Embed { axis, start },
            vec![self.clone()],
        )
    }

    /// Elementwise product with a fixed tensor.
    pub fn mul_const(&self, t: &Tensor) -> Var {
        self.mul(&Var::constant(t.clone()))
    }

    pub fn add_const(&self, t: &Tensor) -> Var {
        self.add(&Var::constant(t.clone()))
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn conv_node(kind: ConvKind, geom: ConvGeom, a: &Var, b: &Var) -> Var {
    let value = match kind {
        ConvKind::Forward => conv2d_forward(&geom, &a.0.value, &b.0.value),
        ConvKind::InputGrad => conv2d_input_grad(&geom, &a.0.value, &b.0.value),
        ConvKind::WeightGrad => conv2d_weight_grad(&geom, &a.0.value, &b.0.value),
    };
    Var::make(value, Op::Conv(kind, geom), vec![a.clone(), b.clone()])
}

fn padded_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    assert!(shape.len() <= rank, "cannot broadcast {shape:?} to rank {rank}");
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Strides into `small` for iterating over `big` (zero on broadcast axes).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let small = padded_shape(small, big.len());
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..big.len()).rev() {
        if small[i] == big[i] {
            strides[i] = acc;
        } else {
            assert_eq!(small[i], 1, "cannot broadcast {small:?} to {big:?}");
        }
        acc *= small[i];
    }
    strides
}

/// Visit every element of `big` in row-major order with the matching offset
/// into the broadcast source.
fn for_each_broadcast(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(big);
    if total == 0 {
        return;
    }
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let mut lin = 0usize;
    loop {
        for j in 0..inner {
            f(lin + j, src + j * inner_stride);
        }
        lin += inner;
        if lin >= total {
            break;
        }
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            src += strides[d];
            if idx[d] < big[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Broadcasts that repeat whole blocks: `small` equals `big` on a prefix and
/// is 1 on the remaining axes (`Trailing`), or the other way round.
#[derive(Clone, Copy)]
enum Blocked {
    /// Each source value fills `inner` consecutive outputs.
    Trailing { inner: usize },
    /// The whole source repeats.
    Leading,
}

fn blocked(small: &[usize], big: &[usize]) -> Option<Blocked> {
    let small = padded_shape(small, big.len());
    let split = (0..=big.len()).rev().find(|&k| small[..k] == big[..k])?;
    if small[split..].iter().all(|&d| d == 1) {
        return Some(Blocked::Trailing { inner: numel(&big[split..]) });
    }
    let lead = (0..=big.len()).find(|&k| small[k..] == big[k..])?;
    small[..lead].iter().all(|&d| d == 1).then_some(Blocked::Leading)
}

fn broadcast_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    let src = t.data();
    let total = numel(shape);
    let out = match blocked(t.shape(), shape) {
        Some(Blocked::Trailing { inner }) => {
            let mut out = Vec::with_capacity(total);
            for &v in src {
                out.extend(std::iter::repeat_n(v, inner));
            }
            out
        }
        Some(Blocked::Leading) if !src.is_empty() => src.repeat(total / src.len()),
        _ => {
            let strides = broadcast_strides(t.shape(), shape);
            let mut out = vec![0.0; total];
            for_each_broadcast(shape, &strides, |i, s| out[i] = src[s]);
            out
        }
    };
    Tensor::from_vec(shape, out)
}

fn sum_to_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    let src = t.data();
    let n = numel(shape);
    let out = match blocked(shape, t.shape()) {
        Some(Blocked::Trailing { inner }) if inner > 0 => src.chunks(inner).map(|c| c.iter().sum()).collect(),
        Some(Blocked::Leading) if n > 0 => {
            let mut out = vec![0.0; n];
            for chunk in src.chunks(n) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
        _ => {
            let strides = broadcast_strides(shape, t.shape());
            let mut out = vec![0.0; n];
            for_each_broadcast(t.shape(), &strides, |i, s| out[s] += src[i]);
            out
        }
    };
    Tensor::from_vec(shape, out)
}

fn transpose_tensor(t: &Tensor) -> Tensor {
    assert_eq!(t.rank(), 2, "transpose expects rank 2");
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

fn upsample2x_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 4, "upsample2x expects NCHW");
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let src = t.data();
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let v = src[(p * h + i) * w + j];
                let base = (p * 2 * h + 2 * i) * 2 * w + 2 * j;
                out[base] = v;
                out[base + 1] = v;
                out[base + 2 * w] = v;
                out[base + 2 * w + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out)
}

fn sum_pool2x_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert!(s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "sum_pool2x expects even NCHW");
    let (planes, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
    let src = t.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let base = (p * 2 * h + 2 * i) * 2 * w + 2 * j;
                out[(p * h + i) * w + j] =
                    src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], h, w], out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn concat_tensors(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        assert_eq!(p.rank(), first.len());
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch {:?} vs {first:?}", p.shape());
        }
    }
    let (outer, inner) = outer_inner(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_vec(&shape, out)
}

fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let full = t.shape()[axis];
    assert!(start + len <= full, "narrow out of range");
    let (outer, inner) = outer_inner(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::from_vec(&shape, out)
}

fn embed_tensor(t: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let len = t.shape()[axis];
    let (outer, inner) = outer_inner(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![0.0; numel(&shape)];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_vec(&shape, out)
}

fn planes(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "instance normalization expects NCHW");
    (s[0] * s[1], s[2] * s[3])
}

fn inv_std(plane: &[f64], eps: f64) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn instance_norm_tensor(x: &Tensor, eps: f64) -> Tensor {
    let (count, hw) = planes(x);
    let mut out = vec![0.0; count * hw];
    for (src, dst) in x.data().chunks(hw).zip(out.chunks_mut(hw)) {
        let (mean, inv) = inv_std(src, eps);
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// `dx = (g − mean(g) − y·mean(g·y)) / σ` per plane, on plain values.
fn instance_norm_vjp(x: &Tensor, y: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let (count, hw) = planes(x);
    let mut out = vec![0.0; count * hw];
    let n = hw as f64;
    for p in 0..count {
        let r = p * hw..(p + 1) * hw;
        let (_, inv) = inv_std(&x.data()[r.clone()], eps);
        let (yp, gp) = (&y.data()[r.clone()], &g.data()[r.clone()]);
        let mg = gp.iter().sum::<f64>() / n;
        let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, gv), yv) in out[r].iter_mut().zip(gp).zip(yp) {
            *d = inv * (gv - mg - yv * mgy);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// The same product built from differentiable primitives, used when the
/// gradient itself has to be differentiated.
fn instance_norm_vjp_graph(x: &Var, g: &Var, eps: f64) -> Var {
    let s = x.shape().to_vec();
    let stat = [s[0], s[1], 1, 1];
    let inv_hw = 1.0 / (s[2] * s[3]) as f64;
    let centered = x.sub(&x.sum_to(&stat).scale(inv_hw).broadcast_to(&s));
    let var = centered.square().sum_to(&stat).scale(inv_hw);
    let inv = Var::constant(Tensor::ones(&stat)).div(&var.offset(eps).sqrt());
    let y = centered.mul(&inv.broadcast_to(&s));
    let mg = g.sum_to(&stat).scale(inv_hw);
    let mgy = g.mul(&y).sum_to(&stat).scale(inv_hw);
    g.sub(&mg.broadcast_to(&s))
        .sub(&y.mul(&mgy.broadcast_to(&s)))
        .mul(&inv.broadcast_to(&s))
}

/// Gradients of `node` (value `out`, inputs `parents`) given upstream `g`.
fn backward_rule(
    op: &Op,
    out: &Var,
    parents: &[Var],
    needs: &[bool],
    g: &Var,
) -> Vec<Option<Var>> {
    let need = |i: usize| needs[i];
    let mask = |f: &dyn Fn(f64) -> f64| Var::constant(parents[0].value().map(f));
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg())],
        Op::Mul => vec![
            need(0).then(|| g.mul(&parents[1])),
            need(1).then(|| g.mul(&parents[0])),
        ],
        Op::Div => vec![
            need(0).then(|| g.div(&parents[1])),
            need(1).then(|| g.mul(out).div(&parents[1]).neg()),
        ],
        Op::Scale(s) => vec![Some(g.scale(*s))],
        Op::Offset => vec![Some(g.clone())],
        Op::Tanh => vec![Some(g.mul(&out.square().neg().offset(1.0)))],
        Op::Sigmoid => vec![Some(g.mul(&out.mul(&out.neg().offset(1.0))))],
        Op::Exp => vec![Some(g.mul(out))],
        Op::Log => vec![Some(g.div(&parents[0]))],
        Op::Sqrt => vec![Some(g.div(out).scale(0.5))],
        Op::Abs => vec![Some(g.mul(&mask(&|a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        })))],
        Op::LeakyRelu(slope) => {
            let s = *slope;
            vec![Some(g.mul(&mask(&|a| if a > 0.0 { 1.0 } else { s })))]
        }
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![Some(g.mul(&mask(&|a| if a >= lo && a <= hi { 1.0 } else { 0.0 })))]
        }
        Op::BroadcastTo => vec![Some(g.sum_to(parents[0].shape()))],
        Op::SumTo => vec![Some(g.broadcast_to(parents[0].shape()))],
        Op::Reshape => vec![Some(g.reshape(parents[0].shape()))],
        Op::Transpose => vec![Some(g.transpose())],
        Op::MatMul => vec![
            need(0).then(|| g.matmul(&parents[1].transpose())),
            need(1).then(|| parents[0].transpose().matmul(g)),
        ],
        Op::Conv(kind, geom) => {
            let (a, b) = (&parents[0], &parents[1]);
            match kind {
                ConvKind::Forward => vec![
                    need(0).then(|| conv_node(ConvKind::InputGrad, *geom, g, b)),
                    need(1).then(|| conv_node(ConvKind::WeightGrad, *geom, a, g)),
                ],
                ConvKind::InputGrad => vec![
                    need(0).then(|| conv_node(ConvKind::Forward, *geom, g, b)),
                    need(1).then(|| conv_node(ConvKind::WeightGrad, *geom, g, a)),
                ],
                ConvKind::WeightGrad => vec![
                    need(0).then(|| conv_node(ConvKind::InputGrad, *geom, b, g)),
                    need(1).then(|| conv_node(ConvKind::Forward, *geom, a, g)),
                ],
            }
        }
        Op::Upsample2x => vec![Some(g.sum_pool2x())],
        Op::SumPool2x => vec![Some(g.upsample2x())],
        Op::Concat { axis, sizes } => {
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let piece = need(i).then(|| g.narrow(*axis, start, len));
                    start += len;
                    piece
                })
                .collect()
        }
        Op::Narrow { axis, start } => {
            vec![Some(g.embed(*axis, *start, parents[0].shape()[*axis]))]
        }
        Op::Embed { axis, start } => vec![Some(g.narrow(*axis, *start, out.shape()[*axis]))],
        Op::InstanceNorm(eps) => {
            let x = &parents[0];
            if x.requires_grad() || g.requires_grad() {
                vec![Some(instance_norm_vjp_graph(x, g, *eps))]
            } else {
                vec![Some(Var::constant(instance_norm_vjp(x.value(), out.value(), g.value(), *eps)))]
            }
        }
    }
}

fn reverse_topological(root: &Var) -> Vec<Var> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        nodes.push(v);
    }
    nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));
    nodes
}

fn run_backward(root: &Var, seed: Var, create_graph: bool) -> HashMap<u64, Var> {
    let mut grads: HashMap<u64, Var> = HashMap::new();
    let mut leaves = HashMap::new();
    grads.insert(root.id(), seed);
    for node in reverse_topological(root) {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if matches!(node.0.op, Op::Leaf) {
            leaves.insert(node.id(), g);
            continue;
        }
        let needs: Vec<bool> = node.0.parents.iter().map(Var::requires_grad).collect();
        let (out, parents) = if create_graph {
            (node.clone(), node.0.parents.clone())
        } else {
            (
                node.detach(),
                node.0.parents.iter().map(Var::detach).collect(),
            )
        };
        let parent_grads = backward_rule(&node.0.op, &out, &parents, &needs, &g);
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() {
                continue;
            }
            let pg = if create_graph { pg } else { pg.detach() };
            match grads.remove(&p.id()) {
                Some(acc) => grads.insert(p.id(), acc.add(&pg)),
                None => grads.insert(p.id(), pg),
            };
        }
    }
    leaves
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph`, the returned values are differentiable functions of
/// the graph's leaves. Inputs that `output` does not depend on get zeros.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
    let seed = Var::constant(Tensor::ones(output.shape()));
    let grads = run_backward(output, seed, create_graph);
    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect()
}

/// Plain first-order gradients as tensors.
pub fn grad_values(output: &Var, wrt: &[&Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(shape: &[usize], salt: usize) -> Tensor {
        let n = numel(shape);
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|i| (((i + salt) * 2654435761usize % 1000) as f64 / 1000.0) - 0.45)
                .collect(),
        )
    }

    /// Central-difference check of `f`'s gradient at `x`.
    fn check_grad(x: &Tensor, f: &dyn Fn(&Var) -> Var, tol: f64) {
        let v = Var::parameter(x.clone());
        let analytic = grad_values(&f(&v), &[&v]).remove(0);
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fp = f(&Var::parameter(plus)).item();
            let fm = f(&Var::parameter(minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(
                err < tol || (a - numeric).abs() < 1e-8,
                "index {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    /// Check the gradient of `x -> sum(grad(f)(x) * w)`, i.e. a Hessian-vector product.
    fn check_double(x: &Tensor, f: &dyn Fn(&Var) -> Var, tol: f64) {
        let w = probe(x.shape(), 17);
        let hvp = |v: &Var| {
            let g = grad(&f(v), &[v], true).remove(0);
            g.mul_const(&w).sum()
        };
        check_grad(x, &hvp, tol);
    }

    #[test]
    fn elementwise_first_and_second_order() {
        let x = probe(&[2, 3], 3);
        let pos = x.map(|v| v.abs() + 0.3);
        check_grad(&x, &|v| v.tanh().mul(&v.sigmoid()).sum(), 1e-6);
        check_grad(&pos, &|v| v.log().add(&v.sqrt()).div(&v.exp()).sum(), 1e-6);
        check_grad(&x, &|v| v.leaky_relu(0.2).scale(3.0).offset(1.0).square().sum(), 1e-6);
        check_double(&x, &|v| v.tanh().mul(&v.sigmoid()).sum(), 1e-5);
        check_double(&pos, &|v| v.sqrt().div(&v.exp()).log().sum(), 1e-5);
    }

    #[test]
    fn broadcast_and_reductions() {
        let b = probe(&[1, 3, 1, 1], 5);
        let big = probe(&[2, 3, 2, 2], 9);
        check_grad(&b, &|v| v.broadcast_to(&[2, 3, 2, 2]).mul_const(&big).square().sum(), 1e-6);
        check_grad(&big, &|v| v.sum_to(&[1, 3, 1, 1]).square().sum(), 1e-6);
        check_double(&big, &|v| v.sum_to(&[2, 1, 1, 1]).sqrt_safe().sum(), 1e-5);
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = Var::constant(t).sum_to(&[2, 1]);
        assert_eq!(s.value().data(), &[3.0, 7.0]);
    }

    impl Var {
        fn sqrt_safe(&self) -> Var {
            self.square().offset(1.0).sqrt()
        }
    }

    #[test]
    fn matmul_and_transpose() {
        let a = probe(&[3, 4], 1);
        let b = probe(&[4, 2], 2);
        check_grad(&a, &|v| v.matmul(&Var::constant(b.clone())).tanh().sum(), 1e-6);
        check_grad(&b, &|v| Var::constant(a.clone()).matmul(v).square().sum(), 1e-6);
        check_double(&a, &|v| v.matmul(&v.transpose()).tanh().sum(), 1e-5);
    }

    #[test]
    fn convolution_all_orders() {
        let x = probe(&[2, 2, 6, 6], 1);
        let w = probe(&[3, 2, 3, 3], 4);
        let wc = w.clone();
        check_grad(&x, &|v| v.conv2d(&Var::constant(wc.clone()), 2, 1).tanh().sum(), 1e-6);
        let xc = x.clone();
        check_grad(&w, &|v| Var::constant(xc.clone()).conv2d(v, 1, 1).square().sum(), 1e-6);
        // gradient-penalty shape: d/dw of ||d/dx f(x,w)||²
        let xc = x.clone();
        check_grad(
            &probe(&[2, 2, 3, 3], 8),
            &|wv| {
                let xv = Var::parameter(xc.clone());
                let out = xv.conv2d(wv, 1, 1).leaky_relu(0.2).conv2d(wv, 1, 1).tanh().sum();
                grad(&out, &[&xv], true).remove(0).square().sum()
            },
            1e-5,
        );
        let wc = w.clone();
        check_double(&x, &|v| v.conv2d(&Var::constant(wc.clone()), 1, 1).tanh().sum(), 1e-5);
    }

    #[test]
    fn fused_instance_norm_matches_its_composition() {
        let x = probe(&[2, 3, 3, 4], 6);
        let w = probe(&[2, 3, 3, 4], 11);
        let composed = |v: &Var| {
            let m = v.sum_to(&[2, 3, 1, 1]).scale(1.0 / 12.0).broadcast_to(&[2, 3, 3, 4]);
            let c = v.sub(&m);
            let var = c.square().sum_to(&[2, 3, 1, 1]).scale(1.0 / 12.0).offset(1e-5).sqrt();
            c.div(&var.broadcast_to(&[2, 3, 3, 4]))
        };
        let fused = Var::constant(x.clone()).instance_normalize(1e-5);
        let plain = composed(&Var::constant(x.clone()));
        assert!(fused.value().zip_map(plain.value(), |a, b| (a - b).abs()).max_abs() < 1e-12);
        let wc = w.clone();
        check_grad(&x, &|v| v.instance_normalize(1e-5).mul_const(&wc).tanh().sum(), 1e-5);
        let wc = w.clone();
        check_double(&x, &|v| v.instance_normalize(1e-5).mul_const(&wc).tanh().sum(), 1e-4);
    }

    #[test]
    fn structural_ops() {
        let x = probe(&[1, 2, 4, 4], 2);
        let y = probe(&[1, 3, 4, 4], 6);
        let yc = y.clone();
        check_grad(
            &x,
            &|v| {
                let c = Var::concat(&[v.clone(), Var::constant(yc.clone())], 1);
                c.narrow(1, 1, 3).upsample2x().tanh().sum_pool2x().square().sum()
            },
            1e-6,
        );
        check_grad(&x, &|v| v.reshape(&[2, 16]).transpose().tanh().sum(), 1e-6);
        check_double(&x, &|v| v.avg_pool2x().upsample2x().tanh().sum(), 1e-5);
    }

    #[test]
    fn constants_do_not_build_graphs() {
        let a = Var::constant(Tensor::ones(&[2]));
        let b = a.add(&a).tanh();
        assert!(!b.requires_grad());
        let p = Var::parameter(Tensor::ones(&[2]));
        let unused = Var::parameter(Tensor::ones(&[3]));
        let g = grad(&p.square().sum(), &[&p, &unused], false);
        assert_eq!(g[0].value().data(), &[2.0, 2.0]);
        assert_eq!(g[1].value().data(), &[0.0, 0.0, 0.0]);
        assert!(!g[0].requires_grad());
    }

    #[test]
    fn blocked_broadcasts_agree_with_the_strided_walk() {
        let big = [2, 3, 4, 5];
        for small in [&[2, 3, 1, 1][..], &[1, 3, 4, 5], &[3, 4, 5], &[3, 1, 5], &[2, 1, 4, 1], &[1], &[]] {
            let t = probe(small, 3);
            let strides = broadcast_strides(small, &big);
            let mut expect = vec![0.0; numel(&big)];
            for_each_broadcast(&big, &strides, |i, s| expect[i] = t.data()[s]);
            assert_eq!(broadcast_tensor(&t, &big).data(), &expect[..], "{small:?}");

            let wide = probe(&big, 5);
            let mut sums = vec![0.0; numel(small)];
            for_each_broadcast(&big, &strides, |i, s| sums[s] += wide.data()[i]);
            let got = sum_to_tensor(&wide, small);
            for (a, b) in got.data().iter().zip(&sums) {
                assert!((a - b).abs() < 1e-12, "{small:?}");
            }
        }
    }
}
