//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Node ids are assigned in creation order, so the tape is a DAG in
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! Binary elementwise ops broadcast only over the leading (batch) axis: an
//! operand whose shape equals the other's shape without its first axis (or
//! with a leading extent of 1) is repeated across the batch. Any other
//! mismatch is an error.
//!
//! ```
//! use csn_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsOverBatch,
    RhsOverBatch,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Log,
    Sqrt,
    Square,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Bcast),
    Unary(UnaryKind, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MaxScalar(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Reduce {
        x: Var,
        axes: Vec<usize>,
        scale: f64,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A tape is single-threaded; build one per forward pass (or per thread).
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A tape that never tracks gradients. Forward values are identical to a
    /// recording tape.
    pub fn no_grad() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (bc, shape) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsOverBatch => {
                let inner = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % inner]))
                    .collect()
            }
            Bcast::LhsOverBatch => {
                let inner = av.len();
                bv.iter()
                    .enumerate()
                    .map(|(i, &y)| f(av[i % inner], y))
                    .collect()
            }
        };
        let value = Tensor::new(shape, data)?;
        self.push(name, value, Op::Binary(kind, a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op, &[x])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Relu => ("relu", |v| if v > 0.0 { v } else { 0.0 }),
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Log => ("log", f64::ln),
            UnaryKind::Sqrt => ("sqrt", f64::sqrt),
            UnaryKind::Square => ("square", |v| v * v),
            UnaryKind::Neg => ("neg", |v| -v),
        };
        self.map(name, x, Op::Unary(kind, x), f)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    /// Square root. The backward rule uses 0 as the derivative at exactly 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("mul_scalar", x, Op::MulScalar(x, c), |v| v * c)
    }

    /// `max(x, c)` elementwise; the gradient flows only where `x > c`.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("max_scalar", x, Op::MaxScalar(x, c), |v| if v > c { v } else { c })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution (cross-correlation) with square kernels and zero
    /// padding. `x: [B, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.out_c] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geo.out_c),
                ));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = b.map(|b| self.value(b).data());
        let (ckk, hw_out) = (geo.col_rows(), geo.out_h * geo.out_w);
        let mut cols = vec![0.0; ckk * hw_out];
        let mut out = vec![0.0; geo.batch * geo.out_c * hw_out];
        for (img, dst) in xs
            .chunks_exact(geo.in_len())
            .zip(out.chunks_exact_mut(geo.out_c * hw_out))
        {
            geo.im2col(img, &mut cols);
            gemm(
                geo.out_c,
                ckk,
                hw_out,
                ws,
                (ckk as isize, 1),
                &cols,
                (hw_out as isize, 1),
                dst,
                false,
            );
            if let Some(bs) = bs {
                for (ch, plane) in dst.chunks_exact_mut(hw_out).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bs[ch]);
                }
            }
        }
        let value = Tensor::new(vec![geo.batch, geo.out_c, geo.out_h, geo.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    // ---- reductions and shape ops -------------------------------------------

    fn reduce(&mut self, name: &'static str, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape(name, format!("axes {axes:?} for {shape:?}")));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let (out_shape, map) = reduce_index(&shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(name, value, Op::Reduce { x, axes, scale }, &[x])
    }

    /// Sums over `axes`, dropping them. Reducing every axis yields shape `[1]`.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum", x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean", x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", self.shape(x))));
        }
        self.mean(x, &[2, 3])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates d`loss`/d`leaf` into every leaf that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        if self.grads.len() < nodes.len() {
            self.grads.resize(nodes.len(), None);
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let acc = self.grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                }
                &Op::Binary(kind, a, b, bc) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let (ia, ib) = (av.len(), bv.len());
                    let at = |i: usize| match bc {
                        Bcast::LhsOverBatch => i % ia,
                        _ => i,
                    };
                    let bt = |i: usize| match bc {
                        Bcast::RhsOverBatch => i % ib,
                        _ => i,
                    };
                    if nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, nodes, a);
                        for (i, &gi) in g.iter().enumerate() {
                            let y = bv[bt(i)];
                            ga[at(i)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gi,
                                BinaryKind::Mul => gi * y,
                                BinaryKind::Div => gi / y,
                            };
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, nodes, b);
                        for (i, &gi) in g.iter().enumerate() {
                            let (x, y) = (av[at(i)], bv[bt(i)]);
                            gb[bt(i)] += match kind {
                                BinaryKind::Add => gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * x,
                                BinaryKind::Div => -gi * x / (y * y),
                            };
                        }
                    }
                }
                &Op::Unary(kind, x) => {
                    let xv = nodes[x.0].value.data();
                    let out = node.value.data();
                    let gx = slot(&mut grads, nodes, x);
                    for i in 0..g.len() {
                        gx[i] += g[i]
                            * match kind {
                                UnaryKind::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                                UnaryKind::Log => 1.0 / xv[i],
                                UnaryKind::Sqrt => {
                                    if out[i] > 0.0 {
                                        0.5 / out[i]
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Square => 2.0 * xv[i],
                                UnaryKind::Neg => -1.0,
                            };
                    }
                }
                &Op::AddScalar(x) | &Op::Reshape(x) => {
                    let gx = slot(&mut grads, nodes, x);
                    gx.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                }
                &Op::MulScalar(x, c) => {
                    let gx = slot(&mut grads, nodes, x);
                    gx.iter_mut().zip(&g).for_each(|(a, v)| *a += v * c);
                }
                &Op::MaxScalar(x, c) => {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(&mut grads, nodes, x);
                    for i in 0..g.len() {
                        if xv[i] > c {
                            gx[i] += g[i];
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if nodes[a.0].requires_grad {
                        let bv = nodes[b.0].value.data();
                        let ga = slot(&mut grads, nodes, a);
                        // ga += g · bᵀ
                        gemm(m, nn, k, &g, (nn as isize, 1), bv, (1, nn as isize), ga, true);
                    }
                    if nodes[b.0].requires_grad {
                        let av = nodes[a.0].value.data();
                        let gb = slot(&mut grads, nodes, b);
                        // gb += aᵀ · g
                        gemm(k, m, nn, av, (1, k as isize), &g, (nn as isize, 1), gb, true);
                    }
                }
                &Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    let geo = ConvGeometry::new(
                        nodes[x.0].value.shape(),
                        nodes[w.0].value.shape(),
                        stride,
                        pad,
                    )?;
                    let (ckk, hw) = (geo.col_rows(), geo.out_h * geo.out_w);
                    let out_len = geo.out_c * hw;
                    if let Some(b) = b {
                        if nodes[b.0].requires_grad {
                            let gb = slot(&mut grads, nodes, b);
                            for gi in g.chunks_exact(out_len) {
                                for (ch, plane) in gi.chunks_exact(hw).enumerate() {
                                    gb[ch] += plane.iter().sum::<f64>();
                                }
                            }
                        }
                    }
                    let mut cols = vec![0.0; ckk * hw];
                    if nodes[w.0].requires_grad {
                        let mut gw = std::mem::take(slot(&mut grads, nodes, w));
                        for (img, gi) in xv.chunks_exact(geo.in_len()).zip(g.chunks_exact(out_len)) {
                            geo.im2col(img, &mut cols);
                            // gw[O, CKK] += g[O, HW] · colsᵀ
                            gemm(
                                geo.out_c,
                                hw,
                                ckk,
                                gi,
                                (hw as isize, 1),
                                &cols,
                                (1, hw as isize),
                                &mut gw,
                                true,
                            );
                        }
                        grads[w.0] = Some(gw);
                    }
                    if nodes[x.0].requires_grad {
                        let gx = slot(&mut grads, nodes, x);
                        for (dst, gi) in gx.chunks_exact_mut(geo.in_len()).zip(g.chunks_exact(out_len)) {
                            // cols[CKK, HW] = wᵀ · g
                            gemm(
                                ckk,
                                geo.out_c,
                                hw,
                                wv,
                                (1, ckk as isize),
                                gi,
                                (hw as isize, 1),
                                &mut cols,
                                false,
                            );
                            geo.col2im(&cols, dst);
                        }
                    }
                }
                Op::Reduce { x, axes, scale } => {
                    let (_, map) = reduce_index(nodes[x.0].value.shape(), axes);
                    let gx = slot(&mut grads, nodes, *x);
                    for (dst, &o) in gx.iter_mut().zip(&map) {
                        *dst += g[o] * scale;
                    }
                }
                Op::Concat { xs, axis } => {
                    let base = node.value.shape();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[axis + 1..].iter().product();
                    let row = base[*axis] * inner;
                    let mut offset = 0;
                    for &v in xs {
                        let len = nodes[v.0].value.shape()[*axis] * inner;
                        if nodes[v.0].requires_grad {
                            let gv = slot(&mut grads, nodes, v);
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + len];
                                gv[o * len..(o + 1) * len]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, s)| *a += s);
                            }
                        }
                        offset += len;
                    }
                }
                &Op::Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.value.shape()[axis] * inner;
                    let full = shape[axis] * inner;
                    let gx = slot(&mut grads, nodes, x);
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        gx[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(a, s)| *a += s);
                    }
                }
            }
        }
        Ok(())
    }

    /// Sign pattern of every relu / max-with-constant input relative to its
    /// kink. Two forward passes with equal signatures lie on the same smooth
    /// piece of the graph.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            let (x, c) = match node.op {
                Op::Unary(UnaryKind::Relu, x) => (x, 0.0),
                Op::MaxScalar(x, c) => (x, c),
                _ => continue,
            };
            sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v > c));
        }
        sig
    }

    /// Smallest distance of any relu / max input from its kink.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let (x, c) = match node.op {
                Op::Unary(UnaryKind::Relu, x) => (x, 0.0),
                Op::MaxScalar(x, c) => (x, c),
                _ => continue,
            };
            for &v in self.nodes[x.0].value.data() {
                best = best.min((v - c).abs());
            }
        }
        best
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn is_batch_of(big: &[usize], small: &[usize]) -> bool {
    if big.is_empty() {
        return false;
    }
    small == &big[1..] || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..])
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if is_batch_of(a, b) {
        Ok((Bcast::RhsOverBatch, a.to_vec()))
    } else if is_batch_of(b, a) {
        Ok((Bcast::LhsOverBatch, b.to_vec()))
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

/// Output shape after removing `axes`, and the flat output index of every
/// input element.
fn reduce_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1;
    let mut out_shape = Vec::new();
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            out_stride[d] = acc;
            acc *= shape[d];
        }
    }
    for (d, &n) in shape.iter().enumerate() {
        if !axes.contains(&d) {
            out_shape.push(n);
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    for _ in 0..numel {
        map.push(o);
        for d in (0..rank).rev() {
            idx[d] += 1;
            o += out_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            o -= out_stride[d] * shape[d];
            idx[d] = 0;
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    (out_shape, map)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {x:?} with kernel {w:?}")));
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {x:?}")));
        }
        Ok(ConvGeometry {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            k,
            stride,
            pad,
            out_h: (x[2] + 2 * pad - k) / stride + 1,
            out_w: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let hw = self.out_h * self.out_w;
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            let src = (iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w)
                                .then(|| (c * self.in_h + iy as usize) * self.in_w + ix as usize);
                            f(row * hw + oy * self.out_w + ox, row, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        self.for_each_tap(|dst, _, src| cols[dst] = src.map_or(0.0, |s| img[s]));
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        self.for_each_tap(|dst, _, src| {
            if let Some(s) = src {
                img[s] += cols[dst];
            }
        });
    }
}
