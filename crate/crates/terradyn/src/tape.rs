//! Reverse-mode automatic differentiation on a flat recording tape.
//!
//! Forward passes append nodes to a tape; each node owns a segment of one
//! shared value buffer, so a node can hold a scalar or a whole vector
//! (layer activations, batched matmul outputs) without per-element
//! allocation. `backward_into` replays the tape in reverse and accumulates
//! gradients of the registered parameter leaves into a caller-owned buffer
//! laid out like the parameter vector itself.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub type NodeId = u32;

/// Wrap an angle to the interval (-pi, pi]. Values already in range pass
/// through unchanged.
pub fn wrap_pi(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x > -PI && x <= PI {
        return x;
    }
    PI - (PI - x).rem_euclid(2.0 * PI)
}

#[derive(Clone)]
enum Op {
    /// Constant leaf; gradients stop here.
    Leaf,
    /// Leaf bound to a slice of the external parameter vector.
    Param { src: u32 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddC { a: NodeId },
    MulC { a: NodeId, c: f64 },
    Neg { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    Atan { a: NodeId },
    Exp { a: NodeId },
    Sqrt { a: NodeId },
    Square { a: NodeId },
    Recip { a: NodeId },
    Max { a: NodeId, b: NodeId },
    MaxC { a: NodeId, c: f64 },
    ClampC { a: NodeId, lo: f64, hi: f64 },
    WrapPi { a: NodeId },
    /// y = W x with W row-major (m x k) and x column-major (k x n).
    MatMul { w: NodeId, x: NodeId, m: u32, k: u32, n: u32 },
    /// y = a + b broadcast column-wise: a is (m x n) column-major, b has len m.
    AddCols { a: NodeId, b: NodeId, m: u32, n: u32 },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: u32 },
    Dot { a: NodeId, b: NodeId },
    Sum { a: NodeId },
}

struct Node {
    op: Op,
    off: u32,
    len: u32,
}

struct TapeInner {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    consumed: bool,
}

/// Recording tape. Create one per forward pass and drop it after backward.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Scalar variable: a length-1 node handle.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Vector variable: a node handle of arbitrary length.
#[derive(Clone, Copy)]
pub struct VVar<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(1024, 4096)
    }

    /// Pre-size the node table and value buffer for a known workload.
    pub fn with_capacity(nodes: usize, buf: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                vals: Vec::with_capacity(buf),
                grads: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: Op, values: &[f64]) -> NodeId {
        assert!(!values.is_empty(), "zero-length tape node");
        let mut inner = self.inner.borrow_mut();
        let off = inner.vals.len() as u32;
        inner.vals.extend_from_slice(values);
        let id = inner.nodes.len() as NodeId;
        inner.nodes.push(Node { op, off, len: values.len() as u32 });
        id
    }

    /// Push a node whose values are computed in place to avoid a temporary.
    fn push_with<F: FnOnce(&mut [f64], &[f64])>(&self, op: Op, len: usize, fill: F) -> NodeId {
        assert!(len > 0, "zero-length tape node");
        let mut inner = self.inner.borrow_mut();
        let off = inner.vals.len();
        inner.vals.resize(off + len, 0.0);
        let (head, tail) = inner.vals.split_at_mut(off);
        fill(tail, head);
        let id = inner.nodes.len() as NodeId;
        inner.nodes.push(Node { op, off: off as u32, len: len as u32 });
        id
    }

    fn node_meta(&self, id: NodeId) -> (usize, usize) {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id as usize];
        (n.off as usize, n.len as usize)
    }

    pub fn constant(&self, v: f64) -> Var<'_> {
        Var { tape: self, id: self.push(Op::Leaf, &[v]) }
    }

    pub fn constants(&self, v: &[f64]) -> VVar<'_> {
        VVar { tape: self, id: self.push(Op::Leaf, v) }
    }

    /// Register a slice of the external parameter vector as a leaf.
    /// Gradients for it are accumulated by `backward_into` at `offset`.
    pub fn param_slice<'t>(&'t self, theta: &[f64], offset: usize, len: usize) -> VVar<'t> {
        let id = self.push(Op::Param { src: offset as u32 }, &theta[offset..offset + len]);
        VVar { tape: self, id }
    }

    pub fn param_scalar<'t>(&'t self, theta: &[f64], offset: usize) -> Var<'t> {
        let id = self.push(Op::Param { src: offset as u32 }, &theta[offset..offset + 1]);
        Var { tape: self, id }
    }

    fn values_of(&self, id: NodeId) -> Vec<f64> {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id as usize];
        inner.vals[n.off as usize..(n.off + n.len) as usize].to_vec()
    }

    /// Elementwise binary op with scalar broadcast on either side.
    fn binary(&self, op_kind: u8, a: NodeId, b: NodeId) -> NodeId {
        let (aoff, alen) = self.node_meta(a);
        let (boff, blen) = self.node_meta(b);
        let len = if alen == blen {
            alen
        } else if blen == 1 {
            alen
        } else if alen == 1 {
            blen
        } else {
            panic!("elementwise op on incompatible lengths {alen} and {blen}");
        };
        let op = match op_kind {
            0 => Op::Add { a, b },
            1 => Op::Sub { a, b },
            2 => Op::Mul { a, b },
            3 => Op::Div { a, b },
            4 => Op::Max { a, b },
            5 => Op::Dot { a, b },
            _ => unreachable!(),
        };
        if op_kind == 5 {
            assert_eq!(alen, blen, "dot on unequal lengths");
            return self.push_with(op, 1, |out, vals| {
                let mut acc = 0.0;
                for i in 0..alen {
                    acc += vals[aoff + i] * vals[boff + i];
                }
                out[0] = acc;
            });
        }
        self.push_with(op, len, |out, vals| {
            for (i, o) in out.iter_mut().enumerate() {
                let av = vals[aoff + if alen == 1 { 0 } else { i }];
                let bv = vals[boff + if blen == 1 { 0 } else { i }];
                *o = match op_kind {
                    0 => av + bv,
                    1 => av - bv,
                    2 => av * bv,
                    3 => av / bv,
                    4 => av.max(bv),
                    _ => unreachable!(),
                };
            }
        })
    }

    fn unary<F: Fn(f64) -> f64>(&self, op: Op, a: NodeId, f: F) -> NodeId {
        let (aoff, alen) = self.node_meta(a);
        self.push_with(op, alen, |out, vals| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(vals[aoff + i]);
            }
        })
    }

    fn matmul_node(&self, w: NodeId, x: NodeId, m: usize, k: usize, n: usize) -> NodeId {
        assert_ne!(w, x, "matmul operands must be distinct nodes");
        let (woff, wlen) = self.node_meta(w);
        let (xoff, xlen) = self.node_meta(x);
        assert_eq!(wlen, m * k, "matmul weight length mismatch");
        assert_eq!(xlen, k * n, "matmul input length mismatch");
        let op = Op::MatMul { w, x, m: m as u32, k: k as u32, n: n as u32 };
        self.push_with(op, m * n, |out, vals| {
            gemm(
                m, k, n,
                1.0,
                &vals[woff..woff + wlen], k as isize, 1,
                &vals[xoff..xoff + xlen], 1, k as isize,
                0.0,
                out, 1, m as isize,
            );
        })
    }

    fn concat_node(&self, parts: &[NodeId]) -> NodeId {
        let metas: Vec<(usize, usize)> = parts.iter().map(|&p| self.node_meta(p)).collect();
        let total: usize = metas.iter().map(|&(_, l)| l).sum();
        let op = Op::Concat { parts: parts.to_vec() };
        self.push_with(op, total, |out, vals| {
            let mut at = 0;
            for &(off, len) in &metas {
                out[at..at + len].copy_from_slice(&vals[off..off + len]);
                at += len;
            }
        })
    }

    /// Reverse pass from a scalar loss. Parameter gradients are added into
    /// `grad_out`, which must be laid out like the parameter vector passed
    /// to `param_slice` / `param_scalar`. Panics if called twice.
    pub fn backward_into(&self, loss: Var<'_>, grad_out: &mut [f64]) {
        let inner = &mut *self.inner.borrow_mut();
        assert!(!inner.consumed, "backward called twice on one tape");
        inner.consumed = true;
        let TapeInner { nodes, vals, grads, .. } = inner;
        grads.clear();
        grads.resize(vals.len(), 0.0);
        {
            let loss_node = &nodes[loss.id as usize];
            assert_eq!(loss_node.len, 1, "backward seed must be a scalar");
            grads[loss_node.off as usize] = 1.0;
        }

        // Segment bounds by node id, for split borrows below.
        let seg = |id: NodeId| -> (usize, usize) {
            let n = &nodes[id as usize];
            (n.off as usize, n.len as usize)
        };

        for idx in (0..nodes.len()).rev() {
            let (yoff, ylen) = (nodes[idx].off as usize, nodes[idx].len as usize);
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Param { src } => {
                    let src = *src as usize;
                    for i in 0..ylen {
                        grad_out[src + i] += grads[yoff + i];
                    }
                }
                Op::Add { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, blen) = seg(*b);
                    for i in 0..ylen {
                        let g = grads[yoff + i];
                        grads[aoff + if alen == 1 { 0 } else { i }] += g;
                        grads[boff + if blen == 1 { 0 } else { i }] += g;
                    }
                }
                Op::Sub { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, blen) = seg(*b);
                    for i in 0..ylen {
                        let g = grads[yoff + i];
                        grads[aoff + if alen == 1 { 0 } else { i }] += g;
                        grads[boff + if blen == 1 { 0 } else { i }] -= g;
                    }
                }
                Op::Mul { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, blen) = seg(*b);
                    for i in 0..ylen {
                        let g = grads[yoff + i];
                        let ai = aoff + if alen == 1 { 0 } else { i };
                        let bi = boff + if blen == 1 { 0 } else { i };
                        grads[ai] += g * vals[bi];
                        grads[bi] += g * vals[ai];
                    }
                }
                Op::Div { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, blen) = seg(*b);
                    for i in 0..ylen {
                        let g = grads[yoff + i];
                        let ai = aoff + if alen == 1 { 0 } else { i };
                        let bi = boff + if blen == 1 { 0 } else { i };
                        let bv = vals[bi];
                        grads[ai] += g / bv;
                        grads[bi] -= g * vals[ai] / (bv * bv);
                    }
                }
                Op::AddC { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i];
                    }
                }
                Op::MulC { a, c } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i] * c;
                    }
                }
                Op::Neg { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] -= grads[yoff + i];
                    }
                }
                Op::Tanh { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        let y = vals[yoff + i];
                        grads[aoff + i] += grads[yoff + i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        let y = vals[yoff + i];
                        grads[aoff + i] += grads[yoff + i] * y * (1.0 - y);
                    }
                }
                Op::Sin { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i] * vals[aoff + i].cos();
                    }
                }
                Op::Cos { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] -= grads[yoff + i] * vals[aoff + i].sin();
                    }
                }
                Op::Atan { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        let x = vals[aoff + i];
                        grads[aoff + i] += grads[yoff + i] / (1.0 + x * x);
                    }
                }
                Op::Exp { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i] * vals[yoff + i];
                    }
                }
                Op::Sqrt { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i] * 0.5 / vals[yoff + i];
                    }
                }
                Op::Square { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i] * 2.0 * vals[aoff + i];
                    }
                }
                Op::Recip { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        let y = vals[yoff + i];
                        grads[aoff + i] -= grads[yoff + i] * y * y;
                    }
                }
                Op::Max { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, blen) = seg(*b);
                    for i in 0..ylen {
                        let ai = aoff + if alen == 1 { 0 } else { i };
                        let bi = boff + if blen == 1 { 0 } else { i };
                        // Ties route the gradient to the first operand.
                        if vals[ai] >= vals[bi] {
                            grads[ai] += grads[yoff + i];
                        } else {
                            grads[bi] += grads[yoff + i];
                        }
                    }
                }
                Op::MaxC { a, c } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        if vals[aoff + i] >= *c {
                            grads[aoff + i] += grads[yoff + i];
                        }
                    }
                }
                Op::ClampC { a, lo, hi } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        let x = vals[aoff + i];
                        if x >= *lo && x <= *hi {
                            grads[aoff + i] += grads[yoff + i];
                        }
                    }
                }
                Op::WrapPi { a } => {
                    let (aoff, _) = seg(*a);
                    for i in 0..ylen {
                        grads[aoff + i] += grads[yoff + i];
                    }
                }
                Op::MatMul { w, x, m, k, n } => {
                    let (m, k, n) = (*m as usize, *k as usize, *n as usize);
                    let (woff, wlen) = seg(*w);
                    let (xoff, xlen) = seg(*x);
                    // Disjoint segments: copy out dY once, then accumulate.
                    let dy: Vec<f64> = grads[yoff..yoff + ylen].to_vec();
                    let xv: Vec<f64> = vals[xoff..xoff + xlen].to_vec();
                    let wv: Vec<f64> = vals[woff..woff + wlen].to_vec();
                    // dW += dY X^T  (m x k, row-major)
                    gemm(
                        m, n, k,
                        1.0,
                        &dy, 1, m as isize,
                        &xv, k as isize, 1,
                        1.0,
                        &mut grads[woff..woff + wlen], k as isize, 1,
                    );
                    // dX += W^T dY  (k x n, column-major)
                    gemm(
                        k, m, n,
                        1.0,
                        &wv, 1, k as isize,
                        &dy, 1, m as isize,
                        1.0,
                        &mut grads[xoff..xoff + xlen], 1, k as isize,
                    );
                }
                Op::AddCols { a, b, m, n } => {
                    let (m, n) = (*m as usize, *n as usize);
                    let (aoff, _) = seg(*a);
                    let (boff, _) = seg(*b);
                    for j in 0..n {
                        for i in 0..m {
                            let g = grads[yoff + j * m + i];
                            grads[aoff + j * m + i] += g;
                            grads[boff + i] += g;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut at = yoff;
                    for &p in parts {
                        let (poff, plen) = seg(p);
                        for i in 0..plen {
                            grads[poff + i] += grads[at + i];
                        }
                        at += plen;
                    }
                }
                Op::Slice { a, start } => {
                    let (aoff, _) = seg(*a);
                    let s = *start as usize;
                    for i in 0..ylen {
                        grads[aoff + s + i] += grads[yoff + i];
                    }
                }
                Op::Dot { a, b } => {
                    let (aoff, alen) = seg(*a);
                    let (boff, _) = seg(*b);
                    let g = grads[yoff];
                    for i in 0..alen {
                        grads[aoff + i] += g * vals[boff + i];
                        grads[boff + i] += g * vals[aoff + i];
                    }
                }
                Op::Sum { a } => {
                    let (aoff, alen) = seg(*a);
                    let g = grads[yoff];
                    for i in 0..alen {
                        grads[aoff + i] += g;
                    }
                }
            }
        }
    }

    /// Gradient segment of a node after `backward_into`; for tests.
    pub fn grad_of(&self, id: NodeId) -> Vec<f64> {
        let inner = self.inner.borrow();
        assert!(inner.consumed, "grad_of before backward");
        let n = &inner.nodes[id as usize];
        inner.grads[n.off as usize..(n.off + n.len) as usize].to_vec()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Strided double-precision matrix multiply: C = alpha A B + beta C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize, k: usize, n: usize,
    alpha: f64,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64,
    c: &mut [f64], rsc: isize, csc: isize,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn value(self) -> f64 {
        self.tape.values_of(self.id)[0]
    }

    /// View this scalar as a length-1 vector, e.g. for concatenation.
    pub fn vec(self) -> VVar<'t> {
        VVar { tape: self.tape, id: self.id }
    }

    fn unary_op(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.unary(op, self.id, f) }
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_op(Op::Tanh { a: self.id }, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_op(Op::Sigmoid { a: self.id }, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary_op(Op::Sin { a: self.id }, f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary_op(Op::Cos { a: self.id }, f64::cos)
    }

    pub fn atan(self) -> Var<'t> {
        self.unary_op(Op::Atan { a: self.id }, f64::atan)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(Op::Exp { a: self.id }, f64::exp)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary_op(Op::Sqrt { a: self.id }, f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary_op(Op::Square { a: self.id }, |x| x * x)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary_op(Op::Recip { a: self.id }, f64::recip)
    }

    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(4, self.id, other.id) }
    }

    pub fn max_c(self, c: f64) -> Var<'t> {
        self.unary_op(Op::MaxC { a: self.id, c }, |x| x.max(c))
    }

    pub fn clamp_c(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary_op(Op::ClampC { a: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn wrap_pi(self) -> Var<'t> {
        self.unary_op(Op::WrapPi { a: self.id }, wrap_pi)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(0, self.id, rhs.id) }
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(1, self.id, rhs.id) }
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(2, self.id, rhs.id) }
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(3, self.id, rhs.id) }
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary_op(Op::AddC { a: self.id }, |x| x + c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary_op(Op::AddC { a: self.id }, |x| x - c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary_op(Op::MulC { a: self.id, c }, |x| x * c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        let inv = 1.0 / c;
        self.unary_op(Op::MulC { a: self.id, c: inv }, |x| x * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary_op(Op::Neg { a: self.id }, |x| -x)
    }
}

impl<'t> VVar<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn len(self) -> usize {
        self.tape.node_meta(self.id).1
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn values(self) -> Vec<f64> {
        self.tape.values_of(self.id)
    }

    /// Scalar view of one element.
    pub fn at(self, i: usize) -> Var<'t> {
        assert!(i < self.len());
        let id = self.tape.push_via_slice(self.id, i, 1);
        Var { tape: self.tape, id }
    }

    pub fn slice(self, start: usize, len: usize) -> VVar<'t> {
        assert!(start + len <= self.len());
        let id = self.tape.push_via_slice(self.id, start, len);
        VVar { tape: self.tape, id }
    }

    pub fn tanh(self) -> VVar<'t> {
        VVar { tape: self.tape, id: self.tape.unary(Op::Tanh { a: self.id }, self.id, f64::tanh) }
    }

    pub fn sigmoid(self) -> VVar<'t> {
        let id = self.tape.unary(Op::Sigmoid { a: self.id }, self.id, |x| 1.0 / (1.0 + (-x).exp()));
        VVar { tape: self.tape, id }
    }

    /// y = self (m x k row-major) times x (k x n column-major).
    pub fn matmul(self, x: VVar<'t>, m: usize, k: usize, n: usize) -> VVar<'t> {
        VVar { tape: self.tape, id: self.tape.matmul_node(self.id, x.id, m, k, n) }
    }

    /// Column-broadcast add: self is (m x n) column-major, b has length m.
    pub fn add_cols(self, b: VVar<'t>, m: usize, n: usize) -> VVar<'t> {
        assert_eq!(self.len(), m * n);
        assert_eq!(b.len(), m);
        let (aoff, _) = self.tape.node_meta(self.id);
        let (boff, _) = self.tape.node_meta(b.id);
        let op = Op::AddCols { a: self.id, b: b.id, m: m as u32, n: n as u32 };
        let id = self.tape.push_with(op, m * n, |out, vals| {
            for j in 0..n {
                for i in 0..m {
                    out[j * m + i] = vals[aoff + j * m + i] + vals[boff + i];
                }
            }
        });
        VVar { tape: self.tape, id }
    }

    pub fn dot(self, other: VVar<'t>) -> Var<'t> {
        Var { tape: self.tape, id: self.tape.binary(5, self.id, other.id) }
    }

    pub fn sum(self) -> Var<'t> {
        let (aoff, alen) = self.tape.node_meta(self.id);
        let id = self.tape.push_with(Op::Sum { a: self.id }, 1, |out, vals| {
            out[0] = vals[aoff..aoff + alen].iter().sum();
        });
        Var { tape: self.tape, id }
    }
}

impl Tape {
    fn push_via_slice(&self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (aoff, _) = self.node_meta(a);
        self.push_with(Op::Slice { a, start: start as u32 }, len, |out, vals| {
            out.copy_from_slice(&vals[aoff + start..aoff + start + len]);
        })
    }

    pub fn concat<'t>(&'t self, parts: &[VVar<'t>]) -> VVar<'t> {
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        VVar { tape: self, id: self.concat_node(&ids) }
    }
}

/// Numeric scalar usable by the generic dynamics code: implemented by plain
/// `f64` for simulation and by `Var` for differentiable training rollouts.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan(self) -> Self;
    fn exp(self) -> Self;
    fn square(self) -> Self;
    fn recip(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn max_c(self, c: f64) -> Self;
    fn clamp_c(self, lo: f64, hi: f64) -> Self;
    fn wrap_pi(self) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn atan(self) -> f64 {
        f64::atan(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn square(self) -> f64 {
        self * self
    }
    fn recip(self) -> f64 {
        f64::recip(self)
    }
    fn maximum(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn max_c(self, c: f64) -> f64 {
        f64::max(self, c)
    }
    fn clamp_c(self, lo: f64, hi: f64) -> f64 {
        self.clamp(lo, hi)
    }
    fn wrap_pi(self) -> f64 {
        wrap_pi(self)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        Var::value(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn atan(self) -> Self {
        Var::atan(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
    fn recip(self) -> Self {
        Var::recip(self)
    }
    fn maximum(self, other: Self) -> Self {
        Var::maximum(self, other)
    }
    fn max_c(self, c: f64) -> Self {
        Var::max_c(self, c)
    }
    fn clamp_c(self, lo: f64, hi: f64) -> Self {
        Var::clamp_c(self, lo, hi)
    }
    fn wrap_pi(self) -> Self {
        Var::wrap_pi(self)
    }
}

impl<'t> Add for VVar<'t> {
    type Output = VVar<'t>;
    fn add(self, rhs: VVar<'t>) -> VVar<'t> {
        VVar { tape: self.tape, id: self.tape.binary(0, self.id, rhs.id) }
    }
}

impl<'t> Sub for VVar<'t> {
    type Output = VVar<'t>;
    fn sub(self, rhs: VVar<'t>) -> VVar<'t> {
        VVar { tape: self.tape, id: self.tape.binary(1, self.id, rhs.id) }
    }
}

impl<'t> Mul for VVar<'t> {
    type Output = VVar<'t>;
    fn mul(self, rhs: VVar<'t>) -> VVar<'t> {
        VVar { tape: self.tape, id: self.tape.binary(2, self.id, rhs.id) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar function of a parameter vector.
    fn fd_grad(theta: &[f64], f: &dyn Fn(&[f64]) -> f64, h: f64) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        let mut t = theta.to_vec();
        for i in 0..theta.len() {
            let orig = t[i];
            t[i] = orig + h;
            let up = f(&t);
            t[i] = orig - h;
            let dn = f(&t);
            t[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1e-6, a.abs().max(b.abs()))
    }

    fn check_grads(theta: &[f64], build: &dyn for<'t> Fn(&'t Tape, &[f64]) -> Var<'t>, tol: f64) {
        let tape = Tape::new();
        let loss = build(&tape, theta);
        let mut grad = vec![0.0; theta.len()];
        tape.backward_into(loss, &mut grad);
        let f = |t: &[f64]| -> f64 {
            let tp = Tape::new();
            build(&tp, t).value()
        };
        let fd = fd_grad(theta, &f, 1e-6);
        for i in 0..theta.len() {
            assert!(
                rel_err(grad[i], fd[i]) < tol,
                "grad mismatch at {}: ad={} fd={}",
                i,
                grad[i],
                fd[i]
            );
        }
    }

    #[test]
    fn scalar_arithmetic_values() {
        let tape = Tape::new();
        let a = tape.constant(3.0);
        let b = tape.constant(4.0);
        assert_eq!((a + b).value(), 7.0);
        assert_eq!((a - b).value(), -1.0);
        assert_eq!((a * b).value(), 12.0);
        assert_eq!((a / b).value(), 0.75);
        assert_eq!((a + 1.5).value(), 4.5);
        assert_eq!((a * 2.0).value(), 6.0);
        assert_eq!((-a).value(), -3.0);
        assert_eq!(a.maximum(b).value(), 4.0);
        assert_eq!(a.max_c(3.5).value(), 3.5);
        assert_eq!(b.clamp_c(0.0, 3.0).value(), 3.0);
    }

    #[test]
    fn wrap_pi_range_and_identity() {
        use std::f64::consts::PI;
        assert!((wrap_pi(PI + 0.01) - (-PI + 0.01)).abs() < 1e-12);
        assert!((wrap_pi(-PI) - PI).abs() < 1e-12);
        assert!((wrap_pi(0.3) - 0.3).abs() < 1e-15);
        for i in -20..20 {
            let x = i as f64 * 0.7;
            let w = wrap_pi(x);
            assert!(w > -PI && w <= PI);
            assert!(((x - w) / (2.0 * PI)).round() * 2.0 * PI + w - x < 1e-9);
        }
    }

    #[test]
    fn scalar_chain_gradients() {
        // Composite expression touching most scalar ops.
        let theta = [0.7, -0.4, 1.3, 0.9];
        check_grads(
            &theta,
            &|tape, t| {
                let a = tape.param_scalar(t, 0);
                let b = tape.param_scalar(t, 1);
                let c = tape.param_scalar(t, 2);
                let d = tape.param_scalar(t, 3);
                let u = (a * b + c.sin()) / (d * d + 1.0);
                let v = u.tanh() * c.atan() + (a - 0.2).exp() * 0.1;
                let w = v.square() + (b * b + 0.5).sqrt() + d.sigmoid();
                let x = w.recip() + (a * 3.0).cos() - b / a;
                x * 2.0 + w
            },
            1e-6,
        );
    }

    #[test]
    fn max_and_clamp_gradients() {
        let theta = [0.8, 0.3];
        check_grads(
            &theta,
            &|tape, t| {
                let a = tape.param_scalar(t, 0);
                let b = tape.param_scalar(t, 1);
                a.maximum(b) + a.max_c(0.5) * 2.0 + b.clamp_c(0.0, 1.0).square()
            },
            1e-6,
        );
        // Gradient stops where the clamp saturates.
        let tape = Tape::new();
        let t = [2.0];
        let a = tape.param_scalar(&t, 0);
        let y = a.clamp_c(-1.0, 1.0);
        let mut g = vec![0.0; 1];
        tape.backward_into(y, &mut g);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn wrap_gradient_is_identity() {
        let theta = [3.0];
        check_grads(&theta, &|tape, t| tape.param_scalar(t, 0).wrap_pi() * 1.5, 1e-6);
    }

    #[test]
    fn vector_ops_values() {
        let tape = Tape::new();
        let v = tape.constants(&[1.0, 2.0, 3.0]);
        let w = tape.constants(&[0.5, -1.0, 2.0]);
        assert_eq!((v + w).values(), vec![1.5, 1.0, 5.0]);
        assert_eq!((v * w).values(), vec![0.5, -2.0, 6.0]);
        assert_eq!(v.dot(w).value(), 4.5);
        assert_eq!(v.sum().value(), 6.0);
        assert_eq!(v.at(1).value(), 2.0);
        assert_eq!(v.slice(1, 2).values(), vec![2.0, 3.0]);
        let cat = tape.concat(&[v, w]);
        assert_eq!(cat.len(), 6);
        assert_eq!(cat.values(), vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn matmul_value_matches_naive() {
        let tape = Tape::new();
        // W = [[1, 2, 3], [4, 5, 6]] row-major; X columns (1,0,1) and (2,1,0).
        let w = tape.constants(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = tape.constants(&[1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
        let y = w.matmul(x, 2, 3, 2);
        assert_eq!(y.values(), vec![4.0, 10.0, 4.0, 13.0]);
    }

    #[test]
    fn matmul_and_addcols_gradients() {
        // theta packs W (2x3), bias (2), X (3x2).
        let theta = [0.3, -0.2, 0.5, 0.1, 0.8, -0.6, 0.05, -0.1, 1.0, 0.2, -0.4, 0.7, 0.3, 0.9];
        check_grads(
            &theta,
            &|tape, t| {
                let w = tape.param_slice(t, 0, 6);
                let b = tape.param_slice(t, 6, 2);
                let x = tape.param_slice(t, 8, 6);
                let y = w.matmul(x, 2, 3, 2).add_cols(b, 2, 2).tanh();
                let probe = tape.constants(&[0.7, -0.3, 0.2, 1.1]);
                y.dot(probe)
            },
            1e-6,
        );
    }

    #[test]
    fn slice_concat_sum_gradients() {
        let theta = [0.4, -0.9, 0.2, 1.1, -0.3];
        check_grads(
            &theta,
            &|tape, t| {
                let v = tape.param_slice(t, 0, 5);
                let head = v.slice(0, 2);
                let tail = v.slice(2, 3);
                let joined = tape.concat(&[tail, head]);
                let s = joined.sigmoid().sum();
                let e = v.at(3);
                s * e + joined.dot(joined) * 0.25
            },
            1e-6,
        );
    }

    #[test]
    fn broadcast_scalar_against_vector() {
        let theta = [2.0, 0.3, -0.6, 0.1];
        check_grads(
            &theta,
            &|tape, t| {
                let s = tape.param_slice(t, 0, 1);
                let v = tape.param_slice(t, 1, 3);
                let scaled = v * s;
                let shifted = scaled + s;
                shifted.sum()
            },
            1e-6,
        );
    }

    #[test]
    fn param_grads_accumulate_across_uses() {
        let theta = [1.5];
        let tape = Tape::new();
        let a = tape.param_scalar(&theta, 0);
        let b = tape.param_scalar(&theta, 0);
        let loss = a * b; // d/dtheta of theta^2 = 2 theta
        let mut g = vec![0.0; 1];
        tape.backward_into(loss, &mut g);
        assert!((g[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn untouched_params_keep_zero_gradient() {
        let theta = [1.0, 2.0, 3.0];
        let tape = Tape::new();
        let a = tape.param_scalar(&theta, 1);
        let loss = a.square();
        let mut g = vec![0.0; 3];
        tape.backward_into(loss, &mut g);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 4.0).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn backward_twice_panics() {
        let theta = [1.0];
        let tape = Tape::new();
        let a = tape.param_scalar(&theta, 0);
        let loss = a.square();
        let mut g = vec![0.0; 1];
        tape.backward_into(loss, &mut g);
        tape.backward_into(loss, &mut g);
    }

    #[test]
    fn deep_chain_matches_fd() {
        // A 25-step recurrence, a shallow stand-in for unrolled dynamics.
        let theta = [0.9, 0.05, 0.3];
        check_grads(
            &theta,
            &|tape, t| {
                let a = tape.param_scalar(t, 0);
                let b = tape.param_scalar(t, 1);
                let mut x = tape.param_scalar(t, 2);
                for _ in 0..25 {
                    x = (x * a + b).tanh() * 0.6 + x * 0.55;
                }
                x.square()
            },
            1e-5,
        );
    }
}
