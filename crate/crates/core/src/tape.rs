//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a dynamic computation graph; [`Tape::backward`] walks
//! it once in reverse insertion order (which is a reverse topological order,
//! since an operation can only reference earlier nodes) and accumulates
//! vector-Jacobian products into the gradient buffers of trainable leaves.
//!
//! Gradients accumulate across repeated backward passes until
//! [`Tape::zero_grads`] is called, matching the usual optimizer-loop
//! convention. Shape violations panic with a message naming the operation
//! and both operand shapes; runtime numeric failures (non-finite values in
//! [`fd_check`]) are reported as errors.

use std::fmt;

use thiserror::Error;

/// Shape of a [`Tensor`]: scalar, vector, or row-major matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Dense 64-bit tensor, row-major for matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: impl Into<Vec<f64>>) -> Self {
        let data = data.into();
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix: {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            data.len()
        );
        Tensor { shape: Shape::Matrix(rows, cols), data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar tensor; panics on any other shape.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.shape, Shape::Scalar, "as_scalar on {}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    ScalarMul(f64, NodeId),
    Mul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBias(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Concat(NodeId, NodeId),
    Slice(NodeId, usize, usize),
    SqNorm(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Leaf whose gradient is retained across backward passes.
    trainable: bool,
    /// True when some trainable leaf lies in this node's input cone.
    relevant: bool,
    grad: Option<Tensor>,
}

/// Statistics from one backward pass.
#[derive(Clone, Copy, Debug)]
pub struct BackwardStats {
    /// Nodes processed; each node is visited exactly once.
    pub nodes_visited: usize,
}

/// Single-threaded record of a computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is accumulated and retained by backward passes.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let grad = Some(Tensor::zeros(value.shape()));
        self.push(value, Op::Leaf, true, true, grad)
    }

    /// Leaf treated as a constant: no gradient is stored for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        assert!(node.trainable, "grad: node {} is not a trainable leaf", id.0);
        node.grad.as_ref().expect("trainable leaf always has a gradient buffer")
    }

    /// Resets every retained leaf gradient to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data.fill(0.0);
            }
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        trainable: bool,
        relevant: bool,
        grad: Option<Tensor>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, trainable, relevant, grad });
        id
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let relevant = inputs.iter().any(|i| self.nodes[i.0].relevant);
        self.push(value, op, false, relevant, None)
    }

    fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "add: shape mismatch {sa} vs {sb}");
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.record(Tensor { shape: sa, data }, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "sub: shape mismatch {sa} vs {sb}");
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.record(Tensor { shape: sa, data }, Op::Sub(a, b), &[a, b])
    }

    /// Constant scale `c * x`; the only broadcast the tape supports.
    pub fn scalar_mul(&mut self, c: f64, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        let data = self.data(x).iter().map(|v| c * v).collect();
        self.record(Tensor { shape, data }, Op::ScalarMul(c, x), &[x])
    }

    /// Elementwise product of same-shape operands.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "mul: shape mismatch {sa} vs {sb}");
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.record(Tensor { shape: sa, data }, Op::Mul(a, b), &[a, b])
    }

    /// `w @ x` for a `[m x n]` matrix and an `[n]` vector.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (sw, sx) = (self.shape(w), self.shape(x));
        let (m, n) = match (sw, sx) {
            (Shape::Matrix(m, n), Shape::Vector(len)) if len == n => (m, n),
            _ => panic!("matvec: shape mismatch {sw} vs {sx}"),
        };
        let wd = self.data(w);
        let xd = self.data(x);
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&wd[i * n..(i + 1) * n], xd);
        }
        self.record(Tensor::vector(out), Op::MatVec(w, x), &[w, x])
    }

    /// `a @ b` for `[m x k]` and `[k x n]` matrices.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (Shape::Matrix(m, ka), Shape::Matrix(kb, n)) if ka == kb => (m, ka, n),
            _ => panic!("matmul: shape mismatch {sa} vs {sb}"),
        };
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, ad, bd, m, k, n);
        self.record(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = match self.shape(a) {
            Shape::Matrix(m, n) => (m, n),
            s => panic!("transpose: expected matrix, got {s}"),
        };
        let ad = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        self.record(Tensor::matrix(n, m, out), Op::Transpose(a), &[a])
    }

    /// Adds a length-`n` bias vector to every row of a `[m x n]` matrix.
    pub fn add_row_bias(&mut self, z: NodeId, bias: NodeId) -> NodeId {
        let (sz, sb) = (self.shape(z), self.shape(bias));
        let (m, n) = match (sz, sb) {
            (Shape::Matrix(m, n), Shape::Vector(len)) if len == n => (m, n),
            _ => panic!("add_row_bias: shape mismatch {sz} vs {sb}"),
        };
        let zd = self.data(z);
        let bd = self.data(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = zd[i * n + j] + bd[j];
            }
        }
        self.record(Tensor::matrix(m, n, out), Op::AddRowBias(z, bias), &[z, bias])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.data(x).iter().sum();
        self.record(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        assert!(!d.is_empty(), "mean: empty operand");
        let v = d.iter().sum::<f64>() / d.len() as f64;
        self.record(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Smooth rectifier `ln(1 + e^x)`, evaluated in a form stable for large `|x|`.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x), |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let shape = self.shape(x);
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.record(Tensor { shape, data }, op, &[x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = match (sa, sb) {
            (Shape::Vector(na), Shape::Vector(nb)) => (na, nb),
            _ => panic!("concat: expected vectors, got {sa} and {sb}"),
        };
        let mut data = Vec::with_capacity(na + nb);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        self.record(Tensor::vector(data), Op::Concat(a, b), &[a, b])
    }

    /// Contiguous segment `x[start..end]` of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let s = self.shape(x);
        let n = match s {
            Shape::Vector(n) => n,
            _ => panic!("slice: expected vector, got {s}"),
        };
        assert!(
            start < end && end <= n,
            "slice: range {start}..{end} out of bounds for {s}"
        );
        let data = self.data(x)[start..end].to_vec();
        self.record(Tensor::vector(data), Op::Slice(x, start, end), &[x])
    }

    /// Sum of squared entries `||x||^2` as a scalar.
    pub fn sq_norm(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.data(x).iter().map(|v| v * v).sum();
        self.record(Tensor::scalar(total), Op::SqNorm(x), &[x])
    }

    /// Propagates `d(root)/d(node)` from a scalar root down to every leaf,
    /// adding the result into each trainable leaf's retained gradient.
    ///
    /// Every node up to the root is visited exactly once (reverse insertion
    /// order is a reverse topological order by construction).
    pub fn backward(&mut self, root: NodeId) -> BackwardStats {
        let root_shape = self.shape(root);
        assert_eq!(root_shape, Shape::Scalar, "backward: root must be scalar, got {root_shape}");

        let n = root.0 + 1;
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        if self.nodes[root.0].relevant {
            adj[root.0] = Some(Tensor::scalar(1.0));
        }

        let mut visited = 0;
        for i in (0..n).rev() {
            visited += 1;
            let Some(u) = adj[i].take() else { continue };
            let op = self.nodes[i].op;
            match op {
                Op::Leaf => {
                    if self.nodes[i].trainable {
                        let g = self.nodes[i].grad.as_mut().expect("leaf grad buffer");
                        for (gv, uv) in g.data.iter_mut().zip(u.data()) {
                            *gv += uv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, |out| axpy(out, 1.0, u.data()));
                    self.accumulate(&mut adj, b, |out| axpy(out, 1.0, u.data()));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, |out| axpy(out, 1.0, u.data()));
                    self.accumulate(&mut adj, b, |out| axpy(out, -1.0, u.data()));
                }
                Op::ScalarMul(c, x) => {
                    self.accumulate(&mut adj, x, |out| axpy(out, c, u.data()));
                }
                Op::Mul(a, b) => {
                    let bd = self.data(b).to_vec();
                    self.accumulate(&mut adj, a, |out| {
                        for ((o, uv), bv) in out.iter_mut().zip(u.data()).zip(&bd) {
                            *o += uv * bv;
                        }
                    });
                    let ad = self.data(a).to_vec();
                    self.accumulate(&mut adj, b, |out| {
                        for ((o, uv), av) in out.iter_mut().zip(u.data()).zip(&ad) {
                            *o += uv * av;
                        }
                    });
                }
                Op::MatVec(w, x) => {
                    let (m, nc) = match self.shape(w) {
                        Shape::Matrix(m, nc) => (m, nc),
                        _ => unreachable!(),
                    };
                    if self.nodes[w.0].relevant {
                        let xd = self.data(x).to_vec();
                        self.accumulate(&mut adj, w, |out| {
                            for i in 0..m {
                                let ui = u.data()[i];
                                if ui != 0.0 {
                                    axpy(&mut out[i * nc..(i + 1) * nc], ui, &xd);
                                }
                            }
                        });
                    }
                    if self.nodes[x.0].relevant {
                        let wd = self.data(w).to_vec();
                        self.accumulate(&mut adj, x, |out| {
                            for i in 0..m {
                                let ui = u.data()[i];
                                if ui != 0.0 {
                                    axpy(out, ui, &wd[i * nc..(i + 1) * nc]);
                                }
                            }
                        });
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = match self.shape(a) {
                        Shape::Matrix(m, k) => (m, k),
                        _ => unreachable!(),
                    };
                    let nc = match self.shape(b) {
                        Shape::Matrix(_, nc) => nc,
                        _ => unreachable!(),
                    };
                    if self.nodes[a.0].relevant {
                        let bd = self.data(b).to_vec();
                        self.accumulate(&mut adj, a, |out| {
                            matmul_nt_into(out, u.data(), &bd, m, nc, k);
                        });
                    }
                    if self.nodes[b.0].relevant {
                        let ad = self.data(a).to_vec();
                        self.accumulate(&mut adj, b, |out| {
                            matmul_tn_into(out, &ad, u.data(), m, k, nc);
                        });
                    }
                }
                Op::Transpose(a) => {
                    let (m, nc) = match self.shape(a) {
                        Shape::Matrix(m, nc) => (m, nc),
                        _ => unreachable!(),
                    };
                    self.accumulate(&mut adj, a, |out| {
                        for i in 0..m {
                            for j in 0..nc {
                                out[i * nc + j] += u.data()[j * m + i];
                            }
                        }
                    });
                }
                Op::AddRowBias(z, bias) => {
                    let (m, nc) = match self.shape(z) {
                        Shape::Matrix(m, nc) => (m, nc),
                        _ => unreachable!(),
                    };
                    self.accumulate(&mut adj, z, |out| axpy(out, 1.0, u.data()));
                    self.accumulate(&mut adj, bias, |out| {
                        for i in 0..m {
                            for j in 0..nc {
                                out[j] += u.data()[i * nc + j];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let uv = u.as_scalar();
                    self.accumulate(&mut adj, x, |out| {
                        for o in out.iter_mut() {
                            *o += uv;
                        }
                    });
                }
                Op::Mean(x) => {
                    let len = self.shape(x).len() as f64;
                    let uv = u.as_scalar() / len;
                    self.accumulate(&mut adj, x, |out| {
                        for o in out.iter_mut() {
                            *o += uv;
                        }
                    });
                }
                Op::Square(x) => {
                    let xd = self.data(x).to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), xv) in out.iter_mut().zip(u.data()).zip(&xd) {
                            *o += 2.0 * xv * uv;
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let yd = self.nodes[i].value.data().to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), yv) in out.iter_mut().zip(u.data()).zip(&yd) {
                            *o += uv / (2.0 * yv);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let yd = self.nodes[i].value.data().to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), yv) in out.iter_mut().zip(u.data()).zip(&yd) {
                            *o += uv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Sin(x) => {
                    let xd = self.data(x).to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), xv) in out.iter_mut().zip(u.data()).zip(&xd) {
                            *o += uv * xv.cos();
                        }
                    });
                }
                Op::Cos(x) => {
                    let xd = self.data(x).to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), xv) in out.iter_mut().zip(u.data()).zip(&xd) {
                            *o -= uv * xv.sin();
                        }
                    });
                }
                Op::Exp(x) => {
                    let yd = self.nodes[i].value.data().to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), yv) in out.iter_mut().zip(u.data()).zip(&yd) {
                            *o += uv * yv;
                        }
                    });
                }
                Op::Softplus(x) => {
                    let xd = self.data(x).to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for ((o, uv), xv) in out.iter_mut().zip(u.data()).zip(&xd) {
                            *o += uv / (1.0 + (-xv).exp());
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let na = self.shape(a).len();
                    self.accumulate(&mut adj, a, |out| axpy(out, 1.0, &u.data()[..na]));
                    self.accumulate(&mut adj, b, |out| axpy(out, 1.0, &u.data()[na..]));
                }
                Op::Slice(x, start, end) => {
                    self.accumulate(&mut adj, x, |out| {
                        axpy(&mut out[start..end], 1.0, u.data());
                    });
                }
                Op::SqNorm(x) => {
                    let uv = u.as_scalar();
                    let xd = self.data(x).to_vec();
                    self.accumulate(&mut adj, x, |out| {
                        for (o, xv) in out.iter_mut().zip(&xd) {
                            *o += 2.0 * uv * xv;
                        }
                    });
                }
            }
        }
        BackwardStats { nodes_visited: visited }
    }

    /// Applies `f` to the adjoint buffer of `target` when some trainable leaf
    /// sits upstream of it; subtrees built purely from constants are skipped.
    fn accumulate(
        &self,
        adj: &mut [Option<Tensor>],
        target: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].relevant {
            return;
        }
        let slot = &mut adj[target.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[target.0].value.shape()));
        f(buf.data_mut());
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Four-way unrolled dot product; the fixed accumulator split keeps results
/// deterministic while letting the loop vectorize.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, a_rest) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a_rest.iter().zip(b_rest) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

const MM_TILE: usize = 64;

/// `out[m x n] += a[m x k] @ b[k x n]`, tiled so a block of `b` rows stays
/// cache-resident across the batch dimension.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + MM_TILE).min(k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for p in p0..p1 {
                let aip = arow[p];
                if aip != 0.0 {
                    axpy(orow, aip, &b[p * n..(p + 1) * n]);
                }
            }
        }
        p0 = p1;
    }
}

/// `out[m x k] += dz[m x n] @ b^T` for `b` stored `[k x n]`.
fn matmul_nt_into(out: &mut [f64], dz: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + MM_TILE).min(k);
        for i in 0..m {
            let zrow = &dz[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for p in p0..p1 {
                orow[p] += dot(zrow, &b[p * n..(p + 1) * n]);
            }
        }
        p0 = p1;
    }
}

/// `out[k x n] += a^T @ dz` for `a` stored `[m x k]`, `dz` `[m x n]`.
fn matmul_tn_into(out: &mut [f64], a: &[f64], dz: &[f64], m: usize, k: usize, n: usize) {
    let mut i0 = 0;
    while i0 < m {
        let i1 = (i0 + MM_TILE).min(m);
        for p in 0..k {
            let orow = &mut out[p * n..(p + 1) * n];
            for i in i0..i1 {
                let aip = a[i * k + p];
                if aip != 0.0 {
                    axpy(orow, aip, &dz[i * n..(i + 1) * n]);
                }
            }
        }
        i0 = i1;
    }
}

#[derive(Debug, Error)]
pub enum FdCheckError {
    #[error("non-finite function value at {context}")]
    NonFinite { context: String },
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `eps`, returning the worst relative error
/// `max_i |g_ad(i) - g_fd(i)| / (|g_fd(i)| + 1e-12)`.
///
/// `f` must build a scalar root from the supplied leaf.
pub fn fd_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64, FdCheckError>
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let eval = |point: &[f64]| -> Result<f64, FdCheckError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::vector(point.to_vec()));
        let root = f(&mut tape, leaf);
        let v = tape.value(root).as_scalar();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FdCheckError::NonFinite { context: format!("f({point:?})") })
        }
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::vector(x.to_vec()));
    let root = f(&mut tape, leaf);
    let base = tape.value(root).as_scalar();
    if !base.is_finite() {
        return Err(FdCheckError::NonFinite { context: format!("f({x:?})") });
    }
    tape.backward(root);
    let g_ad = tape.grad(leaf).data().to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = eval(&probe)?;
        probe[i] = x[i] - eps;
        let fm = eval(&probe)?;
        probe[i] = x[i];
        let g_fd = (fp - fm) / (2.0 * eps);
        let rel = (g_ad[i] - g_fd).abs() / (g_fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
