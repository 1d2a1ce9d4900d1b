//! Reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Tape`] records array-valued primitive operations in topological order
//! during the forward pass; [`Tape::backward`] replays them in reverse from a
//! scalar root and returns one adjoint per node. Everything is `f64`.

mod adam;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamOutcome, AdamState};
pub use mlp::{mlp_forward, mlp_forward_raw, Activation, DenseLayer, MlpGrads, MlpParams, StagedMlp};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Dense row-major array. Vectors are `n x 1`, scalars `1 x 1`.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Buffer {
    pub fn vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Buffer { rows, cols: 1, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Buffer { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Buffer { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape(&self, other: &Buffer) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

enum Op {
    Leaf,
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    /// n-ary elementwise sum of same-shape nodes.
    AddN(Vec<NodeId>),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// Matrix-vector product `(m x n) * (n x 1)`.
    MatVec(NodeId, NodeId),
    /// Multiply by a compile-time constant.
    Scale(NodeId, f64),
    /// Add a constant buffer of the same shape.
    AddConst(NodeId),
    /// Replicate a scalar into an `n`-vector.
    Broadcast(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    /// Reduce to a scalar by summation.
    Sum(NodeId),
    Log(NodeId),
    Exp(NodeId),
    /// Elementwise square.
    Square(NodeId),
}

struct Node {
    op: Op,
    value: Buffer,
}

/// Append-only record of forward operations.
///
/// Operands always precede their consumers, so a single reverse sweep from a
/// scalar root computes every adjoint.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by a backward pass. Nodes the root does not
/// depend on have a zero adjoint.
pub struct Adjoints {
    adj: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Adjoint buffer of `id`, or `None` if the root does not reach it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.adj[id.0].as_deref()
    }

    /// Adjoint of `id` as an owned vector, zeros if unreached.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.adj[id.0] {
            Some(a) => a.clone(),
            None => vec![0.0; len],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Buffer {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let b = self.value(id);
        assert_eq!(b.len(), 1, "node is not a scalar");
        b.data[0]
    }

    fn push(&mut self, op: Op, value: Buffer) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record a leaf holding arbitrary data (parameter or constant input).
    pub fn leaf(&mut self, value: Buffer) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_vector(&mut self, data: &[f64]) -> NodeId {
        self.leaf(Buffer::vector(data.to_vec()))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Buffer::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Buffer { rows: va.rows, cols: va.cols, data };
        self.push(Op::Add(a, b), out)
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_n: empty term list");
        let first = &self.nodes[terms[0].0].value;
        let (rows, cols) = (first.rows, first.cols);
        let mut data = vec![0.0; first.len()];
        for &t in terms {
            let v = &self.nodes[t.0].value;
            assert!(v.rows == rows && v.cols == cols, "add_n: shape mismatch");
            for (acc, x) in data.iter_mut().zip(&v.data) {
                *acc += x;
            }
        }
        self.push(Op::AddN(terms.to_vec()), Buffer { rows, cols, data })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "mul: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Buffer { rows: va.rows, cols: va.cols, data };
        self.push(Op::Mul(a, b), out)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert_eq!(vx.cols, 1, "matvec: x must be a column vector");
        assert_eq!(vw.cols, vx.rows, "matvec: inner dimension mismatch");
        let mut data = vec![0.0; vw.rows];
        for i in 0..vw.rows {
            let row = &vw.data[i * vw.cols..(i + 1) * vw.cols];
            let mut acc = 0.0;
            for (wij, xj) in row.iter().zip(&vx.data) {
                acc += wij * xj;
            }
            data[i] = acc;
        }
        let rows = vw.rows;
        self.push(Op::MatVec(w, x), Buffer { rows, cols: 1, data })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x * c).collect(),
        };
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_const(&mut self, a: NodeId, c: &[f64]) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), c.len(), "add_const: shape mismatch");
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(c).map(|(x, y)| x + y).collect(),
        };
        self.push(Op::AddConst(a), out)
    }

    pub fn broadcast(&mut self, a: NodeId, n: usize) -> NodeId {
        let v = self.scalar_value(a);
        self.push(Op::Broadcast(a), Buffer::vector(vec![v; n]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.tanh()).collect(),
        };
        self.push(Op::Tanh(a), out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| gelu(x)).collect(),
        };
        self.push(Op::Gelu(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::Sum(a), Buffer::scalar(total))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.ln()).collect(),
        };
        self.push(Op::Log(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.exp()).collect(),
        };
        self.push(Op::Exp(a), out)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Buffer {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x * x).collect(),
        };
        self.push(Op::Square(a), out)
    }

    /// Sum of squares, reduced to a scalar.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// Reverse sweep from a scalar `root`. Panics if `root` is not scalar.
    ///
    /// The tape itself is not consumed, but adjoints from separate calls are
    /// independent; reuse for a second root recomputes from scratch.
    pub fn backward(&self, root: NodeId) -> Adjoints {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(out_adj) = adj[i].take() else { continue };
            self.accumulate(i, &out_adj, &mut adj);
            adj[i] = Some(out_adj);
        }
        Adjoints { adj }
    }

    fn accumulate(&self, i: usize, out_adj: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(adj, *a, out_adj, self.nodes[a.0].value.len());
                add_into(adj, *b, out_adj, self.nodes[b.0].value.len());
            }
            Op::AddN(terms) => {
                for &t in terms {
                    add_into(adj, t, out_adj, self.nodes[t.0].value.len());
                }
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                let da: Vec<f64> = out_adj.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = out_adj.iter().zip(va).map(|(g, x)| g * x).collect();
                add_into(adj, *a, &da, va.len());
                add_into(adj, *b, &db, vb.len());
            }
            Op::MatVec(w, x) => {
                let vw = &self.nodes[w.0].value;
                let vx = &self.nodes[x.0].value;
                let (m, n) = (vw.rows, vw.cols);
                // dW = g x^T, dx = W^T g
                let wa = adj[w.0].get_or_insert_with(|| vec![0.0; m * n]);
                for i in 0..m {
                    let gi = out_adj[i];
                    if gi != 0.0 {
                        let row = &mut wa[i * n..(i + 1) * n];
                        for (waj, xj) in row.iter_mut().zip(&vx.data) {
                            *waj += gi * xj;
                        }
                    }
                }
                let xa = adj[x.0].get_or_insert_with(|| vec![0.0; n]);
                for i in 0..m {
                    let gi = out_adj[i];
                    if gi != 0.0 {
                        let row = &vw.data[i * n..(i + 1) * n];
                        for (xaj, wij) in xa.iter_mut().zip(row) {
                            *xaj += gi * wij;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = out_adj.iter().map(|g| g * c).collect();
                add_into(adj, *a, &da, da.len());
            }
            Op::AddConst(a) => {
                add_into(adj, *a, out_adj, out_adj.len());
            }
            Op::Broadcast(a) => {
                let total: f64 = out_adj.iter().sum();
                add_into(adj, *a, &[total], 1);
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = out_adj.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(adj, *a, &da, da.len());
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = out_adj.iter().zip(x).map(|(g, &x)| g * gelu_deriv(x)).collect();
                add_into(adj, *a, &da, da.len());
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                let g = out_adj[0];
                add_into(adj, *a, &vec![g; n], n);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = out_adj.iter().zip(x).map(|(g, x)| g / x).collect();
                add_into(adj, *a, &da, da.len());
            }
            Op::Exp(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = out_adj.iter().zip(y).map(|(g, y)| g * y).collect();
                add_into(adj, *a, &da, da.len());
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = out_adj.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                add_into(adj, *a, &da, da.len());
            }
        }
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64], len: usize) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
    for (a, c) in slot.iter_mut().zip(contrib) {
        *a += c;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
