//! Dense tensors on a recording tape with reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass; a
//! [`Tensor`] is a copyable handle into it. `Tape::backward` replays the
//! record in reverse and accumulates gradients for every node that needs
//! them. Values are stored as `f64`; in [`Precision::F32`] mode each result
//! is rounded through `f32`, so training arithmetic matches the 32-bit
//! checkpoints while gradient checks and oracle comparisons can run in full
//! 64-bit.
//!
//! One tape belongs to one execution context. All loops have a fixed order,
//! so identical inputs give bit-identical outputs.

pub mod conv;
pub mod grad_check;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod rng;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use param::{ParamBind, ParamStore};

pub type NodeId = usize;

/// Working precision of a tape or parameter store.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    fn round_all(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Dense boolean matrix used for attention visibility masks.
/// `true` means the position may be attended to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = BoolMat::new(rows, cols, false);
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// An operation with externally computed forward value and hand-written
/// backward rule (used for the lattice losses).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given input/output values and the
    /// incoming output gradient. Return `None` for inputs that need none.
    fn backward(
        &self,
        inputs: &[(&[f64], &[usize])],
        output: (&[f64], &[usize]),
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    MaskedSoftmaxRows(NodeId, Rc<BoolMat>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    MeanRows(NodeId),
    MaxRows(NodeId),
    SumAll(NodeId),
    Lookup {
        table: NodeId,
        ids: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    FramesMatrix(NodeId),
    Conv3d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    MaxPool3d {
        x: NodeId,
        window: [usize; 3],
        stride: [usize; 3],
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Rc<dyn CustomOp>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    precision: Precision,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor<'_> {
        self.precision.round_all(&mut data);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Tensor { tape: self, id }
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// New differentiable leaf.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor<'_>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "leaf",
                expected: format!("positive dims covering {} values", data.len()),
                got: shape.to_vec(),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf { param: None }))
    }

    /// Constant (never receives a gradient).
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor<'_>> {
        self.leaf(shape, data, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        let numel: usize = shape.iter().product();
        self.push(vec![0.0; numel], shape.to_vec(), false, Op::Leaf { param: None })
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(vec![v], vec![1, 1], false, Op::Leaf { param: None })
    }

    /// Row vector `[1, n]`.
    pub fn row(&self, data: Vec<f64>) -> Tensor<'_> {
        let n = data.len();
        self.push(data, vec![1, n], false, Op::Leaf { param: None })
    }

    /// Bind every parameter of a store onto this tape as differentiable
    /// leaves tagged with their parameter id.
    pub fn bind<'t>(&'t self, store: &ParamStore) -> ParamBind<'t> {
        let mut ids = Vec::with_capacity(store.len());
        for pid in 0..store.len() {
            let p = store.param(pid);
            let t = self.push(
                p.data.clone(),
                p.shape.clone(),
                true,
                Op::Leaf { param: Some(pid) },
            );
            ids.push(t.id);
        }
        ParamBind::new(self, ids)
    }

    /// Stack row blocks vertically. All parts must share a column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_rows",
                expected: "at least one part".into(),
                got: vec![],
            });
        }
        let cols = parts[0].cols()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols()? != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            rows += p.rows()?;
            data.extend_from_slice(&self.nodes.borrow()[p.id].data);
        }
        let rg = self.needs_grad(&parts.iter().map(|p| p.id).collect::<Vec<_>>());
        Ok(self.push(
            data,
            vec![rows, cols],
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Stack column blocks horizontally. All parts must share a row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                expected: "at least one part".into(),
                got: vec![],
            });
        }
        let rows = parts[0].rows()?;
        let mut cols = 0;
        for p in parts {
            if p.rows()? != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            cols += p.cols()?;
        }
        let mut data = vec![0.0; rows * cols];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for p in parts {
                let pc = nodes[p.id].shape[1];
                for i in 0..rows {
                    for j in 0..pc {
                        data[i * cols + off + j] = nodes[p.id].data[i * pc + j];
                    }
                }
                off += pc;
            }
        }
        let rg = self.needs_grad(&parts.iter().map(|p| p.id).collect::<Vec<_>>());
        Ok(self.push(
            data,
            vec![rows, cols],
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Record a custom-gradient operation with an externally computed value.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Tensor<'t>],
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Rc<dyn CustomOp>,
    ) -> Tensor<'t> {
        let ids: Vec<NodeId> = inputs.iter().map(|t| t.id).collect();
        let rg = self.needs_grad(&ids);
        self.push(data, shape, rg, Op::Custom { inputs: ids, op })
    }

    /// Reverse pass from a scalar loss. Gradients of earlier backward runs
    /// on this tape are discarded.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        let nodes = self.nodes.borrow();
        let node = &nodes[loss.id];
        if node.data.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                got: node.shape.clone(),
            });
        }
        if !node.data[0].is_finite() {
            return Err(Error::Numeric(format!(
                "backward from non-finite loss {}",
                node.data[0]
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].requires_grad {
                continue;
            }
            self.propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    fn propagate(&self, nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let node = &nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&nodes[*b].data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(&nodes[*a].data).map(|(g, x)| g * x).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddRow(x, b) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc(grads, *x, g.to_vec());
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                acc(grads, *b, db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                // dA = G Bᵀ, dB = Aᵀ G
                let bt = kernels::transpose(&nodes[*b].data, k, n);
                let da = kernels::matmul(g, &bt, m, n, k);
                let at = kernels::transpose(&nodes[*a].data, m, k);
                let db = kernels::matmul(&at, g, k, m, n);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc(grads, *a, kernels::transpose(g, r, c));
            }
            Op::Relu(a) => {
                let dx: Vec<f64> = nodes[*a]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                acc(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc(grads, *a, kernels::softmax_rows_grad(&node.data, g, r, c));
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc(grads, *a, kernels::log_softmax_rows_grad(&node.data, g, r, c));
            }
            Op::MaskedSoftmaxRows(a, vis) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc(
                    grads,
                    *a,
                    kernels::masked_softmax_rows_grad(&node.data, vis, g, r, c),
                );
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_rows_grad(&nodes[*x].data, &nodes[*gamma].data, *eps, g, r, c);
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::MeanRows(a) => {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] / r as f64;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::MaxRows(a) => {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let x = &nodes[*a].data;
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let mut arg = 0;
                    for i in 1..r {
                        if x[i * c + j] > x[arg * c + j] {
                            arg = i;
                        }
                    }
                    dx[arg * c + j] = g[j];
                }
                acc(grads, *a, dx);
            }
            Op::SumAll(a) => {
                acc(grads, *a, vec![g[0]; nodes[*a].data.len()]);
            }
            Op::Lookup { table, ids } => {
                let cols = nodes[*table].shape[1];
                let mut dt = vec![0.0; nodes[*table].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] += g[row * cols + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let cols = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let pr = nodes[p].shape[0];
                    let slice = g[off * cols..(off + pr) * cols].to_vec();
                    acc(grads, p, slice);
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p].shape[1];
                    let mut dp = vec![0.0; rows * pc];
                    for i in 0..rows {
                        for j in 0..pc {
                            dp[i * pc + j] = g[i * cols + off + j];
                        }
                    }
                    acc(grads, p, dp);
                    off += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let cols = node.shape[1];
                let (xr, xc) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                debug_assert_eq!(cols, xc);
                let mut dx = vec![0.0; xr * xc];
                dx[start * xc..(start + len) * xc].copy_from_slice(g);
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let rows = node.shape[0];
                let xc = nodes[*x].shape[1];
                let mut dx = vec![0.0; nodes[*x].data.len()];
                for i in 0..rows {
                    for j in 0..*len {
                        dx[i * xc + start + j] = g[i * len + j];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RepeatRows { x, times } => {
                let cols = node.shape[1];
                let mut dx = vec![0.0; cols];
                for i in 0..*times {
                    for j in 0..cols {
                        dx[j] += g[i * cols + j];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::FramesMatrix(a) => {
                let (c, t, h, w) = dims4(&nodes[*a].shape);
                let mut dx = vec![0.0; nodes[*a].data.len()];
                for ci in 0..c {
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                let src = ti * (c * h * w) + (ci * h + hi) * w + wi;
                                dx[((ci * t + ti) * h + hi) * w + wi] = g[src];
                            }
                        }
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Conv3d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let xd = dims4(&nodes[*x].shape);
                let ks = &nodes[*kernel].shape;
                let od = (node.shape[1], node.shape[2], node.shape[3]);
                let (dx, dk, db) = conv::conv3d_grad(
                    &nodes[*x].data,
                    xd,
                    &nodes[*kernel].data,
                    ks[0],
                    (ks[2], ks[3], ks[4]),
                    bias.is_some(),
                    *stride,
                    *pad,
                    g,
                    od,
                );
                acc(grads, *x, dx);
                acc(grads, *kernel, dk);
                if let (Some(b), Some(db)) = (bias, db) {
                    acc(grads, *b, db);
                }
            }
            Op::MaxPool3d { x, window, stride } => {
                let xd = dims4(&nodes[*x].shape);
                let od = (node.shape[1], node.shape[2], node.shape[3]);
                let dx = conv::max_pool3d_grad(&nodes[*x].data, xd, *window, *stride, g, od);
                acc(grads, *x, dx);
            }
            Op::Custom { inputs, op } => {
                let in_views: Vec<(&[f64], &[usize])> = inputs
                    .iter()
                    .map(|&i| (nodes[i].data.as_slice(), nodes[i].shape.as_slice()))
                    .collect();
                let contribs = op.backward(&in_views, (&node.data, &node.shape), g);
                debug_assert_eq!(contribs.len(), inputs.len());
                for (&target, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        acc(grads, target, c);
                    }
                }
            }
        }
    }

    /// Add the gradients of bound parameter leaves into the store.
    pub fn param_grads_into(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(Some(g)) = grads.get(id) {
                    store.accumulate_grad(pid, g);
                }
            }
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Detached copy of the values.
    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// Scalar value (panics on non-scalars).
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].data.len(), 1, "item() on non-scalar");
        nodes[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::BadShape {
                op,
                expected: "rank-2 tensor".into(),
                got: s,
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn rows(&self) -> Result<usize> {
        Ok(self.rank2("rows")?.0)
    }

    pub fn cols(&self) -> Result<usize> {
        Ok(self.rank2("cols")?.1)
    }

    fn same_tape(&self, rhs: &Tensor<'t>) {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "operands from different tapes"
        );
    }

    fn binary_elementwise(
        &self,
        rhs: Tensor<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor<'t>> {
        self.same_tape(&rhs);
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(&nodes[rhs.id].data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let rg = self.tape.needs_grad(&[self.id, rhs.id]);
        Ok(self.tape.push(data, self.shape(), rg, rec(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id]
            .data
            .iter()
            .map(|&v| v * c)
            .collect();
        let rg = self.requires_grad();
        self.tape.push(data, self.shape(), rg, Op::Scale(self.id, c))
    }

    /// Add a `[1, c]` row vector to every row of a `[r, c]` matrix.
    pub fn add_row(&self, bias: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&bias);
        let (r, c) = self.rank2("add_row")?;
        let (br, bc) = bias.rank2("add_row")?;
        if br != 1 || bc != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![r, c],
                right: vec![br, bc],
            });
        }
        let data: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let b = &nodes[bias.id].data;
            (0..r * c).map(|i| x[i] + b[i % c]).collect()
        };
        let rg = self.tape.needs_grad(&[self.id, bias.id]);
        Ok(self
            .tape
            .push(data, vec![r, c], rg, Op::AddRow(self.id, bias.id)))
    }

    pub fn matmul(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&rhs);
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = rhs.rank2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(&nodes[self.id].data, &nodes[rhs.id].data, m, k, n)
        };
        let rg = self.tape.needs_grad(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(data, vec![m, n], rg, Op::Matmul(self.id, rhs.id)))
    }

    pub fn t(&self) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("transpose")?;
        let data = kernels::transpose(&self.tape.nodes.borrow()[self.id].data, r, c);
        let rg = self.requires_grad();
        Ok(self.tape.push(data, vec![c, r], rg, Op::Transpose(self.id)))
    }

    pub fn relu(&self) -> Tensor<'t> {
        let data: Vec<f64> = self.tape.nodes.borrow()[self.id]
            .data
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let rg = self.requires_grad();
        self.tape.push(data, self.shape(), rg, Op::Relu(self.id))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows) of a rank-2
    /// tensor. Numerically shift-invariant via max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        match axis {
            1 => self.softmax_rows(),
            0 => Ok(self.t()?.softmax_rows()?.t()?),
            _ => Err(Error::BadShape {
                op: "softmax",
                expected: "axis 0 or 1".into(),
                got: vec![axis],
            }),
        }
    }

    pub fn softmax_rows(&self) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("softmax")?;
        let data = kernels::softmax_rows(&self.tape.nodes.borrow()[self.id].data, r, c);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(data, vec![r, c], rg, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("log_softmax")?;
        let data = kernels::log_softmax_rows(&self.tape.nodes.borrow()[self.id].data, r, c);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(data, vec![r, c], rg, Op::LogSoftmaxRows(self.id)))
    }

    /// Row-wise softmax over visible positions only; fully masked rows
    /// produce zero rows.
    pub fn masked_softmax_rows(&self, visible: &BoolMat) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("masked_softmax")?;
        if visible.rows() != r || visible.cols() != c {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: vec![r, c],
                right: vec![visible.rows(), visible.cols()],
            });
        }
        let vis = Rc::new(visible.clone());
        let data =
            kernels::masked_softmax_rows(&self.tape.nodes.borrow()[self.id].data, &vis, r, c);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(data, vec![r, c], rg, Op::MaskedSoftmaxRows(self.id, vis)))
    }

    /// Row-wise layer normalization with learned gain/bias `[1, c]`.
    pub fn layer_norm(&self, gamma: Tensor<'t>, beta: Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (r, c) = self.rank2("layer_norm")?;
        for p in [gamma, beta] {
            let (pr, pc) = p.rank2("layer_norm")?;
            if pr != 1 || pc != c {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![r, c],
                    right: vec![pr, pc],
                });
            }
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::layer_norm_rows(
                &nodes[self.id].data,
                &nodes[gamma.id].data,
                &nodes[beta.id].data,
                eps,
                r,
                c,
            )
        };
        let rg = self.tape.needs_grad(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            data,
            vec![r, c],
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("mean_rows")?;
        let mut data = vec![0.0; c];
        {
            let nodes = self.tape.nodes.borrow();
            for i in 0..r {
                for j in 0..c {
                    data[j] += nodes[self.id].data[i * c + j];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(data, vec![1, c], rg, Op::MeanRows(self.id)))
    }

    /// Column maxima: `[r, c] -> [1, c]`; ties resolve to the first row.
    pub fn max_rows(&self) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("max_rows")?;
        let mut data = vec![f64::NEG_INFINITY; c];
        {
            let nodes = self.tape.nodes.borrow();
            for i in 0..r {
                for j in 0..c {
                    let v = nodes[self.id].data[i * c + j];
                    if v > data[j] {
                        data[j] = v;
                    }
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(data, vec![1, c], rg, Op::MaxRows(self.id)))
    }

    pub fn sum_all(&self) -> Tensor<'t> {
        let s: f64 = self.tape.nodes.borrow()[self.id].data.iter().sum();
        let rg = self.requires_grad();
        self.tape.push(vec![s], vec![1, 1], rg, Op::SumAll(self.id))
    }

    /// Gather rows of an embedding table: `[v, d]` + ids -> `[len, d]`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<'t>> {
        let (v, d) = self.rank2("lookup")?;
        for &i in ids {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    op: "lookup",
                    index: i,
                    bound: v,
                });
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        {
            let nodes = self.tape.nodes.borrow();
            for (row, &i) in ids.iter().enumerate() {
                data[row * d..(row + 1) * d]
                    .copy_from_slice(&nodes[self.id].data[i * d..(i + 1) * d]);
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![ids.len(), d],
            rg,
            Op::Lookup {
                table: self.id,
                ids: Rc::new(ids.to_vec()),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r + 1,
            });
        }
        let data = self.tape.nodes.borrow()[self.id].data[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![len, c],
            rg,
            Op::SliceRows {
                x: self.id,
                start,
                len,
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c + 1,
            });
        }
        let mut data = vec![0.0; r * len];
        {
            let nodes = self.tape.nodes.borrow();
            for i in 0..r {
                for j in 0..len {
                    data[i * len + j] = nodes[self.id].data[i * c + start + j];
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![r, len],
            rg,
            Op::SliceCols {
                x: self.id,
                start,
                len,
            },
        ))
    }

    /// Tile a `[1, c]` row into `[times, c]`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor<'t>> {
        let (r, c) = self.rank2("repeat_rows")?;
        if r != 1 || times == 0 {
            return Err(Error::BadShape {
                op: "repeat_rows",
                expected: "single row, times >= 1".into(),
                got: vec![r, c],
            });
        }
        let row = self.tape.nodes.borrow()[self.id].data.clone();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![times, c],
            rg,
            Op::RepeatRows {
                x: self.id,
                times,
            },
        ))
    }

    /// Reorder `[C, T, H, W]` into a per-frame matrix `[T, C*H*W]`.
    pub fn frames_matrix(&self) -> Result<Tensor<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::BadShape {
                op: "frames_matrix",
                expected: "rank-4 tensor".into(),
                got: s,
            });
        }
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![0.0; c * t * h * w];
        {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            for ci in 0..c {
                for ti in 0..t {
                    for hi in 0..h {
                        for wi in 0..w {
                            data[ti * (c * h * w) + (ci * h + hi) * w + wi] =
                                x[((ci * t + ti) * h + hi) * w + wi];
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(data, vec![t, c * h * w], rg, Op::FramesMatrix(self.id)))
    }

    /// 3-D cross-correlation with zero padding.
    ///
    /// `self` is `[C, T, H, W]`, `kernel` is `[C', C, kt, kh, kw]`, the
    /// optional bias is `[1, C']`.
    pub fn conv3d(
        &self,
        kernel: Tensor<'t>,
        bias: Option<Tensor<'t>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<'t>> {
        self.same_tape(&kernel);
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 5 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: xs,
                right: ks,
            });
        }
        for (i, (&inp, &ker)) in xs[1..].iter().zip(&ks[2..]).enumerate() {
            if conv::out_len(inp, ker, stride[i], pad[i]).is_none() {
                return Err(Error::BadShape {
                    op: "conv3d",
                    expected: format!("padded input >= kernel (axis {i})"),
                    got: vec![inp + 2 * pad[i], ker],
                });
            }
        }
        if let Some(b) = &bias {
            let (br, bc) = b.rank2("conv3d bias")?;
            if br != 1 || bc != ks[0] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d bias",
                    left: vec![1, ks[0]],
                    right: vec![br, bc],
                });
            }
        }
        let (data, (ot, oh, ow)) = {
            let nodes = self.tape.nodes.borrow();
            let bdata = bias.map(|b| nodes[b.id].data.clone());
            conv::conv3d(
                &nodes[self.id].data,
                (xs[0], xs[1], xs[2], xs[3]),
                &nodes[kernel.id].data,
                ks[0],
                (ks[2], ks[3], ks[4]),
                bdata.as_deref(),
                stride,
                pad,
            )
        };
        let mut ids = vec![self.id, kernel.id];
        if let Some(b) = &bias {
            ids.push(b.id);
        }
        let rg = self.tape.needs_grad(&ids);
        Ok(self.tape.push(
            data,
            vec![ks[0], ot, oh, ow],
            rg,
            Op::Conv3d {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
        ))
    }

    /// 3-D max pooling over `[C, T, H, W]`.
    pub fn max_pool3d(&self, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::BadShape {
                op: "max_pool3d",
                expected: "rank-4 tensor".into(),
                got: s,
            });
        }
        for i in 0..3 {
            if conv::out_len(s[i + 1], window[i], stride[i], 0).is_none() {
                return Err(Error::BadShape {
                    op: "max_pool3d",
                    expected: format!("input >= window (axis {i})"),
                    got: vec![s[i + 1], window[i]],
                });
            }
        }
        let (data, (ot, oh, ow)) = max_pool_fwd(self, (s[0], s[1], s[2], s[3]), window, stride);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            data,
            vec![s[0], ot, oh, ow],
            rg,
            Op::MaxPool3d {
                x: self.id,
                window,
                stride,
            },
        ))
    }
}

fn max_pool_fwd(
    x: &Tensor<'_>,
    dims: (usize, usize, usize, usize),
    window: [usize; 3],
    stride: [usize; 3],
) -> (Vec<f64>, (usize, usize, usize)) {
    let nodes = x.tape.nodes.borrow();
    conv::max_pool3d(&nodes[x.id].data, dims, window, stride)
}

/// Dot-product attention of `q` over `kv` (keys and values are the same
/// rows), scaled by `1/sqrt(d)`. Weights are a masked softmax; rows with no
/// visible position yield zero output and zero weights.
///
/// Returns `(output, weights)`.
pub fn scaled_dot_attention<'t>(
    q: Tensor<'t>,
    kv: Tensor<'t>,
    visible: &BoolMat,
) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let (tq, d) = (q.rows()?, q.cols()?);
    let (tk, dk) = (kv.rows()?, kv.cols()?);
    if d != dk {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left: vec![tq, d],
            right: vec![tk, dk],
        });
    }
    if visible.rows() != tq || visible.cols() != tk {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention mask",
            left: vec![tq, tk],
            right: vec![visible.rows(), visible.cols()],
        });
    }
    let scores = q.matmul(kv.t()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.masked_softmax_rows(visible)?;
    let out = weights.matmul(kv)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::grad_check::grad_check;
    use super::param::ParamStore;
    use super::rng::Rng;
    use super::*;

    fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn matmul_identity_cases() {
        let tape = Tape::new(Precision::F64);
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(eye.matmul(a).unwrap().data(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(eye).unwrap().data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let (m, k, n) = (3, 4, 2);
        let a = randn(&mut rng, m * k);
        let b = randn(&mut rng, k * n);
        // independent sum-of-products oracle
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                want[i * n + j] = s;
            }
        }
        let tape = Tape::new(Precision::F64);
        let ta = tape.constant(&[m, k], a).unwrap();
        let tb = tape.constant(&[k, n], b).unwrap();
        let got = ta.matmul(tb).unwrap().data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new(Precision::F64);
        let a = tape.zeros(&[2, 3]);
        let b = tape.zeros(&[2, 3]);
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_analytic_cases() {
        let tape = Tape::new(Precision::F64);
        let x = tape.row(vec![0.0, 0.0]);
        let y = x.softmax(1).unwrap().data();
        assert!((y[0] - 0.5).abs() < 1e-12 && (y[1] - 0.5).abs() < 1e-12);

        let x = tape.row(vec![1.0f64.ln(), 3.0f64.ln()]);
        let y = x.softmax(1).unwrap().data();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, 5);
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = x.iter().map(|v| v.exp() / denom).collect();
        let tape = Tape::new(Precision::F64);
        let y = tape.row(x).softmax(1).unwrap().data();
        for (g, w) in y.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let x = randn(&mut rng, 7);
            let shifted: Vec<f64> = x.iter().map(|v| v + 13.5).collect();
            let tape = Tape::new(Precision::F64);
            let a = tape.row(x).softmax(1).unwrap().data();
            let b = tape.row(shifted).softmax(1).unwrap().data();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let tape = Tape::new(Precision::F64);
        let x = tape
            .constant(&[2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
            .unwrap();
        let y = x.softmax(0).unwrap().data();
        for j in 0..3 {
            assert!((y[j] + y[3 + j] - 1.0).abs() < 1e-12);
            assert!((y[j] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_gets_full_weight() {
        let tape = Tape::new(Precision::F64);
        let q = tape.row(vec![0.3, -0.7]);
        let kv = tape.row(vec![1.0, 2.0]);
        let (out, w) = scaled_dot_attention(q, kv, &BoolMat::new(1, 1, true)).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.data(), vec![1.0, 2.0]);
    }

    #[test]
    fn attention_identical_keys_split_weight() {
        let tape = Tape::new(Precision::F64);
        let q = tape.row(vec![0.5, 0.5]);
        let kv = tape
            .constant(&[2, 2], vec![1.0, -1.0, 1.0, -1.0])
            .unwrap();
        let (_, w) = scaled_dot_attention(q, kv, &BoolMat::new(1, 2, true)).unwrap();
        let w = w.data();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_masked_key_matches_two_key_softmax() {
        let mut rng = Rng::new(5);
        let d = 3;
        let q = randn(&mut rng, d);
        let kv = randn(&mut rng, 3 * d);
        // raw scores for the two visible keys
        let score = |ki: usize| -> f64 {
            (0..d).map(|j| q[j] * kv[ki * d + j]).sum::<f64>() / (d as f64).sqrt()
        };
        let (s0, s1) = (score(0), score(1));
        let denom = s0.exp() + s1.exp();
        let tape = Tape::new(Precision::F64);
        let tq = tape.row(q);
        let tkv = tape.constant(&[3, d], kv).unwrap();
        let mut vis = BoolMat::new(1, 3, true);
        vis.set(0, 2, false);
        let (_, w) = scaled_dot_attention(tq, tkv, &vis).unwrap();
        let w = w.data();
        assert!((w[0] - s0.exp() / denom).abs() < 1e-12);
        assert!((w[1] - s1.exp() / denom).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn attention_fully_masked_row_is_zero() {
        let tape = Tape::new(Precision::F64);
        let q = tape.row(vec![1.0, 1.0]);
        let kv = tape.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let (out, w) = scaled_dot_attention(q, kv, &BoolMat::new(1, 2, false)).unwrap();
        assert_eq!(out.data(), vec![0.0, 0.0]);
        assert_eq!(w.data(), vec![0.0, 0.0]);
    }

    #[test]
    fn attention_mask_shape_mismatch_errors() {
        let tape = Tape::new(Precision::F64);
        let q = tape.row(vec![1.0, 1.0]);
        let kv = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(scaled_dot_attention(q, kv, &BoolMat::new(2, 2, true)).is_err());
    }

    /// Direct six-loop cross-correlation used as the conv oracle.
    fn conv_oracle(
        x: &[f64],
        (ci, t, h, w): (usize, usize, usize, usize),
        k: &[f64],
        co: usize,
        (kt, kh, kw): (usize, usize, usize),
        pad: [usize; 3],
    ) -> Vec<f64> {
        let ot = t + 2 * pad[0] - kt + 1;
        let oh = h + 2 * pad[1] - kh + 1;
        let ow = w + 2 * pad[2] - kw + 1;
        let mut out = vec![0.0; co * ot * oh * ow];
        for oc in 0..co {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = zt as isize + dt as isize - pad[0] as isize;
                                        let ih = zh as isize + dh as isize - pad[1] as isize;
                                        let iw = zw as isize + dw as isize - pad[2] as isize;
                                        if it < 0
                                            || ih < 0
                                            || iw < 0
                                            || it as usize >= t
                                            || ih as usize >= h
                                            || iw as usize >= w
                                        {
                                            continue;
                                        }
                                        acc += x[((ic * t + it as usize) * h + ih as usize) * w
                                            + iw as usize]
                                            * k[(((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw];
                                    }
                                }
                            }
                        }
                        out[((oc * ot + zt) * oh + zh) * ow + zw] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_all_ones_counts_27() {
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(&[1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let k = tape.constant(&[1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let y = x.conv3d(k, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.data(), vec![27.0]);
    }

    #[test]
    fn conv3d_delta_impulse_matches_oracle() {
        let mut rng = Rng::new(6);
        let dims = (1usize, 4usize, 4usize, 4usize);
        let kd = (3usize, 3usize, 3usize);
        let mut x = vec![0.0; 4 * 4 * 4];
        x[(1 * 4 + 2) * 4 + 1] = 1.0; // delta at (t=1, h=2, w=1)
        let k = randn(&mut rng, 27);
        let want = conv_oracle(&x, dims, &k, 1, kd, [1, 1, 1]);
        let tape = Tape::new(Precision::F64);
        let tx = tape.constant(&[1, 4, 4, 4], x).unwrap();
        let tk = tape.constant(&[1, 1, 3, 3, 3], k).unwrap();
        let y = tx.conv3d(tk, None, [1, 1, 1], [1, 1, 1]).unwrap().data();
        assert_eq!(y.len(), want.len());
        for (g, w) in y.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_random_matches_oracle() {
        let mut rng = Rng::new(7);
        let dims = (2usize, 3usize, 5usize, 4usize);
        let kd = (3usize, 3usize, 3usize);
        let x = randn(&mut rng, 2 * 3 * 5 * 4);
        let k = randn(&mut rng, 2 * 2 * 27);
        let want = conv_oracle(&x, dims, &k, 2, kd, [1, 0, 0]);
        let tape = Tape::new(Precision::F64);
        let tx = tape.constant(&[2, 3, 5, 4], x).unwrap();
        let tk = tape.constant(&[2, 2, 3, 3, 3], k).unwrap();
        let y = tx.conv3d(tk, None, [1, 1, 1], [1, 0, 0]).unwrap().data();
        for (g, w) in y.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn conv3d_zero_input_gives_bias() {
        let mut rng = Rng::new(8);
        let tape = Tape::new(Precision::F64);
        let x = tape.constant(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let k = tape.constant(&[2, 1, 3, 3, 3], randn(&mut rng, 54)).unwrap();
        let b = tape.row(vec![0.25, -0.5]);
        let y = x.conv3d(k, Some(b), [1, 1, 1], [1, 1, 1]).unwrap().data();
        for (i, v) in y.iter().enumerate() {
            let want = if i < 27 { 0.25 } else { -0.5 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn conv3d_kernel_larger_than_padded_input_errors() {
        let tape = Tape::new(Precision::F64);
        let x = tape.zeros(&[1, 2, 2, 2]);
        let k = tape.zeros(&[1, 1, 3, 3, 3]);
        assert!(x.conv3d(k, None, [1, 1, 1], [0, 0, 0]).is_err());
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let tape = Tape::new(Precision::F64);
        let x = tape
            .constant(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 4.0, 9.0])
            .unwrap();
        let y = x.max_pool3d([1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 2]);
        assert_eq!(y.data(), vec![5.0, 9.0]);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut store = ParamStore::new(Precision::F64);
        let x = store.add("x", &[1, 2], vec![1.0, 2.0]);
        let max_rel = grad_check(&mut store, 1e-5, |tape, bind| {
            let t = bind.get(x);
            t.mul(t)?.sum_all().sum_all_ok()
        })
        .unwrap();
        assert!(max_rel < 1e-8, "max_rel = {max_rel}");
        assert!((store.param(x).grad[0] - 2.0).abs() < 1e-12);
        assert!((store.param(x).grad[1] - 4.0).abs() < 1e-12);
    }

    // grad_check needs Result<Tensor>; wrap the infallible ops.
    trait OkExt<'t> {
        fn sum_all_ok(self) -> crate::error::Result<Tensor<'t>>;
    }
    impl<'t> OkExt<'t> for Tensor<'t> {
        fn sum_all_ok(self) -> crate::error::Result<Tensor<'t>> {
            Ok(self)
        }
    }

    #[test]
    fn grad_check_every_dense_primitive() {
        let mut rng = Rng::new(42);
        let mut store = ParamStore::new(Precision::F64);
        let a = store.add("a", &[3, 4], randn(&mut rng, 12));
        let b = store.add("b", &[4, 2], randn(&mut rng, 8));
        let bias = store.add("bias", &[1, 2], randn(&mut rng, 2));
        let gamma = store.add("gamma", &[1, 2], vec![1.1, 0.9]);
        let beta = store.add("beta", &[1, 2], vec![0.1, -0.2]);
        let table = store.add("table", &[5, 4], randn(&mut rng, 20));

        let mut vis = BoolMat::new(3, 3, true);
        vis.set(0, 2, false);
        vis.set(2, 0, false);

        let max_rel = grad_check(&mut store, 1e-5, |tape, bind| {
            let a = bind.get(a);
            let b = bind.get(b);
            // matmul -> add_row -> relu -> layer_norm
            let h = a.matmul(b)?.add_row(bind.get(bias))?;
            let h = h.relu().layer_norm(bind.get(gamma), bind.get(beta), 1e-5)?;
            // softmax family on a square made from h
            let sq = h.matmul(h.t()?)?;
            let s1 = sq.softmax_rows()?.sum_all();
            let s2 = sq.log_softmax_rows()?.mul(sq.log_softmax_rows()?)?.sum_all();
            let s3 = sq.masked_softmax_rows(&vis)?.mul(sq)?.sum_all();
            // attention over table rows via lookup + slicing + concat
            let tb = bind.get(table).lookup(&[0, 2, 4])?;
            let q = tb.slice_rows(0, 1)?;
            let (att, w) = scaled_dot_attention(q, tb, &BoolMat::new(1, 3, true))?;
            let s4 = att.mul(att)?.sum_all().add(w.sum_all())?;
            // mean/max reductions, repeat, transpose, cols
            let m = tb.mean_rows()?.repeat_rows(3)?.mul(tb)?.sum_all();
            let mx = tb.max_rows()?.sum_all();
            let cols = tb.slice_cols(1, 2)?.sum_all();
            let cat = tape
                .concat_cols(&[tb.slice_cols(0, 2)?, tb.slice_cols(2, 2)?])?
                .sub(tb)?
                .mul(tb)?
                .sum_all();
            let total = s1
                .add(s2)?
                .add(s3)?
                .add(s4)?
                .add(m)?
                .add(mx)?
                .add(cols)?
                .add(cat)?
                .scale(0.5);
            Ok(total)
        })
        .unwrap();
        assert!(max_rel < 1e-6, "max_rel = {max_rel}");
    }

    #[test]
    fn grad_check_conv_and_pool() {
        let mut rng = Rng::new(43);
        let mut store = ParamStore::new(Precision::F64);
        let x = store.add("x", &[1, 3, 4, 4], randn(&mut rng, 48));
        let k = store.add("k", &[2, 1, 3, 3, 3], randn(&mut rng, 54));
        let b = store.add("b", &[1, 2], randn(&mut rng, 2));
        let max_rel = grad_check(&mut store, 1e-5, |_tape, bind| {
            let y = bind
                .get(x)
                .conv3d(bind.get(k), Some(bind.get(b)), [1, 1, 1], [1, 1, 1])?;
            let p = y.max_pool3d([1, 2, 2], [1, 2, 2])?;
            let f = p.frames_matrix()?;
            Ok(f.mul(f)?.sum_all())
        })
        .unwrap();
        assert!(max_rel < 1e-6, "max_rel = {max_rel}");
    }

    #[test]
    fn f32_mode_rounds_through_single_precision() {
        let tape = Tape::new(Precision::F32);
        let x = tape.row(vec![0.1, 0.2]);
        for v in x.data() {
            assert_eq!(v, v as f32 as f64);
        }
        let y = x.scale(1.0 / 3.0);
        for v in y.data() {
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn repeated_forward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            let tape = Tape::new(Precision::F64);
            let a = tape.constant(&[4, 4], randn(&mut rng, 16)).unwrap();
            let b = tape.constant(&[4, 4], randn(&mut rng, 16)).unwrap();
            a.matmul(b)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .sum_all()
                .item()
                .to_bits()
        };
        assert_eq!(run(), run());
    }
}

