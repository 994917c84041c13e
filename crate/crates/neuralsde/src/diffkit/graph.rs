//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its forward
//! value, so parents always precede children and the backward sweep is a single
//! reverse pass. The tape is meant to be rebuilt for every loss evaluation; leaves
//! are bound from [`Tensor`]s and gradients are read back per node after
//! [`Graph::backward`].
//!
//! Gradient accumulation is deterministic: nodes are processed in reverse creation
//! order, each node's contribution to a parent is written in a fixed loop order, and
//! full reductions go through the fixed-chunk kernels in [`crate::par`].

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Neg,
    Matmul,
    Affine,
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Pos,
    Sum,
    Mean,
    StackCols,
    GatherCol(usize),
    GatherRows(Vec<usize>),
    ScaleBy,
    ShiftBy,
    MulBcastCol,
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Inverse of [`softplus`], `ln(e^y - 1)`; defined for `y > 0` and stable for
/// large `y`, where it approaches `y` itself.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse-mode tape over dense `f64` tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => (0, 0),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(nodes),
            grads: Vec::with_capacity(nodes),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Accumulated gradient of the last `backward` roots with respect to this node;
    /// `None` if no gradient has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            parents,
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. Its data is copied onto the tape; gradients flow to
    /// it only if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        let id = self.push(
            Op::Leaf,
            Vec::new(),
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
        );
        self.nodes[id.0].needs_grad = tensor.requires_grad();
        id
    }

    /// Binds a tensor as a leaf with an explicit gradient flag, overriding the
    /// tensor's own `requires_grad`. Used to freeze or unfreeze parameter sets per
    /// tape without mutating the owning model.
    pub fn leaf_as(&mut self, tensor: &Tensor, requires_grad: bool) -> NodeId {
        let id = self.leaf(tensor);
        self.nodes[id.0].needs_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape {
                op: "constant",
                shape: shape.to_vec(),
                detail: format!("{} values for {} slots", data.len(), expect),
            });
        }
        Ok(self.push(Op::Leaf, Vec::new(), shape.to_vec(), data))
    }

    pub fn const_vec(&mut self, data: Vec<f64>) -> NodeId {
        let n = data.len();
        self.push(Op::Leaf, Vec::new(), vec![n], data)
    }

    pub fn const_scalar(&mut self, x: f64) -> NodeId {
        self.push(Op::Leaf, Vec::new(), vec![1], vec![x])
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64 + Sync,
    ) -> Result<NodeId> {
        self.check_same_shape(name, a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        let mut out = vec![0.0; self.nodes[a.0].value.len()];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            par::fill(&mut out, |i| f(av[i], bv[i]));
        }
        Ok(self.push(op, vec![a, b], shape, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Div, "div", a, b, |x, y| x / y)
    }

    fn unary(
        &mut self,
        op: Op,
        a: NodeId,
        f: impl Fn(f64) -> f64 + Sync,
    ) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let mut out = vec![0.0; self.nodes[a.0].value.len()];
        {
            let av = &self.nodes[a.0].value;
            par::fill(&mut out, |i| f(av[i]));
        }
        self.push(op, vec![a], shape, out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn sub_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.add_scalar(a, -c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulScalar(c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a, |x| x.tanh())
    }

    pub fn softplus_node(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a, softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|v| **v <= 0.0) {
            return Err(Error::NonPositive {
                what: "log input".to_string(),
                value: bad,
            });
        }
        Ok(self.unary(Op::Log, a, |x| x.ln()))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|v| **v <= 0.0) {
            return Err(Error::NonPositive {
                what: "sqrt input".to_string(),
                value: bad,
            });
        }
        Ok(self.unary(Op::Sqrt, a, |x| x.sqrt()))
    }

    /// Positive part `max(x, 0)`; the subgradient at 0 is taken as 0.
    pub fn pos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Pos, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = par::sum(&self.nodes[a.0].value);
        self.push(Op::Sum, vec![a], vec![1], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let s = par::sum(&self.nodes[a.0].value) / n as f64;
        self.push(Op::Mean, vec![a], vec![1], vec![s])
    }

    /// Dot product of two equal-shape tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: xs,
                rhs: ws,
            });
        }
        let (m, k) = (xs[0], xs[1]);
        let n = ws[1];
        let mut out = vec![0.0; m * n];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            par::rowwise(&mut out, n, |r, row| {
                let xrow = &xv[r * k..(r + 1) * k];
                for (kk, &a) in xrow.iter().enumerate() {
                    let wrow = &wv[kk * n..(kk + 1) * n];
                    for (o, &wj) in row.iter_mut().zip(wrow) {
                        *o += a * wj;
                    }
                }
            });
        }
        Ok(self.push(Op::Matmul, vec![x, w], vec![m, n], out))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        let n = ws[1];
        if bs != [n] {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                lhs: bs,
                rhs: vec![n],
            });
        }
        let (m, k) = (xs[0], xs[1]);
        let mut out = vec![0.0; m * n];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            par::rowwise(&mut out, n, |r, row| {
                row.copy_from_slice(bv);
                let xrow = &xv[r * k..(r + 1) * k];
                for (kk, &a) in xrow.iter().enumerate() {
                    let wrow = &wv[kk * n..(kk + 1) * n];
                    for (o, &wj) in row.iter_mut().zip(wrow) {
                        *o += a * wj;
                    }
                }
            });
        }
        Ok(self.push(Op::Affine, vec![x, w, b], vec![m, n], out))
    }

    /// Stacks single-column inputs (shape `[m]` or `[m, 1]`) into an `[m, k]` matrix.
    pub fn stack_cols(&mut self, cols: &[NodeId]) -> Result<NodeId> {
        if cols.is_empty() {
            return Err(Error::Empty {
                what: "stack_cols input list".to_string(),
            });
        }
        let m = rows_cols(&self.nodes[cols[0].0].shape).0;
        for &c in cols {
            let (rows, width) = rows_cols(&self.nodes[c.0].shape);
            if rows != m || width != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack_cols",
                    lhs: vec![m, 1],
                    rhs: self.nodes[c.0].shape.clone(),
                });
            }
        }
        let k = cols.len();
        let mut out = vec![0.0; m * k];
        for (c, &id) in cols.iter().enumerate() {
            let v = &self.nodes[id.0].value;
            for r in 0..m {
                out[r * k + c] = v[r];
            }
        }
        Ok(self.push(Op::StackCols, cols.to_vec(), vec![m, k], out))
    }

    /// Extracts column `j` of an `[m, k]` matrix as a vector `[m]`.
    pub fn gather_col(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || j >= shape[1] {
            return Err(Error::InvalidShape {
                op: "gather_col",
                shape,
                detail: format!("column {j}"),
            });
        }
        let (m, k) = (shape[0], shape[1]);
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = (0..m).map(|r| v[r * k + j]).collect();
        Ok(self.push(Op::GatherCol(j), vec![x], vec![m], out))
    }

    /// Gathers rows by index; duplicate indices are allowed and their gradients
    /// accumulate.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let (m, k) = rows_cols(&shape);
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape,
                detail: "rank must be 1 or 2".to_string(),
            });
        }
        if let Some(&bad) = rows.iter().find(|r| **r >= m) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape,
                detail: format!("row index {bad} out of {m}"),
            });
        }
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows.len() * k];
        for (r, &src) in rows.iter().enumerate() {
            out[r * k..(r + 1) * k].copy_from_slice(&v[src * k..(src + 1) * k]);
        }
        let out_shape = if shape.len() == 1 {
            vec![rows.len()]
        } else {
            vec![rows.len(), k]
        };
        Ok(self.push(Op::GatherRows(rows.to_vec()), vec![x], out_shape, out))
    }

    /// Broadcast multiply by a scalar node: `out = s * a`.
    pub fn scale_by(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "scale_by",
                shape: self.nodes[s.0].shape.clone(),
                detail: "scale must be scalar".to_string(),
            });
        }
        let sv = self.nodes[s.0].value[0];
        let shape = self.nodes[a.0].shape.clone();
        let mut out = vec![0.0; self.nodes[a.0].value.len()];
        {
            let av = &self.nodes[a.0].value;
            par::fill(&mut out, |i| sv * av[i]);
        }
        Ok(self.push(Op::ScaleBy, vec![s, a], shape, out))
    }

    /// Broadcast add of a scalar node: `out = a + s`.
    pub fn shift_by(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "shift_by",
                shape: self.nodes[s.0].shape.clone(),
                detail: "shift must be scalar".to_string(),
            });
        }
        let sv = self.nodes[s.0].value[0];
        let shape = self.nodes[a.0].shape.clone();
        let mut out = vec![0.0; self.nodes[a.0].value.len()];
        {
            let av = &self.nodes[a.0].value;
            par::fill(&mut out, |i| av[i] + sv);
        }
        Ok(self.push(Op::ShiftBy, vec![s, a], shape, out))
    }

    /// Multiplies every column of `a` (`[m, j]`) elementwise by the vector `v` (`[m]`).
    pub fn mul_bcast_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let ashape = self.nodes[a.0].shape.clone();
        let vshape = self.nodes[v.0].shape.clone();
        if ashape.len() != 2 || vshape.len() != 1 || ashape[0] != vshape[0] {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast_col",
                lhs: ashape,
                rhs: vshape,
            });
        }
        let (m, j) = (ashape[0], ashape[1]);
        let mut out = vec![0.0; m * j];
        {
            let av = &self.nodes[a.0].value;
            let vv = &self.nodes[v.0].value;
            par::rowwise(&mut out, j, |r, row| {
                let arow = &av[r * j..(r + 1) * j];
                let s = vv[r];
                for (o, &x) in row.iter_mut().zip(arow) {
                    *o = x * s;
                }
            });
        }
        Ok(self.push(Op::MulBcastCol, vec![a, v], vec![m, j], out))
    }

    /// Runs the reverse sweep from a scalar root, adding this pass's gradients into
    /// the per-node accumulators. Repeated calls without [`Graph::zero_grads`]
    /// accumulate.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        let n = root.0 + 1;
        let mut pass: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        pass.resize_with(n, || None);
        pass[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.scatter(i, &g, &mut pass);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn pass_buf<'a>(
        pass: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        p: usize,
    ) -> &'a mut [f64] {
        pass[p]
            .get_or_insert_with(|| vec![0.0; nodes[p].value.len()])
            .as_mut_slice()
    }

    fn scatter(&self, i: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let parent_needs = |p: NodeId| self.nodes[p.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &p in &node.parents {
                    if parent_needs(p) {
                        let buf = Self::pass_buf(pass, &self.nodes, p.0);
                        for (b, d) in buf.iter_mut().zip(g) {
                            *b += d;
                        }
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if parent_needs(a) {
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (s, d) in buf.iter_mut().zip(g) {
                        *s += d;
                    }
                }
                if parent_needs(b) {
                    let buf = Self::pass_buf(pass, &self.nodes, b.0);
                    for (s, d) in buf.iter_mut().zip(g) {
                        *s -= d;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if parent_needs(a) {
                    let bv = &self.nodes[b.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if parent_needs(b) {
                    let av = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, b.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if parent_needs(a) {
                    let bv = &self.nodes[b.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] / bv[i];
                    }
                }
                if parent_needs(b) {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, b.0);
                    for i in 0..g.len() {
                        buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddScalar => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (s, d) in buf.iter_mut().zip(g) {
                        *s += d;
                    }
                }
            }
            Op::MulScalar(c) => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let c = *c;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (s, d) in buf.iter_mut().zip(g) {
                        *s += c * d;
                    }
                }
            }
            Op::Neg => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (s, d) in buf.iter_mut().zip(g) {
                        *s -= d;
                    }
                }
            }
            Op::Tanh => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let y = &node.value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Softplus => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let x = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * sigmoid(x[i]);
                    }
                }
            }
            Op::Exp => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let y = &node.value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let x = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] / x[i];
                    }
                }
            }
            Op::Square => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let x = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += 2.0 * x[i] * g[i];
                    }
                }
            }
            Op::Sqrt => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let y = &node.value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] / (2.0 * y[i]);
                    }
                }
            }
            Op::Pos => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let x = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let d = g[0];
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for s in buf.iter_mut() {
                        *s += d;
                    }
                }
            }
            Op::Mean => {
                let a = node.parents[0];
                if parent_needs(a) {
                    let n = self.nodes[a.0].value.len().max(1);
                    let d = g[0] / n as f64;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for s in buf.iter_mut() {
                        *s += d;
                    }
                }
            }
            Op::Matmul | Op::Affine => {
                let (x, w) = (node.parents[0], node.parents[1]);
                let (m, k) = rows_cols(&self.nodes[x.0].shape);
                let n = node.shape[1];
                if parent_needs(x) {
                    let wv = &self.nodes[w.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, x.0);
                    par::rowwise(buf, k, |r, row| {
                        let grow = &g[r * n..(r + 1) * n];
                        for (kk, slot) in row.iter_mut().enumerate() {
                            let wrow = &wv[kk * n..(kk + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * wrow[j];
                            }
                            *slot += acc;
                        }
                    });
                }
                if parent_needs(w) {
                    let xv = &self.nodes[x.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, w.0);
                    par::rowwise(buf, n, |kk, row| {
                        for r in 0..m {
                            let a = xv[r * k + kk];
                            let grow = &g[r * n..(r + 1) * n];
                            for (slot, &gj) in row.iter_mut().zip(grow) {
                                *slot += a * gj;
                            }
                        }
                    });
                }
                if let Op::Affine = node.op {
                    let b = node.parents[2];
                    if parent_needs(b) {
                        let buf = Self::pass_buf(pass, &self.nodes, b.0);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for (slot, &gj) in buf.iter_mut().zip(grow) {
                                *slot += gj;
                            }
                        }
                    }
                }
            }
            Op::StackCols => {
                let k = node.parents.len();
                let m = node.shape[0];
                for (c, &p) in node.parents.iter().enumerate() {
                    if parent_needs(p) {
                        let buf = Self::pass_buf(pass, &self.nodes, p.0);
                        for r in 0..m {
                            buf[r] += g[r * k + c];
                        }
                    }
                }
            }
            Op::GatherCol(j) => {
                let p = node.parents[0];
                if parent_needs(p) {
                    let k = self.nodes[p.0].shape[1];
                    let j = *j;
                    let buf = Self::pass_buf(pass, &self.nodes, p.0);
                    for (r, &d) in g.iter().enumerate() {
                        buf[r * k + j] += d;
                    }
                }
            }
            Op::GatherRows(rows) => {
                let p = node.parents[0];
                if parent_needs(p) {
                    let (_, k) = rows_cols(&self.nodes[p.0].shape);
                    let buf = Self::pass_buf(pass, &self.nodes, p.0);
                    for (r, &src) in rows.iter().enumerate() {
                        let grow = &g[r * k..(r + 1) * k];
                        let brow = &mut buf[src * k..(src + 1) * k];
                        for (slot, &d) in brow.iter_mut().zip(grow) {
                            *slot += d;
                        }
                    }
                }
            }
            Op::ScaleBy => {
                let (s, a) = (node.parents[0], node.parents[1]);
                if parent_needs(s) {
                    let av = &self.nodes[a.0].value;
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * av[i];
                    }
                    Self::pass_buf(pass, &self.nodes, s.0)[0] += acc;
                }
                if parent_needs(a) {
                    let sv = self.nodes[s.0].value[0];
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (slot, &d) in buf.iter_mut().zip(g) {
                        *slot += sv * d;
                    }
                }
            }
            Op::ShiftBy => {
                let (s, a) = (node.parents[0], node.parents[1]);
                if parent_needs(s) {
                    let mut acc = 0.0;
                    for &d in g {
                        acc += d;
                    }
                    Self::pass_buf(pass, &self.nodes, s.0)[0] += acc;
                }
                if parent_needs(a) {
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    for (slot, &d) in buf.iter_mut().zip(g) {
                        *slot += d;
                    }
                }
            }
            Op::MulBcastCol => {
                let (a, v) = (node.parents[0], node.parents[1]);
                let j = node.shape[1];
                if parent_needs(a) {
                    let vv = &self.nodes[v.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, a.0);
                    par::rowwise(buf, j, |r, row| {
                        let grow = &g[r * j..(r + 1) * j];
                        let s = vv[r];
                        for (slot, &d) in row.iter_mut().zip(grow) {
                            *slot += s * d;
                        }
                    });
                }
                if parent_needs(v) {
                    let av = &self.nodes[a.0].value;
                    let buf = Self::pass_buf(pass, &self.nodes, v.0);
                    par::rowwise(buf, 1, |r, slot| {
                        let grow = &g[r * j..(r + 1) * j];
                        let arow = &av[r * j..(r + 1) * j];
                        let mut acc = 0.0;
                        for c in 0..j {
                            acc += grow[c] * arow[c];
                        }
                        slot[0] += acc;
                    });
                }
            }
        }
    }
}
