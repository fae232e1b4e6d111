use std::collections::BTreeMap;

use crate::diffcore::tensor::{
    conv2d_sample_raw, sigmoid_scalar, softplus_scalar, Tensor,
};
use crate::error::{Error, Result};

/// Identifier of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Named tensors bound to a graph's inputs at evaluation time.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients keyed by input name, as returned by [`Graph::backward`].
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `[m, n] + [n]`, the vector added to every row.
    RowAdd(NodeId, NodeId),
    /// `[m, n] * [n]`, the vector scaling every row elementwise.
    RowMul(NodeId, NodeId),
    /// `[co, ci, k, k] * [co, ci]`, one scale per k x k block.
    BlockMul(NodeId, NodeId),
    /// Valid cross-correlation of `[m, ci, h, w]` with `[co, ci, k, k]` plus `[co]` bias.
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId },
    Sigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape { input: NodeId, shape: Vec<usize> },
    /// Fused stable mean of -log softmax(logits)[label] over the batch.
    SoftmaxXent { logits: NodeId, labels: NodeId },
    /// Mean over rows of the squared Euclidean distance.
    SquareError { pred: NodeId, target: NodeId },
    /// Test fixture: forward x^2 with a deliberately wrong adjoint.
    #[cfg(test)]
    BadSquare(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::RowAdd(..) => "row_add",
            Op::RowMul(..) => "row_mul",
            Op::BlockMul(..) => "block_mul",
            Op::Conv2d { .. } => "conv2d",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::SquareError { .. } => "square_error",
            #[cfg(test)]
            Op::BadSquare(..) => "bad_square",
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// A computation graph for reverse-mode differentiation.
///
/// Nodes are appended in construction order, so the sequence is topological by
/// construction and acyclic (an op can only reference ids that already exist).
/// The graph is reusable: `evaluate` may be called repeatedly with different
/// bindings, and replaying identical inputs reproduces identical outputs
/// bit for bit (all kernels are sequential with a fixed reduction order).
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    check_finite: bool,
    evaluated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            check_finite: true,
            evaluated: false,
        }
    }

    /// Disables the per-node finite check (timed runs only).
    pub fn set_check_finite(&mut self, check: bool) {
        self.check_finite = check;
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, value: None });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input, bound at evaluation time. Re-declaring a name
    /// returns the existing node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input { name: name.to_string() });
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Embeds a fixed tensor; constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Constant);
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn row_add(&mut self, matrix: NodeId, vector: NodeId) -> NodeId {
        self.push(Op::RowAdd(matrix, vector))
    }

    pub fn row_mul(&mut self, matrix: NodeId, vector: NodeId) -> NodeId {
        self.push(Op::RowMul(matrix, vector))
    }

    pub fn block_mul(&mut self, kernels: NodeId, scales: NodeId) -> NodeId {
        self.push(Op::BlockMul(kernels, scales))
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Conv2d { input, kernels, bias })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { input, shape })
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxXent { logits, labels })
    }

    pub fn square_error(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::SquareError { pred, target })
    }

    #[cfg(test)]
    pub(crate) fn bad_square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::BadSquare(a))
    }

    fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input { name } => format!("node {} (input '{name}')", id.0),
            op => format!("node {} ({})", id.0, op.kind()),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("operand evaluated before use (nodes are topological)")
    }

    /// Value of a node after [`Graph::evaluate`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(Error::InvalidArgument(
                "graph not evaluated; call evaluate before reading values".into(),
            ));
        }
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no value", self.label(id))))
    }

    /// Runs the forward pass with the given input bindings.
    ///
    /// Intermediate values are retained for [`Graph::backward`]. Fails with a
    /// message naming the offending node on any shape mismatch or, when the
    /// finite check is enabled, on any non-finite intermediate.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<()> {
        for name in self.inputs.keys() {
            if !bindings.contains_key(name) {
                return Err(Error::InvalidArgument(format!("unbound input '{name}'")));
            }
        }
        for i in 0..self.nodes.len() {
            let value = self.forward_node(i, bindings)?;
            if self.check_finite && !value.is_finite() {
                return Err(Error::NonFinite { location: self.label(NodeId(i)) });
            }
            self.nodes[i].value = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn forward_node(&self, i: usize, bindings: &Bindings) -> Result<Tensor> {
        let this = NodeId(i);
        let shape_err = |detail: String| Error::shape(self.label(this), detail);
        match &self.nodes[i].op {
            Op::Input { name } => Ok(bindings[name].clone()),
            Op::Constant => Ok(self.nodes[i].value.clone().expect("constants hold a value")),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(format!(
                        "matmul of {:?} by {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                a.matmul(b)
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                if a.rank() != 2 {
                    return Err(shape_err(format!("transpose of rank {}", a.rank())));
                }
                a.transposed()
            }
            Op::Add(a, b) => self.binary(*a, *b, this, |x, y| x + y),
            Op::Sub(a, b) => self.binary(*a, *b, this, |x, y| x - y),
            Op::Mul(a, b) => self.binary(*a, *b, this, |x, y| x * y),
            Op::Div(a, b) => self.binary(*a, *b, this, |x, y| x / y),
            Op::RowAdd(m, v) => self.rowwise(*m, *v, this, |x, y| x + y),
            Op::RowMul(m, v) => self.rowwise(*m, *v, this, |x, y| x * y),
            Op::BlockMul(k, s) => {
                let (k, s) = (self.val(*k), self.val(*s));
                if k.rank() != 4 || s.rank() != 2 || k.shape()[0] != s.shape()[0] || k.shape()[1] != s.shape()[1] {
                    return Err(shape_err(format!(
                        "block_mul of {:?} by {:?}",
                        k.shape(),
                        s.shape()
                    )));
                }
                let block: usize = k.shape()[2] * k.shape()[3];
                let mut out = vec![0.0; k.numel()];
                for (bi, scale) in s.data().iter().enumerate() {
                    for p in 0..block {
                        out[bi * block + p] = k.data()[bi * block + p] * scale;
                    }
                }
                Tensor::from_vec(k.shape().to_vec(), out)
            }
            Op::Conv2d { input, kernels, bias } => {
                let (x, k, b) = (self.val(*input), self.val(*kernels), self.val(*bias));
                if x.rank() != 4 || k.rank() != 4 || b.rank() != 1 {
                    return Err(shape_err(format!(
                        "conv2d of input {:?}, kernels {:?}, bias {:?}",
                        x.shape(),
                        k.shape(),
                        b.shape()
                    )));
                }
                let (m, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (co, kci, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
                if kci != ci || kh != kw || kh > h || kh > w || b.shape()[0] != co {
                    return Err(shape_err(format!(
                        "conv2d of input {:?}, kernels {:?}, bias {:?}",
                        x.shape(),
                        k.shape(),
                        b.shape()
                    )));
                }
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let mut out = vec![0.0; m * co * oh * ow];
                for s in 0..m {
                    conv2d_sample_raw(
                        &x.data()[s * ci * h * w..(s + 1) * ci * h * w],
                        k.data(),
                        b.data(),
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        &mut out[s * co * oh * ow..(s + 1) * co * oh * ow],
                    );
                }
                Tensor::from_vec(vec![m, co, oh, ow], out)
            }
            Op::Sigmoid(a) => Ok(self.val(*a).map(sigmoid_scalar)),
            Op::Softplus(a) => Ok(self.val(*a).map(softplus_scalar)),
            Op::Log(a) => Ok(self.val(*a).map(f64::ln)),
            Op::Exp(a) => Ok(self.val(*a).map(f64::exp)),
            Op::Square(a) => Ok(self.val(*a).map(|x| x * x)),
            Op::Sum(a) => Ok(Tensor::scalar(self.val(*a).data().iter().sum())),
            Op::Mean(a) => {
                let t = self.val(*a);
                Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64))
            }
            Op::Reshape { input, shape } => {
                let t = self.val(*input);
                let numel: usize = shape.iter().product();
                if numel != t.numel() {
                    return Err(shape_err(format!(
                        "reshape of {:?} to {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Tensor::from_vec(shape.clone(), t.data().to_vec())
            }
            Op::SoftmaxXent { logits, labels } => {
                let (z, y) = (self.val(*logits), self.val(*labels));
                if z.rank() != 2 || y.rank() != 1 || y.shape()[0] != z.shape()[0] {
                    return Err(shape_err(format!(
                        "softmax_xent of logits {:?}, labels {:?}",
                        z.shape(),
                        y.shape()
                    )));
                }
                let (m, k) = (z.shape()[0], z.shape()[1]);
                let mut total = 0.0;
                for r in 0..m {
                    let row = z.row(r);
                    let label = y.data()[r];
                    if label.fract() != 0.0 || label < 0.0 || label >= k as f64 {
                        return Err(Error::InvalidArgument(format!(
                            "{}: label {label} out of range for {k} classes",
                            self.label(this)
                        )));
                    }
                    total += log_sum_exp(row) - row[label as usize];
                }
                Ok(Tensor::scalar(total / m as f64))
            }
            Op::SquareError { pred, target } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                if p.shape() != t.shape() {
                    return Err(shape_err(format!(
                        "square_error of {:?} vs {:?}",
                        p.shape(),
                        t.shape()
                    )));
                }
                let rows = if p.rank() == 2 { p.shape()[0] } else { 1 };
                let ss: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Ok(Tensor::scalar(ss / rows as f64))
            }
            #[cfg(test)]
            Op::BadSquare(a) => Ok(self.val(*a).map(|x| x * x)),
        }
    }

    fn binary(
        &self,
        a: NodeId,
        b: NodeId,
        this: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            Ok(ta.map(|x| f(x, s)))
        } else if ta.numel() == 1 {
            let s = ta.data()[0];
            Ok(tb.map(|y| f(s, y)))
        } else {
            Err(Error::shape(
                self.label(this),
                format!("elementwise op on {:?} vs {:?}", ta.shape(), tb.shape()),
            ))
        }
    }

    fn rowwise(
        &self,
        m: NodeId,
        v: NodeId,
        this: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tm, tv) = (self.val(m), self.val(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(Error::shape(
                self.label(this),
                format!("rowwise op on {:?} with {:?}", tm.shape(), tv.shape()),
            ));
        }
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = f(tm.data()[r * cols + c], tv.data()[c]);
            }
        }
        Tensor::from_vec(vec![rows, cols], out)
    }

    /// Reverse pass from a scalar root.
    ///
    /// Returns the gradient of the root with respect to every bound input
    /// whose tensor is marked `requires_grad`, as zero tensors when the input
    /// does not influence the root. Gradients accumulate additively when a
    /// node feeds multiple consumers.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::InvalidArgument(
                "backward called before evaluate".into(),
            ));
        }
        let root_value = self.value(root)?;
        if root_value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, {} has shape {:?}",
                self.label(root),
                root_value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, id) in &self.inputs {
            let bound = self.val(*id);
            if !bound.requires_grad() {
                continue;
            }
            let grad = match &grads[id.0] {
                Some(g) => Tensor::from_vec(bound.shape().to_vec(), g.clone())?,
                None => Tensor::zeros(bound.shape().to_vec()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn adjoint(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id.0].op {
            Op::Input { .. } | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * tb.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ta.data()[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                Self::accumulate(grads, *a, m * k, |s| {
                    for (si, di) in s.iter_mut().zip(&da) {
                        *si += di;
                    }
                });
                Self::accumulate(grads, *b, k * n, |s| {
                    for (si, di) in s.iter_mut().zip(&db) {
                        *si += di;
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = self.val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                Self::accumulate(grads, *a, m * n, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.binary_adjoint(*a, *b, g, grads, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                self.binary_adjoint(*a, *b, g, grads, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                self.binary_adjoint(*a, *b, g, grads, |_, y| y, |x, _| x);
            }
            Op::Div(a, b) => {
                self.binary_adjoint(*a, *b, g, grads, |_, y| 1.0 / y, |x, y| -x / (y * y));
            }
            Op::RowAdd(m_id, v_id) => {
                let tm = self.val(*m_id);
                let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
                Self::accumulate(grads, *m_id, rows * cols, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                Self::accumulate(grads, *v_id, cols, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::RowMul(m_id, v_id) => {
                let (tm, tv) = (self.val(*m_id), self.val(*v_id));
                let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
                Self::accumulate(grads, *m_id, rows * cols, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[r * cols + c] * tv.data()[c];
                        }
                    }
                });
                Self::accumulate(grads, *v_id, cols, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c] * tm.data()[r * cols + c];
                        }
                    }
                });
            }
            Op::BlockMul(k_id, s_id) => {
                let (tk, ts) = (self.val(*k_id), self.val(*s_id));
                let block = tk.shape()[2] * tk.shape()[3];
                let nblocks = ts.numel();
                Self::accumulate(grads, *k_id, tk.numel(), |s| {
                    for bi in 0..nblocks {
                        for p in 0..block {
                            s[bi * block + p] += g[bi * block + p] * ts.data()[bi];
                        }
                    }
                });
                Self::accumulate(grads, *s_id, nblocks, |s| {
                    for bi in 0..nblocks {
                        for p in 0..block {
                            s[bi] += g[bi * block + p] * tk.data()[bi * block + p];
                        }
                    }
                });
            }
            Op::Conv2d { input, kernels, bias } => {
                let (tx, tk) = (self.val(*input), self.val(*kernels));
                let (m, ci, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (co, k) = (tk.shape()[0], tk.shape()[2]);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let xdat = tx.data();
                let kdat = tk.data();
                Self::accumulate(grads, *input, m * ci * h * w, |s| {
                    for smp in 0..m {
                        for c in 0..co {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[smp * co * oh * ow + c * oh * ow + oy * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for j in 0..ci {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                s[smp * ci * h * w
                                                    + j * h * w
                                                    + (oy + ky) * w
                                                    + (ox + kx)] +=
                                                    gv * kdat[c * ci * k * k + j * k * k + ky * k + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accumulate(grads, *kernels, co * ci * k * k, |s| {
                    for smp in 0..m {
                        for c in 0..co {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[smp * co * oh * ow + c * oh * ow + oy * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for j in 0..ci {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                s[c * ci * k * k + j * k * k + ky * k + kx] += gv
                                                    * xdat[smp * ci * h * w
                                                        + j * h * w
                                                        + (oy + ky) * w
                                                        + (ox + kx)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accumulate(grads, *bias, co, |s| {
                    for smp in 0..m {
                        for c in 0..co {
                            for p in 0..oh * ow {
                                s[c] += g[smp * co * oh * ow + c * oh * ow + p];
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.val(id);
                Self::accumulate(grads, *a, y.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        let yi = y.data()[i];
                        *si += g[i] * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                Self::accumulate(grads, *a, x.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] * sigmoid_scalar(x.data()[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.val(*a);
                Self::accumulate(grads, *a, x.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] / x.data()[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.val(id);
                Self::accumulate(grads, *a, y.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] * y.data()[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.val(*a);
                Self::accumulate(grads, *a, x.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] * 2.0 * x.data()[i];
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                Self::accumulate(grads, *a, n, |s| {
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                let c = g[0] / n as f64;
                Self::accumulate(grads, *a, n, |s| {
                    for si in s.iter_mut() {
                        *si += c;
                    }
                });
            }
            Op::Reshape { input, .. } => {
                let n = self.val(*input).numel();
                Self::accumulate(grads, *input, n, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
            }
            Op::SoftmaxXent { logits, labels } => {
                let (z, y) = (self.val(*logits), self.val(*labels));
                let (m, k) = (z.shape()[0], z.shape()[1]);
                let scale = g[0] / m as f64;
                Self::accumulate(grads, *logits, m * k, |s| {
                    for r in 0..m {
                        let row = z.row(r);
                        let lse = log_sum_exp(row);
                        let label = y.data()[r] as usize;
                        for c in 0..k {
                            let p = (row[c] - lse).exp();
                            let indicator = if c == label { 1.0 } else { 0.0 };
                            s[r * k + c] += scale * (p - indicator);
                        }
                    }
                });
                // Integer labels carry no gradient.
            }
            Op::SquareError { pred, target } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                let rows = if p.rank() == 2 { p.shape()[0] } else { 1 };
                let scale = 2.0 * g[0] / rows as f64;
                let n = p.numel();
                Self::accumulate(grads, *pred, n, |s| {
                    for i in 0..n {
                        s[i] += scale * (p.data()[i] - t.data()[i]);
                    }
                });
                Self::accumulate(grads, *target, n, |s| {
                    for i in 0..n {
                        s[i] -= scale * (p.data()[i] - t.data()[i]);
                    }
                });
            }
            #[cfg(test)]
            Op::BadSquare(a) => {
                let x = self.val(*a);
                Self::accumulate(grads, *a, x.numel(), |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        // Wrong on purpose: 3x instead of 2x.
                        *si += g[i] * 3.0 * x.data()[i];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_adjoint(
        &self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfda: impl Fn(f64, f64) -> f64,
        dfdb: impl Fn(f64, f64) -> f64,
    ) {
        let (ta, tb) = (self.val(a), self.val(b));
        let (na, nb) = (ta.numel(), tb.numel());
        if na == nb {
            Self::accumulate(grads, a, na, |s| {
                for i in 0..na {
                    s[i] += g[i] * dfda(ta.data()[i], tb.data()[i]);
                }
            });
            Self::accumulate(grads, b, nb, |s| {
                for i in 0..nb {
                    s[i] += g[i] * dfdb(ta.data()[i], tb.data()[i]);
                }
            });
        } else if nb == 1 {
            let y = tb.data()[0];
            Self::accumulate(grads, a, na, |s| {
                for i in 0..na {
                    s[i] += g[i] * dfda(ta.data()[i], y);
                }
            });
            Self::accumulate(grads, b, 1, |s| {
                for i in 0..na {
                    s[0] += g[i] * dfdb(ta.data()[i], y);
                }
            });
        } else {
            let x = ta.data()[0];
            Self::accumulate(grads, a, 1, |s| {
                for i in 0..nb {
                    s[0] += g[i] * dfda(x, tb.data()[i]);
                }
            });
            Self::accumulate(grads, b, nb, |s| {
                for i in 0..nb {
                    s[i] += g[i] * dfdb(x, tb.data()[i]);
                }
            });
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Maximum symmetric relative error between the analytic gradient and a
/// central finite difference, over every entry of every bound tensor marked
/// `requires_grad`.
///
/// The finite-difference side never consults the adjoints, so it serves as an
/// independent oracle for them: `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn grad_check<F>(build: F, point: &Bindings, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> NodeId,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step must be > 0".into()));
    }
    let mut graph = Graph::new();
    let root = build(&mut graph);
    graph.evaluate(point)?;
    let analytic = graph.backward(root)?;

    let mut worst = 0.0_f64;
    for (name, tensor) in point {
        if !tensor.requires_grad() {
            continue;
        }
        let grad = &analytic[name];
        for i in 0..tensor.numel() {
            let mut probe = point.clone();
            let base = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = base + step;
            graph.evaluate(&probe)?;
            let up = graph.value(root)?.item()?;
            probe.get_mut(name).unwrap().data_mut()[i] = base - step;
            graph.evaluate(&probe)?;
            let down = graph.value(root)?.item()?;
            let fd = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
