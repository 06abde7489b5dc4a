use std::cell::RefCell;

use super::{NumericsError, Result, Scalar, Tensor, EPS_NORM};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operation record. Parents are node indices, which are always
/// smaller than the node's own index, so reverse id order is a reverse
/// topological order.
#[derive(Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, F),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Clamp(usize, F, F),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SoftmaxRows(usize),
    /// Saved per-row input norms for the backward pass.
    L2NormalizeRows(usize, Vec<F>),
    /// `mask[i*m + j] == true` marks entries that participate in row `i`'s
    /// log-sum-exp; masked-out entries get zero gradient.
    MaskedLogSumExpRows(usize, Vec<bool>),
    TakeDiag(usize),
    PickPerRow(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    HCat(usize, usize),
    AddRowVec(usize, usize),
    AddColVec(usize, usize),
}

struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Define-by-run gradient tape. A tape and the tensors recorded on it form
/// a single-threaded unit of work (`RefCell`, hence `!Sync`); independent
/// tapes may run concurrently.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, values, grad: None, requires_grad, op });
        Var(nodes.len() - 1)
    }

    /// Records a tensor that does not receive gradients.
    pub fn constant(&self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Records a tensor that accumulates `d loss / d tensor` on backward.
    pub fn param(&self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn scalar_const(&self, v: F) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].values.len()
    }

    /// Snapshot of a node's current values.
    pub fn value(&self, v: Var) -> Tensor<F> {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].values.clone()).expect("node invariant")
    }

    /// Gradient accumulated by the last `backward` call, if the node was
    /// reached. `None` means the loss does not depend on this node.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let nodes = self.nodes.borrow();
        nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(nodes[v.0].shape.clone(), g.clone()).expect("node invariant"))
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn binary_elementwise(
        &self,
        name: &str,
        a: Var,
        b: Var,
        forward: impl Fn(F, F) -> F,
        op: impl Fn(usize, usize) -> Op<F>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.numel(a), self.numel(b));
        // Broadcasting is restricted to scalar-with-tensor and equal shapes.
        let (shape, values) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].values;
            let vb = &nodes[b.0].values;
            if sa == sb {
                (sa.clone(), va.iter().zip(vb).map(|(&x, &y)| forward(x, y)).collect())
            } else if nb == 1 {
                let y = vb[0];
                (sa.clone(), va.iter().map(|&x| forward(x, y)).collect())
            } else if na == 1 {
                let x = va[0];
                (sb.clone(), vb.iter().map(|&y| forward(x, y)).collect())
            } else {
                return Err(NumericsError::Dimension(format!(
                    "{name}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
                )));
            }
        };
        let rg = self.requires_grad(a.0) || self.requires_grad(b.0);
        Ok(self.push(shape, values, rg, op(a.0, b.0)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let values = self.nodes.borrow()[a.0].values.iter().map(|&x| x + c).collect();
        let rg = self.requires_grad(a.0);
        self.push(self.shape(a), values, rg, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&self, a: Var, c: F) -> Var {
        let values = self.nodes.borrow()[a.0].values.iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a.0);
        self.push(self.shape(a), values, rg, Op::MulScalar(a.0, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -F::one())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].values;
            let vb = &nodes[b.0].values;
            let mut out = vec![F::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = va[i * k + p];
                    for j in 0..n {
                        out[i * n + j] = out[i * n + j] + x * vb[p * n + j];
                    }
                }
            }
            out
        };
        let rg = self.requires_grad(a.0) || self.requires_grad(b.0);
        Ok(self.push(vec![m, n], values, rg, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!("transpose on rank {}", sa.len())));
        }
        let (n, m) = (sa[0], sa[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            let mut out = vec![F::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = v[i * m + j];
                }
            }
            out
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![m, n], values, rg, Op::Transpose(a.0)))
    }

    fn unary(&self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let values = self.nodes.borrow()[a.0].values.iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a.0);
        self.push(self.shape(a), values, rg, op)
    }

    /// Elementwise exponential. Finite for f64 inputs below ~709; the
    /// softmax and log-sum-exp paths subtract the row max so they never
    /// approach that bound.
    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a.0))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        if self.nodes.borrow()[a.0].values.iter().any(|v| *v <= F::zero()) {
            return Err(NumericsError::Domain("log of non-positive value".into()));
        }
        Ok(self.unary(a, F::ln, Op::Log(a.0)))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, F::tanh, Op::Tanh(a.0))
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input lies inside the
    /// interval (inclusive) and is zero outside.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Result<Var> {
        if !(lo <= hi) {
            return Err(NumericsError::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp(a.0, lo, hi),
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].values.iter().fold(F::zero(), |s, &x| s + x);
        let rg = self.requires_grad(a.0);
        self.push(vec![], vec![total], rg, Op::Sum(a.0))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.numel(a);
        if n == 0 {
            return Err(NumericsError::Degenerate("mean of empty tensor".into()));
        }
        let total = self.nodes.borrow()[a.0].values.iter().fold(F::zero(), |s, &x| s + x);
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![], vec![total / F::lit(n as f64)], rg, Op::Mean(a.0)))
    }

    /// Row sums of a matrix, as a vector of length `rows`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!("sum_rows on rank {}", sa.len())));
        }
        let (n, m) = (sa[0], sa[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            (0..n).map(|i| v[i * m..(i + 1) * m].iter().fold(F::zero(), |s, &x| s + x)).collect()
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![n], values, rg, Op::SumRows(a.0)))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!("softmax_rows on rank {}", sa.len())));
        }
        let (n, m) = (sa[0], sa[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            let mut out = vec![F::zero(); n * m];
            for i in 0..n {
                let row = &v[i * m..(i + 1) * m];
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..m {
                    let e = (row[j] - mx).exp();
                    out[i * m + j] = e;
                    sum = sum + e;
                }
                for j in 0..m {
                    out[i * m + j] = out[i * m + j] / sum;
                }
            }
            out
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![n, m], values, rg, Op::SoftmaxRows(a.0)))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm at or below
    /// [`EPS_NORM`] are rejected.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!(
                "l2_normalize_rows on rank {}",
                sa.len()
            )));
        }
        let (n, m) = (sa[0], sa[1]);
        let eps = F::lit(EPS_NORM);
        let (values, norms) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            let mut out = vec![F::zero(); n * m];
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let row = &v[i * m..(i + 1) * m];
                let norm = row.iter().fold(F::zero(), |s, &x| s + x * x).sqrt();
                if norm <= eps {
                    return Err(NumericsError::Degenerate(format!(
                        "row {i} has norm {norm} <= {EPS_NORM}"
                    )));
                }
                for j in 0..m {
                    out[i * m + j] = row[j] / norm;
                }
                norms.push(norm);
            }
            (out, norms)
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![n, m], values, rg, Op::L2NormalizeRows(a.0, norms)))
    }

    /// Per-row `log Σ_j exp(a[i,j])` over the entries where `mask` is true,
    /// stabilized by the per-row max of the unmasked entries. Every row must
    /// keep at least one entry.
    pub fn masked_logsumexp_rows(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!(
                "masked_logsumexp_rows on rank {}",
                sa.len()
            )));
        }
        let (n, m) = (sa[0], sa[1]);
        if mask.len() != n * m {
            return Err(NumericsError::Dimension(format!(
                "mask length {} for shape {sa:?}",
                mask.len()
            )));
        }
        let values = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut any = false;
                let mut mx = F::neg_infinity();
                for j in 0..m {
                    if mask[i * m + j] {
                        any = true;
                        mx = mx.max(v[i * m + j]);
                    }
                }
                if !any {
                    return Err(NumericsError::Contract(format!(
                        "row {i} has no unmasked entries"
                    )));
                }
                let mut sum = F::zero();
                for j in 0..m {
                    if mask[i * m + j] {
                        sum = sum + (v[i * m + j] - mx).exp();
                    }
                }
                out.push(mx + sum.ln());
            }
            out
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![n], values, rg, Op::MaskedLogSumExpRows(a.0, mask.to_vec())))
    }

    /// Main diagonal of a square matrix.
    pub fn take_diag(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(NumericsError::Dimension(format!("take_diag on shape {sa:?}")));
        }
        let n = sa[0];
        let values = {
            let nodes = self.nodes.borrow();
            (0..n).map(|i| nodes[a.0].values[i * n + i]).collect()
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![n], values, rg, Op::TakeDiag(a.0)))
    }

    /// `out[i] = a[i, indices[i]]`.
    pub fn pick_per_row(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || indices.len() != sa[0] {
            return Err(NumericsError::Dimension(format!(
                "pick_per_row: {} indices for shape {sa:?}",
                indices.len()
            )));
        }
        let m = sa[1];
        if let Some(&bad) = indices.iter().find(|&&j| j >= m) {
            return Err(NumericsError::Contract(format!("column index {bad} out of range {m}")));
        }
        let values = {
            let nodes = self.nodes.borrow();
            indices.iter().enumerate().map(|(i, &j)| nodes[a.0].values[i * m + j]).collect()
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![sa[0]], values, rg, Op::PickPerRow(a.0, indices.to_vec())))
    }

    /// Gathers the given rows (repeats allowed) into a new matrix.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(NumericsError::Dimension(format!("select_rows on rank {}", sa.len())));
        }
        let (n, m) = (sa[0], sa[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(NumericsError::Contract(format!("row index {bad} out of range {n}")));
        }
        let values = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].values;
            let mut out = Vec::with_capacity(rows.len() * m);
            for &i in rows {
                out.extend_from_slice(&v[i * m..(i + 1) * m]);
            }
            out
        };
        let rg = self.requires_grad(a.0);
        Ok(self.push(vec![rows.len(), m], values, rg, Op::SelectRows(a.0, rows.to_vec())))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hcat(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NumericsError::Dimension(format!("hcat {sa:?} | {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].values;
            let vb = &nodes[b.0].values;
            let mut out = Vec::with_capacity(n * (p + q));
            for i in 0..n {
                out.extend_from_slice(&va[i * p..(i + 1) * p]);
                out.extend_from_slice(&vb[i * q..(i + 1) * q]);
            }
            out
        };
        let rg = self.requires_grad(a.0) || self.requires_grad(b.0);
        Ok(self.push(vec![n, p + q], values, rg, Op::HCat(a.0, b.0)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row_vec(&self, mat: Var, vec: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(mat), self.shape(vec));
        if sm.len() != 2 || sv.len() != 1 || sv[0] != sm[1] {
            return Err(NumericsError::Dimension(format!("add_row_vec {sm:?} + {sv:?}")));
        }
        let (n, m) = (sm[0], sm[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let a = &nodes[mat.0].values;
            let v = &nodes[vec.0].values;
            (0..n * m).map(|k| a[k] + v[k % m]).collect()
        };
        let rg = self.requires_grad(mat.0) || self.requires_grad(vec.0);
        Ok(self.push(vec![n, m], values, rg, Op::AddRowVec(mat.0, vec.0)))
    }

    /// Adds `vec[i]` to every element of row `i`.
    pub fn add_col_vec(&self, mat: Var, vec: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(mat), self.shape(vec));
        if sm.len() != 2 || sv.len() != 1 || sv[0] != sm[0] {
            return Err(NumericsError::Dimension(format!("add_col_vec {sm:?} + {sv:?}")));
        }
        let (n, m) = (sm[0], sm[1]);
        let values = {
            let nodes = self.nodes.borrow();
            let a = &nodes[mat.0].values;
            let v = &nodes[vec.0].values;
            (0..n * m).map(|k| a[k] + v[k / m]).collect()
        };
        let rg = self.requires_grad(mat.0) || self.requires_grad(vec.0);
        Ok(self.push(vec![n, m], values, rg, Op::AddColVec(mat.0, vec.0)))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` node the loss depends on; gradients accumulate
    /// additively when a node feeds several consumers.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(NumericsError::Contract(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut nodes = self.nodes.borrow_mut();

        // Mark the subgraph the loss depends on, ignoring constants.
        let mut reached = vec![false; nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(id) = stack.pop() {
            if reached[id] || !nodes[id].requires_grad {
                continue;
            }
            reached[id] = true;
            for_each_parent(&nodes[id].op, |p| stack.push(p));
        }
        if !reached[loss.0] {
            return Ok(()); // loss is constant; nothing to do
        }

        for id in 0..nodes.len() {
            if reached[id] && nodes[id].grad.is_none() {
                nodes[id].grad = Some(vec![F::zero(); nodes[id].values.len()]);
            }
        }
        if let Some(g) = nodes[loss.0].grad.as_mut() {
            g[0] = g[0] + F::one();
        }

        // Reverse id order visits each node exactly once, after all of its
        // consumers.
        for id in (0..nodes.len()).rev() {
            if !reached[id] {
                continue;
            }
            let upstream = nodes[id].grad.clone().expect("reached nodes have grads");
            backward_step(&mut nodes, id, &upstream, &reached);
        }
        Ok(())
    }
}

fn for_each_parent<F>(op: &Op<F>, mut f: impl FnMut(usize)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Matmul(a, b)
        | Op::HCat(a, b)
        | Op::AddRowVec(a, b)
        | Op::AddColVec(a, b) => {
            f(*a);
            f(*b);
        }
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Transpose(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::SoftmaxRows(a)
        | Op::L2NormalizeRows(a, _)
        | Op::MaskedLogSumExpRows(a, _)
        | Op::TakeDiag(a)
        | Op::PickPerRow(a, _)
        | Op::SelectRows(a, _) => f(*a),
    }
}

/// Accumulates `contrib` into the gradient of `parent` if it participates
/// in the backward pass. When the parent is a broadcast scalar the
/// contribution is sum-reduced.
fn accumulate<F: Scalar>(nodes: &mut [Node<F>], reached: &[bool], parent: usize, contrib: &[F]) {
    if !reached[parent] {
        return;
    }
    let grad = nodes[parent].grad.as_mut().expect("reached nodes have grads");
    if grad.len() == contrib.len() {
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    } else if grad.len() == 1 {
        grad[0] = grad[0] + contrib.iter().fold(F::zero(), |s, &c| s + c);
    } else {
        unreachable!("gradient length mismatch");
    }
}

fn backward_step<F: Scalar>(nodes: &mut [Node<F>], id: usize, g: &[F], reached: &[bool]) {
    // The op descriptor is cloned up front so parent gradients can be
    // mutated freely; aux payloads are desk-scale.
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            // Scalar broadcasting is handled inside `accumulate`.
            accumulate(nodes, reached, a, g);
            accumulate(nodes, reached, b, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, reached, a, g);
            let neg: Vec<F> = g.iter().map(|&x| -x).collect();
            accumulate(nodes, reached, b, &neg);
        }
        Op::Mul(a, b) => {
            let va = broadcast_to(&nodes[a].values, g.len());
            let vb = broadcast_to(&nodes[b].values, g.len());
            let da: Vec<F> = g.iter().zip(&vb).map(|(&x, &y)| x * y).collect();
            let db: Vec<F> = g.iter().zip(&va).map(|(&x, &y)| x * y).collect();
            accumulate(nodes, reached, a, &da);
            accumulate(nodes, reached, b, &db);
        }
        Op::AddScalar(a) => {
            accumulate(nodes, reached, a, g);
        }
        Op::MulScalar(a, c) => {
            let d: Vec<F> = g.iter().map(|&x| x * c).collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let va = nodes[a].values.clone();
            let vb = nodes[b].values.clone();
            // dA = G · Bᵀ
            let mut da = vec![F::zero(); m * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    for p in 0..k {
                        da[i * k + p] = da[i * k + p] + gij * vb[p * n + j];
                    }
                }
            }
            // dB = Aᵀ · G
            let mut db = vec![F::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = va[i * k + p];
                    for j in 0..n {
                        db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                    }
                }
            }
            accumulate(nodes, reached, a, &da);
            accumulate(nodes, reached, b, &db);
        }
        Op::Transpose(a) => {
            let (n, m) = (nodes[a].shape[0], nodes[a].shape[1]);
            let mut d = vec![F::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    d[i * m + j] = g[j * n + i];
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::Exp(a) => {
            let out = nodes[id].values.clone();
            let d: Vec<F> = g.iter().zip(&out).map(|(&x, &y)| x * y).collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Log(a) => {
            let vin = nodes[a].values.clone();
            let d: Vec<F> = g.iter().zip(&vin).map(|(&x, &y)| x / y).collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Relu(a) => {
            let vin = nodes[a].values.clone();
            let d: Vec<F> =
                g.iter().zip(&vin).map(|(&x, &y)| if y > F::zero() { x } else { F::zero() }).collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Tanh(a) => {
            let out = nodes[id].values.clone();
            let d: Vec<F> = g.iter().zip(&out).map(|(&x, &y)| x * (F::one() - y * y)).collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Clamp(a, lo, hi) => {
            let vin = nodes[a].values.clone();
            let d: Vec<F> = g
                .iter()
                .zip(&vin)
                .map(|(&x, &y)| if y >= lo && y <= hi { x } else { F::zero() })
                .collect();
            accumulate(nodes, reached, a, &d);
        }
        Op::Sum(a) => {
            let d = vec![g[0]; nodes[a].values.len()];
            accumulate(nodes, reached, a, &d);
        }
        Op::Mean(a) => {
            let n = nodes[a].values.len();
            let d = vec![g[0] / F::lit(n as f64); n];
            accumulate(nodes, reached, a, &d);
        }
        Op::SumRows(a) => {
            let (n, m) = (nodes[a].shape[0], nodes[a].shape[1]);
            let mut d = vec![F::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    d[i * m + j] = g[i];
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::SoftmaxRows(a) => {
            let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
            let p = nodes[id].values.clone();
            let mut d = vec![F::zero(); n * m];
            for i in 0..n {
                let gi = &g[i * m..(i + 1) * m];
                let pi = &p[i * m..(i + 1) * m];
                let dot = gi.iter().zip(pi).fold(F::zero(), |s, (&x, &y)| s + x * y);
                for j in 0..m {
                    d[i * m + j] = pi[j] * (gi[j] - dot);
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::L2NormalizeRows(a, norms) => {
            let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
            let y = nodes[id].values.clone();
            let mut d = vec![F::zero(); n * m];
            for i in 0..n {
                let gi = &g[i * m..(i + 1) * m];
                let yi = &y[i * m..(i + 1) * m];
                let dot = gi.iter().zip(yi).fold(F::zero(), |s, (&x, &v)| s + x * v);
                for j in 0..m {
                    d[i * m + j] = (gi[j] - yi[j] * dot) / norms[i];
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::MaskedLogSumExpRows(a, mask) => {
            let (n, m) = (nodes[a].shape[0], nodes[a].shape[1]);
            let vin = nodes[a].values.clone();
            let lse = nodes[id].values.clone();
            let mut d = vec![F::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    if mask[i * m + j] {
                        d[i * m + j] = g[i] * (vin[i * m + j] - lse[i]).exp();
                    }
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::TakeDiag(a) => {
            let n = nodes[a].shape[0];
            let mut d = vec![F::zero(); n * n];
            for i in 0..n {
                d[i * n + i] = g[i];
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::PickPerRow(a, indices) => {
            let m = nodes[a].shape[1];
            let mut d = vec![F::zero(); nodes[a].values.len()];
            for (i, &j) in indices.iter().enumerate() {
                d[i * m + j] = g[i];
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::SelectRows(a, rows) => {
            let m = nodes[a].shape[1];
            let mut d = vec![F::zero(); nodes[a].values.len()];
            for (out_i, &src_i) in rows.iter().enumerate() {
                for j in 0..m {
                    d[src_i * m + j] = d[src_i * m + j] + g[out_i * m + j];
                }
            }
            accumulate(nodes, reached, a, &d);
        }
        Op::HCat(a, b) => {
            let n = nodes[id].shape[0];
            let p = nodes[a].shape[1];
            let q = nodes[b].shape[1];
            let mut da = vec![F::zero(); n * p];
            let mut db = vec![F::zero(); n * q];
            for i in 0..n {
                da[i * p..(i + 1) * p].copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                db[i * q..(i + 1) * q].copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
            }
            accumulate(nodes, reached, a, &da);
            accumulate(nodes, reached, b, &db);
        }
        Op::AddRowVec(mat, vecid) => {
            let (n, m) = (nodes[mat].shape[0], nodes[mat].shape[1]);
            accumulate(nodes, reached, mat, g);
            let mut dv = vec![F::zero(); m];
            for i in 0..n {
                for j in 0..m {
                    dv[j] = dv[j] + g[i * m + j];
                }
            }
            accumulate(nodes, reached, vecid, &dv);
        }
        Op::AddColVec(mat, vecid) => {
            let (n, m) = (nodes[mat].shape[0], nodes[mat].shape[1]);
            accumulate(nodes, reached, mat, g);
            let mut dv = vec![F::zero(); n];
            for i in 0..n {
                for j in 0..m {
                    dv[i] = dv[i] + g[i * m + j];
                }
            }
            accumulate(nodes, reached, vecid, &dv);
        }
    }
}

fn broadcast_to<F: Scalar>(values: &[F], len: usize) -> Vec<F> {
    if values.len() == len {
        values.to_vec()
    } else {
        vec![values[0]; len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_two_x() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.5, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_consumer_gradients_accumulate() {
        // y = x + x has gradient 2 everywhere; equal to the sum of the two
        // single-consumer gradients.
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&Tensor::vector(vec![0.3, -0.7]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::Dimension(_))));
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(NumericsError::Domain(_))));
    }

    #[test]
    fn l2_normalize_rejects_tiny_rows() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(tape.l2_normalize_rows(x), Err(NumericsError::Degenerate(_))));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((v.at(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
        let p = tape.value(tape.softmax_rows(x).unwrap());
        for j in 0..3 {
            assert!((p.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_ones_matrix() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
    }

    #[test]
    fn log_exp_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        for &x in &[-5.0, -1.0, 0.0, 2.5, 5.0] {
            let v = tape.constant(&Tensor::scalar(x));
            let y = tape.log(tape.exp(v)).unwrap();
            assert!((tape.value(y).item().unwrap() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_lse_requires_an_entry_per_row() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.masked_logsumexp_rows(x, &[false, false]),
            Err(NumericsError::Contract(_))
        ));
    }

    #[test]
    fn exp_of_zero_is_one() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::scalar(0.0));
        assert_eq!(tape.value(tape.exp(x)).item().unwrap(), 1.0);
    }
}
