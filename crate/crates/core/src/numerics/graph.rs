//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse creation order, so the node list is already a
//! topological order. Values are checked for finiteness as they are
//! produced and the first offending operation is remembered.

use std::sync::Arc;

use super::tensor::{dot, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation defined outside the built-in set.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Tanh(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Diag(Var),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
}

/// Where a non-finite value first appeared.
#[derive(Clone, Debug, PartialEq)]
pub struct NonFiniteSite {
    pub op: &'static str,
    pub node: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<NonFiniteSite>,
}

/// Gradients for every node, indexed by [`Var`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x - max - ln(1 + sum_{j != argmax} exp(x_j - max))`, accurate when
/// one entry dominates.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let Some(k) = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])) else {
        return;
    };
    let m = row[k];
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, v)| (v - m).exp())
        .sum();
    let l = rest.ln_1p();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m) - l;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// First operation that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&NonFiniteSite> {
        self.non_finite.as_ref()
    }

    /// Fails if any value so far was non-finite.
    pub fn ensure_finite(&self) -> Result<(), NumericsError> {
        match &self.non_finite {
            Some(site) => Err(NumericsError::NonFinite {
                op: site.op,
                node: site.node,
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(NonFiniteSite { op: name, node: idx });
        }
        let value = if value.shape().len() == 2 {
            value
        } else {
            value.as_matrix()
        };
        self.nodes.push(Node { value, op, name });
        Var(idx)
    }

    /// Leaf node. Gradients are tracked for every leaf; callers decide
    /// which leaves count as parameters.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), "matmul"))
    }

    /// `a . b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), "matmul_t"))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (sa, sb) = (self.shape2(a), self.shape2(b));
        if sa != sb {
            return Err(mismatch(name, format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), "sub"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), "mul"))
    }

    /// `a (r x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let ((r, c), (br, bc)) = (self.shape2(a), self.shape2(b));
        if br != 1 || bc != c {
            return Err(mismatch("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let mut out = self.value(a).as_matrix();
        let bias = self.value(b).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_slice_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), "add_row"))
    }

    /// `a (r x c) + b (r x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let ((r, c), (br, bc)) = (self.shape2(a), self.shape2(b));
        if bc != 1 || br != r {
            return Err(mismatch("add_col", format!("{r}x{c} + {br}x{bc}")));
        }
        let mut out = self.value(a).as_matrix();
        let col = self.value(b).data().to_vec();
        for (i, bv) in col.iter().enumerate() {
            for o in out.row_slice_mut(i) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddCol(a, b), "add_col"))
    }

    /// `x W^T + b` with `W` as `out x in` and `b` as `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let xw = self.matmul_t(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), "ln")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), "square")
    }

    /// `max(a, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    /// Sum of all elements, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, _) = self.shape2(a);
        let t = self.value(a);
        let data = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let out = Tensor::matrix(r, 1, data).expect("r x 1");
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    /// Column means over rows, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if r == 0 {
            return Err(mismatch("mean_rows", "zero rows".into()));
        }
        let t = self.value(a);
        let mut acc = vec![0.0; c];
        for i in 0..r {
            for (s, v) in acc.iter_mut().zip(t.row_slice(i)) {
                *s += v;
            }
        }
        for s in &mut acc {
            *s /= r as f64;
        }
        Ok(self.push(Tensor::row(acc), Op::MeanRows(a), "mean_rows"))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).as_matrix();
        for i in 0..out.rows() {
            let row = out.row_slice(i).to_vec();
            log_softmax_row(&row, out.row_slice_mut(i));
            for v in out.row_slice_mut(i) {
                *v = v.exp();
            }
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).as_matrix();
        for i in 0..out.rows() {
            let row = out.row_slice(i).to_vec();
            log_softmax_row(&row, out.row_slice_mut(i));
        }
        self.push(out, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let r = parts.first().map(|&p| self.shape2(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape2(p).0 != r) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.shape2(p).1).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = parts.first().map(|&p| self.shape2(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.shape2(p).1 != c) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let r: usize = parts.iter().map(|&p| self.shape2(p).0).sum();
        let mut data = Vec::with_capacity(r * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows"))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if start > end || end > c {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {c}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let out = Tensor::matrix(r, end - start, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), "slice_cols"))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if start > end || end > r {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let out = Tensor::matrix(end - start, c, data)?;
        Ok(self.push(out, Op::SliceRows(a, start), "slice_rows"))
    }

    /// Stacks `n` copies of a `1 x c` row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if r != 1 {
            return Err(mismatch("repeat_rows", format!("expected one row, got {r}")));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let out = Tensor::matrix(n, c, data)?;
        Ok(self.push(out, Op::RepeatRows(a), "repeat_rows"))
    }

    /// Picks `a[i, idx[i]]` per row, `r x 1`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(mismatch("gather", format!("{} indices into {r}x{c}", idx.len())));
        }
        let t = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let out = Tensor::matrix(r, 1, data)?;
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), "gather"))
    }

    /// Main diagonal of a square matrix as a `1 x n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.shape2(a);
        if r != c {
            return Err(mismatch("diag", format!("{r}x{c} is not square")));
        }
        let t = self.value(a);
        let data = (0..r).map(|i| t.get(i, i)).collect();
        Ok(self.push(Tensor::row(data), Op::Diag(a), "diag"))
    }

    pub fn custom(
        &mut self,
        op: Arc<dyn CustomOp>,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let name = op.name();
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), name))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<NodeGrads, NumericsError> {
        if self.value(output).len() != 1 {
            return Err(mismatch("backward", "output is not a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (input, contribution) in self.local_grads(node, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(NodeGrads { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, NumericsError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::matrix(x.rows(), x.cols(), data).expect("same shape")
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(val(*b))?),
                (*b, val(*a).t_matmul(g)?),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, g.matmul(val(*b))?),
                (*b, g.t_matmul(val(*a))?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip(g, y, |p, q| p * q);
                let gb = zip(g, x, |p, q| p * q);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, b) => {
                let mut gb = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, v) in gb.iter_mut().zip(g.row_slice(i)) {
                        *s += v;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::row(gb))]
            }
            Op::AddCol(a, b) => {
                let gb: Vec<f64> = (0..g.rows()).map(|i| g.row_slice(i).iter().sum()).collect();
                let r = gb.len();
                vec![(*a, g.clone()), (*b, Tensor::matrix(r, 1, gb)?)]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, elementwise(*a, &|_, y, gi| gi * y))],
            Op::Ln(a) => vec![(*a, elementwise(*a, &|x, _, gi| gi / x))],
            Op::Softplus(a) => vec![(*a, elementwise(*a, &|x, _, gi| gi * sigmoid(x)))],
            Op::Tanh(a) => vec![(*a, elementwise(*a, &|_, y, gi| gi * (1.0 - y * y)))],
            Op::Square(a) => vec![(*a, elementwise(*a, &|x, _, gi| 2.0 * x * gi))],
            Op::Relu(a) => vec![(
                *a,
                elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            )],
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(&[x.rows(), x.cols()], g.item()))]
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend(std::iter::repeat_n(g.data()[i], c));
                }
                vec![(*a, Tensor::matrix(r, c, data)?)]
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let (r, c) = (x.rows(), x.cols());
                let scaled: Vec<f64> = g.data().iter().map(|v| v / r as f64).collect();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(&scaled);
                }
                vec![(*a, Tensor::matrix(r, c, data)?)]
            }
            Op::SoftmaxRows(a) => {
                let mut ga = out.clone();
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let s = dot(y, gi);
                    for (j, o) in ga.row_slice_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gi[j] - s);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = out.clone();
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let s: f64 = gi.iter().sum();
                    for (j, o) in ga.row_slice_mut(i).iter_mut().enumerate() {
                        *o = gi[j] - y[j].exp() * s;
                    }
                }
                vec![(*a, ga)]
            }
            Op::ConcatCols(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend_from_slice(&g.row_slice(i)[start..start + c]);
                    }
                    res.push((p, Tensor::matrix(r, c, data)?));
                    start += c;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let (r, c) = (val(p).rows(), val(p).cols());
                    res.push((p, Tensor::matrix(r, c, g.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(&[x.rows(), x.cols()]);
                for i in 0..g.rows() {
                    ga.row_slice_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row_slice(i));
                }
                vec![(*a, ga)]
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(&[x.rows(), c]);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, ga)]
            }
            Op::RepeatRows(a) => {
                let mut acc = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, v) in acc.iter_mut().zip(g.row_slice(i)) {
                        *s += v;
                    }
                }
                vec![(*a, Tensor::row(acc))]
            }
            Op::Gather(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(&[x.rows(), x.cols()]);
                for (i, &j) in idx.iter().enumerate() {
                    ga.set(i, j, g.data()[i]);
                }
                vec![(*a, ga)]
            }
            Op::Diag(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(&[x.rows(), x.cols()]);
                for i in 0..x.rows() {
                    ga.set(i, i, g.data()[i]);
                }
                vec![(*a, ga)]
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&values, out, g);
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(g: &Graph, out: Var, v: Var) -> Vec<f64> {
        g.backward(out).unwrap().get(v).unwrap().data().to_vec()
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![3.0]));
        let sq = g.square(x);
        let l = g.sum(sq);
        assert_eq!(g.scalar_value(l), 9.0);
        assert_eq!(grad_of(&g, l, x), vec![6.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![2.0]));
        let y = g.leaf(Tensor::row(vec![3.0]));
        let p = g.mul(x, y).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.5, -2.0]));
        let a = g.add(x, x).unwrap();
        let b = g.mul(a, x).unwrap();
        let l = g.sum(b);
        // l = 2 x^2 summed
        assert_eq!(grad_of(&g, l, x), vec![6.0, -8.0]);
    }

    #[test]
    fn non_finite_names_first_op() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![-1.0]));
        let y = g.ln(x);
        let _ = g.exp(y);
        let site = g.non_finite().unwrap();
        assert_eq!(site.op, "ln");
        assert!(g.ensure_finite().is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.diag(a).is_err());
        assert!(g.gather(a, &[0, 3]).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1000.0, 0.0]));
        let y = g.log_softmax_rows(x);
        assert!(g.value(y).is_finite());
        assert!(g.value(y).data()[0].abs() < 1e-12);
    }
}
