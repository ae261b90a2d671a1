//! Tape-based reverse-mode automatic differentiation.
//!
//! Every value on the tape is a dense rank-2 array of `f64`. Scalars are
//! `1 x 1` arrays and vectors are single columns (`n x 1`) unless an op says
//! otherwise. Nodes are appended in evaluation order, so the arena order is
//! already a topological order and `backward` is a single reverse sweep.
//!
//! Elementwise binary ops broadcast a dimension of length 1 against any
//! length (row vectors against matrices, column vectors against matrices,
//! scalars against anything). Nothing beyond rank 2 is supported.

use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Differentiable input (parameter or input variable).
    Variable,
    /// Input that never receives a gradient.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    LeakyRelu(f64),
    Sin,
    Abs,
    Square,
    Sqrt,
    /// Sum of every element, producing a scalar.
    Sum,
    /// Mean of every element, producing a scalar.
    Mean,
    /// Inner product of two equally shaped arrays, producing a scalar.
    Dot,
    /// Matrix times column vector.
    MatVec,
    MatMul,
    Transpose,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// Row-wise sum, `n x m -> n x 1`.
    SumRows,
    /// Horizontal concatenation of two arrays with the same row count.
    ConcatCols,
    /// Extraction of a single column as `n x 1`.
    Column(usize),
    /// Row gather; a row may be selected more than once.
    GatherRows(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Tanh => "tanh",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sin => "sin",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Dot => "dot",
            Op::MatVec => "matvec",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::SumRows => "sum_rows",
            Op::ConcatCols => "concat_cols",
            Op::Column(_) => "column",
            Op::GatherRows(_) => "gather_rows",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    value: Array2<f64>,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only arena recording one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
    root: Option<NodeId>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums `grad` down to `shape`, undoing a broadcast.
fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Nodes in creation order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    /// Accumulated gradient of the last backward root with respect to `id`.
    /// Reads zero before `backward` and for nodes the root does not depend on.
    pub fn grad(&self, id: NodeId) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shape(id)),
        }
    }

    /// Accumulated gradient without copying, `None` if nothing reached `id`.
    pub fn grad_ref(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Drops every accumulated gradient; required before reusing the graph
    /// for a second backward pass.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.root = None;
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::structure(format!("node {} is not in this graph", id.0)))
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = match op {
            Op::Variable => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Variable, Vec::new())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant, Vec::new())
    }

    pub fn scalar_variable(&mut self, v: f64) -> NodeId {
        self.variable(scalar(v))
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(scalar(v))
    }

    /// Column vector variable.
    pub fn vector_variable(&mut self, v: &[f64]) -> NodeId {
        self.variable(Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape"))
    }

    /// Records `op` applied to `inputs`. Convenience dispatcher over the
    /// typed constructors below; ops with a fixed parameter carry it in
    /// the tag.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            Op::Variable | Op::Constant => {
                return Err(Error::structure("leaf nodes are created with variable/constant"))
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Dot | Op::MatVec | Op::MatMul => 2,
            Op::ConcatCols => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::structure(format!(
                "{op} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        let b = inputs.get(1).copied().unwrap_or(a);
        match op {
            Op::Add => self.add(a, b),
            Op::Sub => self.sub(a, b),
            Op::Mul => self.mul(a, b),
            Op::Div => self.div(a, b),
            Op::Dot => self.dot(a, b),
            Op::MatVec => self.matvec(a, b),
            Op::MatMul => self.matmul(a, b),
            Op::ConcatCols => self.concat_cols(a, b),
            Op::Neg => self.neg(a),
            Op::Tanh => self.tanh(a),
            Op::LeakyRelu(alpha) => self.leaky_relu(a, alpha),
            Op::Sin => self.sin(a),
            Op::Abs => self.abs(a),
            Op::Square => self.square(a),
            Op::Sqrt => self.sqrt(a),
            Op::Sum => self.sum(a),
            Op::Mean => self.mean(a),
            Op::Transpose => self.transpose(a),
            Op::Scale(c) => self.scale(a, c),
            Op::SumRows => self.sum_rows(a),
            Op::Column(k) => self.column(a, k),
            Op::GatherRows(idx) => self.gather_rows(a, &idx),
            Op::Variable | Op::Constant => unreachable!(),
        }
    }

    fn binary_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::structure(format!(
                "{op}: shapes {sa:?} and {sb:?} do not broadcast"
            ))),
        }
    }

    fn elementwise(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let shape = self.binary_shape(op.name(), a, b)?;
        let av = self.nodes[a.0].value.broadcast(shape).expect("checked broadcast");
        let bv = self.nodes[b.0].value.broadcast(shape).expect("checked broadcast");
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(self.push(out, op, vec![a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(b)?;
        if self.nodes[b.0].value.iter().any(|&v| v == 0.0) {
            return Err(Error::domain("division by zero"));
        }
        self.elementwise(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a)?;
        let out = self.nodes[a.0].value.mapv(f);
        Ok(self.push(out, op, vec![a]))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(alpha), a, |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sin, a, f64::sin)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a.0].value.iter().any(|&v| v < 0.0) {
            return Err(Error::domain("sqrt of a negative value"));
        }
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a.0].value.sum();
        Ok(self.push(scalar(v), Op::Sum, vec![a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let value = &self.nodes[a.0].value;
        if value.is_empty() {
            return Err(Error::structure("mean of an empty array"));
        }
        let v = value.sum() / value.len() as f64;
        Ok(self.push(scalar(v), Op::Mean, vec![a]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::structure(format!(
                "dot: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = (&self.nodes[a.0].value * &self.nodes[b.0].value).sum();
        Ok(self.push(scalar(v), Op::Dot, vec![a, b]))
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(x)?;
        let (ms, xs) = (self.shape(m), self.shape(x));
        if xs.1 != 1 || ms.1 != xs.0 {
            return Err(Error::structure(format!(
                "matvec: matrix {ms:?} cannot multiply vector {xs:?}"
            )));
        }
        let out = self.nodes[m.0].value.dot(&self.nodes[x.0].value);
        Ok(self.push(out, Op::MatVec, vec![m, x]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::structure(format!(
                "matmul: shapes {sa:?} and {sb:?} are incompatible"
            )));
        }
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(out, Op::MatMul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let out = self.nodes[a.0].value.t().to_owned();
        Ok(self.push(out, Op::Transpose, vec![a]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let out = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::SumRows, vec![a]))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.nrows() != vb.nrows() {
            return Err(Error::structure(format!(
                "concat_cols: row counts {} and {} differ",
                va.nrows(),
                vb.nrows()
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .map_err(|e| Error::structure(e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols, vec![a, b]))
    }

    pub fn column(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if k >= v.ncols() {
            return Err(Error::structure(format!(
                "column {k} out of range for {} columns",
                v.ncols()
            )));
        }
        let out = v.slice(s![.., k..k + 1]).to_owned();
        Ok(self.push(out, Op::Column(k), vec![a]))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.nrows()) {
            return Err(Error::structure(format!(
                "row {bad} out of range for {} rows",
                v.nrows()
            )));
        }
        let out = v.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(rows.to_vec()), vec![a]))
    }

    fn accumulate(&mut self, id: NodeId, g: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Propagates d(root)/d(node) to every node the root depends on.
    /// Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        if self.shape(root) != (1, 1) {
            return Err(Error::structure(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.zero_grad();
        self.root = Some(root);
        self.grads[root.0] = Some(scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad && !self.nodes[i].parents.is_empty() {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Array2<f64>) {
        let node = &self.nodes[i];
        let parents = node.parents.clone();
        let wants = |k: usize| self.nodes[parents[k].0].requires_grad;
        let val = |k: usize| &self.nodes[parents[k].0].value;
        let mut out: Vec<(NodeId, Array2<f64>)> = Vec::with_capacity(2);

        match &node.op {
            Op::Variable | Op::Constant => {}
            Op::Add | Op::Sub => {
                if wants(0) {
                    out.push((parents[0], reduce_to(g.clone(), val(0).dim())));
                }
                if wants(1) {
                    let gb = if node.op == Op::Sub { -g } else { g.clone() };
                    out.push((parents[1], reduce_to(gb, val(1).dim())));
                }
            }
            Op::Mul => {
                let shape = g.dim();
                if wants(0) {
                    let gb = g * &val(1).broadcast(shape).expect("forward broadcast");
                    out.push((parents[0], reduce_to(gb, val(0).dim())));
                }
                if wants(1) {
                    let ga = g * &val(0).broadcast(shape).expect("forward broadcast");
                    out.push((parents[1], reduce_to(ga, val(1).dim())));
                }
            }
            Op::Div => {
                let shape = g.dim();
                let b = val(1).broadcast(shape).expect("forward broadcast");
                if wants(0) {
                    out.push((parents[0], reduce_to(g / &b, val(0).dim())));
                }
                if wants(1) {
                    let a = val(0).broadcast(shape).expect("forward broadcast");
                    let mut gb = Array2::zeros(shape);
                    Zip::from(&mut gb)
                        .and(g)
                        .and(&a)
                        .and(&b)
                        .for_each(|o, &g, &a, &b| *o = -g * a / (b * b));
                    out.push((parents[1], reduce_to(gb, val(1).dim())));
                }
            }
            Op::Neg => out.push((parents[0], -g)),
            Op::Scale(c) => out.push((parents[0], g * *c)),
            Op::Tanh => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|o, &y| *o *= 1.0 - y * y);
                out.push((parents[0], ga));
            }
            Op::LeakyRelu(alpha) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(0)).for_each(|o, &x| {
                    if x <= 0.0 {
                        *o *= alpha
                    }
                });
                out.push((parents[0], ga));
            }
            Op::Sin => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(0)).for_each(|o, &x| *o *= x.cos());
                out.push((parents[0], ga));
            }
            Op::Abs => {
                // Subgradient 0 at exactly 0.
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(0)).for_each(|o, &x| {
                    *o *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                out.push((parents[0], ga));
            }
            Op::Square => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(0)).for_each(|o, &x| *o *= 2.0 * x);
                out.push((parents[0], ga));
            }
            Op::Sqrt => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|o, &y| *o /= 2.0 * y);
                out.push((parents[0], ga));
            }
            Op::Sum => out.push((parents[0], Array2::from_elem(val(0).dim(), g[[0, 0]]))),
            Op::Mean => {
                let n = val(0).len() as f64;
                out.push((parents[0], Array2::from_elem(val(0).dim(), g[[0, 0]] / n)));
            }
            Op::Dot => {
                let s = g[[0, 0]];
                if wants(0) {
                    out.push((parents[0], val(1) * s));
                }
                if wants(1) {
                    out.push((parents[1], val(0) * s));
                }
            }
            Op::MatVec | Op::MatMul => {
                if wants(0) {
                    out.push((parents[0], g.dot(&val(1).t())));
                }
                if wants(1) {
                    out.push((parents[1], val(0).t().dot(g)));
                }
            }
            Op::Transpose => out.push((parents[0], g.t().to_owned())),
            Op::SumRows => {
                let full = g
                    .broadcast(val(0).dim())
                    .expect("n x 1 broadcasts over n x m")
                    .to_owned();
                out.push((parents[0], full));
            }
            Op::ConcatCols => {
                let split = val(0).ncols();
                if wants(0) {
                    out.push((parents[0], g.slice(s![.., ..split]).to_owned()));
                }
                if wants(1) {
                    out.push((parents[1], g.slice(s![.., split..]).to_owned()));
                }
            }
            Op::Column(k) => {
                let mut ga = Array2::zeros(val(0).dim());
                ga.slice_mut(s![.., *k..*k + 1]).assign(g);
                out.push((parents[0], ga));
            }
            Op::GatherRows(rows) => {
                let mut ga = Array2::zeros(val(0).dim());
                for (src, &dst) in rows.iter().enumerate() {
                    let mut row = ga.row_mut(dst);
                    row += &g.row(src);
                }
                out.push((parents[0], ga));
            }
        }

        for (id, grad) in out {
            self.accumulate(id, grad);
        }
    }
}

/// Central-difference estimate of the gradient of `f` at `p`:
/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let plus = f(&probe)?;
        probe[i] = p[i] - h;
        let minus = f(&probe)?;
        probe[i] = p[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn forward_values() {
        let mut g = Graph::new();
        let zero = g.scalar_variable(0.0);
        let t = g.tanh(zero).unwrap();
        assert_eq!(g.scalar(t), 0.0);

        let m1 = g.scalar_variable(-1.0);
        let lr = g.leaky_relu(m1, 0.2).unwrap();
        assert_abs_diff_eq!(g.scalar(lr), -0.2, epsilon = 1e-15);

        let x = g.scalar_variable(-3.5);
        let a = g.abs(x).unwrap();
        assert_eq!(g.scalar(a), 3.5);
    }

    #[test]
    fn backward_square_tanh_abs() {
        let mut g = Graph::new();
        let x = g.scalar_variable(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 6.0);

        let mut g = Graph::new();
        let x = g.scalar_variable(0.0);
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 1.0);

        let mut g = Graph::new();
        let x = g.scalar_variable(-2.0);
        let y = g.abs(x).unwrap();
        g.backward(y).unwrap();
        let fd = finite_difference_gradient(|p| Ok(p[0].abs()), &[-2.0], 1e-6).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], -1.0);
        assert_abs_diff_eq!(fd[0], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn abs_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.scalar_variable(0.0);
        let y = g.abs(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 0.0);
    }

    #[test]
    fn root_grad_is_one_and_fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.scalar_variable(1.7);
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(y)[[0, 0]], 1.0);
        assert_eq!(g.grad(x)[[0, 0]], 2.0);
    }

    #[test]
    fn grad_reads_zero_before_backward() {
        let mut g = Graph::new();
        let x = g.scalar_variable(2.0);
        let y = g.square(x).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 0.0);
        g.backward(y).unwrap();
        g.zero_grad();
        assert_eq!(g.grad(x)[[0, 0]], 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let v = g.vector_variable(&[1.0, 2.0]);
        assert!(matches!(g.backward(v), Err(Error::Structure(_))));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let a = g.scalar_variable(1.0);
        let z = g.scalar_constant(0.0);
        assert!(matches!(g.div(a, z), Err(Error::Domain(_))));
        let n = g.scalar_constant(-1.0);
        assert!(matches!(g.sqrt(n), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.vector_variable(&[1.0, 2.0]);
        let b = g.vector_variable(&[1.0, 2.0, 3.0]);
        assert!(matches!(g.dot(a, b), Err(Error::Structure(_))));
        assert!(matches!(g.add(a, b), Err(Error::Structure(_))));
        let m = g.variable(Array2::zeros((2, 2)));
        assert!(matches!(g.matvec(m, b), Err(Error::Structure(_))));
        assert!(matches!(g.apply(Op::Add, &[a]), Err(Error::Structure(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.scalar_constant(4.0);
        let x = g.scalar_variable(2.0);
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 4.0);
        assert_eq!(g.grad(c)[[0, 0]], 0.0);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut g = Graph::new();
        let m = g.variable(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let row = g.variable(array![[10.0, 20.0]]);
        let col = g.variable(array![[1.0], [2.0], [3.0]]);
        let a = g.add(m, row).unwrap();
        let b = g.mul(a, col).unwrap();
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        // d/d row_k = sum_i col_i
        assert_eq!(g.grad(row), array![[6.0, 6.0]]);
        // d/d col_i = sum_k (m_ik + row_k)
        assert_eq!(g.grad(col), array![[33.0], [37.0], [41.0]]);
        assert_eq!(g.grad(m), array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
    }

    #[test]
    fn gather_and_column_scatter_back() {
        let mut g = Graph::new();
        let m = g.variable(array![[1.0, 2.0], [3.0, 4.0]]);
        let rows = g.gather_rows(m, &[1, 1, 0]).unwrap();
        let c = g.column(rows, 1).unwrap();
        let s = g.sum(c).unwrap();
        assert_eq!(g.scalar(s), 4.0 + 4.0 + 2.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m), array![[0.0, 1.0], [0.0, 2.0]]);
    }

    #[test]
    fn finite_difference_basics() {
        let d = finite_difference_gradient(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(d[0], 6.0, epsilon = 1e-9);
        let d = finite_difference_gradient(|p| Ok(p[0].sin()), &[0.0], 1e-5).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-9);
        assert!(finite_difference_gradient(|p| Ok(p[0]), &[0.0], 0.0).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let w = g.variable(array![[0.3, -0.2], [0.5, 0.1]]);
            let x = g.constant(array![[1.0], [-2.0]]);
            let h = g.matvec(w, x).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.mean(t).unwrap();
            g.backward(s).unwrap();
            g.grad(w)
        };
        let (a, b) = (build(), build());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
