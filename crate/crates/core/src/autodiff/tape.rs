use std::ops::Range;

use super::array::{self, Array};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Value<'a> {
    Owned(Array),
    Borrowed(&'a Array),
}

impl Value<'_> {
    fn get(&self) -> &Array {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

/// Backward rule of a node. Parents always have smaller indices than the
/// node itself, so the record is a topological order by construction.
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    ScalarMul(Var, f64),
    Concat(Vec<Var>, Axis),
    Slice { input: Var, rows: Range<usize>, cols: Range<usize> },
    Transpose(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { input: Var, cols: Vec<usize> },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

/// Wengert list of forward operations.
///
/// Leaves may borrow their values (parameters are never copied onto the
/// tape); every intermediate owns its result.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> AutodiffError {
    AutodiffError::Shape { op, lhs: a.shape(), rhs: b.shape() }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        self.nodes[v.0].value.get()
    }

    /// Parents of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::RowSoftmax(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::ScalarMul(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Pick { input, .. } => vec![*input],
        }
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that borrows its value, used for parameters and cached encodings.
    pub fn leaf_ref(&mut self, value: &'a Array) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = array::matmul(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Elementwise sum. A `1 × c` right operand is broadcast over the rows of
    /// an `r × c` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let mut out = av.clone();
            out.add_assign(bv);
            Ok(self.push(out, Op::Add(a, b)))
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            let mut out = av.clone();
            let c = av.cols();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &x) in row.iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
            Ok(self.push(out, Op::AddRow(a, b)))
        } else {
            Err(shape_err("add", av, bv))
        }
    }

    /// `a − b`, composed from `add` and `scalar_mul`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let neg = self.scalar_mul(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("elementwise_mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Array::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(array::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = array::row_softmax(self.value(a));
        self.push(out, Op::RowSoftmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = av.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(out, Op::ScalarMul(a, k))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, AutodiffError> {
        let first = match parts.first() {
            Some(&v) => self.value(v),
            None => return Err(AutodiffError::Contract("concat of zero inputs".into())),
        };
        let [r0, c0] = first.shape();
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.cols() != c0 {
                        return Err(shape_err("concat", first, pv));
                    }
                    data.extend_from_slice(pv.data());
                    rows += pv.rows();
                }
                Array::new([rows, c0], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.rows() != r0 {
                        return Err(shape_err("concat", first, pv));
                    }
                    cols += pv.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Array::new([r0, cols], data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(
        &mut self,
        a: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > av.rows() || cols.end > av.cols()
        {
            return Err(AutodiffError::Contract(format!(
                "slice {rows:?}x{cols:?} out of bounds for {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&av.row(r)[cols.clone()]);
        }
        let out = Array::new([rows.len(), cols.len()], data)?;
        Ok(self.push(out, Op::Slice { input: a, rows, cols }))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var, AutodiffError> {
        let cols = self.value(a).cols();
        self.slice(a, r..r + 1, 0..cols)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Stacks the rows `ids` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tv = self.value(table);
        if ids.is_empty() {
            return Err(AutodiffError::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(AutodiffError::Contract(format!(
                "row id {bad} out of range for table with {} rows",
                tv.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Array::new([ids.len(), tv.cols()], data)?;
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Picks entry `cols[r]` from each row `r`, giving an `r × 1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if cols.len() != av.rows() || cols.iter().any(|&c| c >= av.cols()) {
            return Err(AutodiffError::Contract(format!(
                "pick of {} columns from {:?}",
                cols.len(),
                av.shape()
            )));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let out = Array::new([cols.len(), 1], data)?;
        Ok(self.push(out, Op::Pick { input: a, cols: cols.to_vec() }))
    }

    /// Reverse pass from a scalar root. Gradient buffers start at zero on
    /// every call and accumulate additively across fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = node.value.get();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let shape = self.value(v).shape();
                grads[v.0].get_or_insert_with(|| Array::zeros(shape[0], shape[1]))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                array::matmul_nt_acc(g, bv, slot!(*a));
                array::matmul_tn_acc(av, g, slot!(*b));
            }
            Op::Add(a, b) => {
                slot!(*a).add_assign(g);
                slot!(*b).add_assign(g);
            }
            Op::AddRow(a, b) => {
                slot!(*a).add_assign(g);
                let gb = slot!(*b);
                let c = g.cols();
                for row in g.data().chunks(c) {
                    for (d, &x) in gb.data_mut().iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, &gv), &y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += gv * y;
                }
                for ((d, &gv), &x) in slot!(*b).data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * x;
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gv), &y) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::RowSoftmax(a) => {
                let c = out.cols();
                let ga = slot!(*a);
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let drow = &mut ga.data_mut()[r * c..(r + 1) * c];
                    for ((d, &yv), &gv) in drow.iter_mut().zip(y).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                for ((d, &gv), &x) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv / x;
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                for ((d, &gv), &x) in slot!(*a).data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += 2.0 * x * gv;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                for d in slot!(*a).data_mut() {
                    *d += gv;
                }
            }
            Op::ScalarMul(a, k) => {
                for (d, &gv) in slot!(*a).data_mut().iter_mut().zip(g.data()) {
                    *d += k * gv;
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        slot!(p).data_mut().iter_mut().zip(&g.data()[offset..offset + n]).for_each(
                            |(d, &gv)| *d += gv,
                        );
                        offset += n;
                    }
                }
                Axis::Cols => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = slot!(p);
                        for r in 0..g.rows() {
                            let src = &g.row(r)[col..col + w];
                            let dst = &mut gp.data_mut()[r * w..(r + 1) * w];
                            dst.iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                        col += w;
                    }
                }
            },
            Op::Slice { input, rows, cols } => {
                let gi = slot!(*input);
                let w = gi.cols();
                for (k, r) in rows.clone().enumerate() {
                    let dst = &mut gi.data_mut()[r * w + cols.start..r * w + cols.end];
                    dst.iter_mut().zip(g.row(k)).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Transpose(a) => {
                let ga = slot!(*a);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let cur = ga.get(c, r);
                        ga.set(c, r, cur + g.get(r, c));
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let gt = slot!(*table);
                let w = gt.cols();
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * w..(id + 1) * w];
                    dst.iter_mut().zip(g.row(k)).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Pick { input, cols } => {
                let gi = slot!(*input);
                for (r, &c) in cols.iter().enumerate() {
                    let cur = gi.get(r, c);
                    gi.set(r, c, cur + g.get(r, 0));
                }
            }
        }
    }
}

/// Result of a backward pass: the gradient of the root with respect to each
/// node that the root depends on.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient for `v`, zeros of the node's shape if unreachable.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Array {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = tape.value(v).shape();
            Array::zeros(r, c)
        })
    }
}
