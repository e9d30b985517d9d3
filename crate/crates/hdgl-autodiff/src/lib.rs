//! Reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! A [`Tape`] records an eagerly-evaluated expression graph; [`Tape::backward`]
//! walks it once in reverse and accumulates adjoints. Everything is a 2-D
//! `ndarray` array: row vectors are `1×n`, column vectors `n×1`, scalars `1×1`.
//!
//! The op set is deliberately small and shaped around recurrent nets, graph
//! convolutions and attention blocks: besides the usual arithmetic and
//! activations there are row/column broadcasts, row gathering/stacking, a
//! block-diagonal matrix product (one tape node for a whole segmented graph)
//! and a per-segment mean.
//!
//! Tapes are single-threaded and short-lived: build one per optimization step,
//! run backward, read the gradients out through a [`Session`], drop it.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub mod gradcheck;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `n×m` plus a `1×m` row, broadcast down the rows.
    AddRow(Var, Var),
    /// `n×m` times a `1×m` row, broadcast down the rows.
    MulRow(Var, Var),
    /// `n×m` times an `n×1` column, broadcast across the columns.
    MulCol(Var, Var),
    /// `n×m` minus an `n×1` column, broadcast across the columns.
    SubCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    /// Sum over rows: `n×m -> 1×m`.
    SumRows(Var),
    /// Mean over columns: `n×m -> n×1`.
    MeanCols(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    /// Row `r` of each input, stacked: `k` inputs of `n×m` -> `k×m`.
    RowFromEach(Vec<Var>, usize),
    /// Block-diagonal product: row-blocks of the input are each multiplied by
    /// the corresponding constant square block.
    BlockMatMul(Rc<Vec<Matrix>>, Var),
    /// Mean of each row-block: `(Σ sizes)×m -> len(sizes)×m`.
    SegmentMean(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Eagerly-evaluated expression tape.
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() called on a {:?} node", m.dim());
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tape value");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self, a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self, a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_same_shape(self, a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} . {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim().0, 1, "add_row needs a 1xM row");
        assert_eq!(self.value(row).dim().1, m, "add_row width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, m), "mul_row needs a 1xM row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.value(a).dim();
        assert_eq!(self.value(col).dim(), (n, 1), "mul_col needs an Nx1 column");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.value(a).dim();
        assert_eq!(self.value(col).dim(), (n, 1), "sub_col needs an Nx1 column");
        let v = self.value(a) - self.value(col);
        self.push(v, Op::SubCol(a, col))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::recip);
        self.push(v, Op::Recip(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        self.push(v, Op::MeanCols(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros((idx.len(), x.dim().1));
        for (out, &i) in idx.iter().enumerate() {
            v.row_mut(out).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, Rc::new(idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).dim().1;
        let rows: usize = parts.iter().map(|&p| self.value(p).dim().0).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let x = self.value(p);
            v.slice_mut(s![at..at + x.dim().0, ..]).assign(x);
            at += x.dim().0;
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ma) = self.value(a).dim();
        let (nb, mb) = self.value(b).dim();
        assert_eq!(n, nb, "concat_cols row mismatch");
        let mut v = Matrix::zeros((n, ma + mb));
        v.slice_mut(s![.., ..ma]).assign(self.value(a));
        v.slice_mut(s![.., ma..]).assign(self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn row_from_each(&mut self, parts: &[Var], row: usize) -> Var {
        assert!(!parts.is_empty(), "row_from_each of nothing");
        let cols = self.value(parts[0]).dim().1;
        let mut v = Matrix::zeros((parts.len(), cols));
        for (out, &p) in parts.iter().enumerate() {
            v.row_mut(out).assign(&self.value(p).row(row));
        }
        self.push(v, Op::RowFromEach(parts.to_vec(), row))
    }

    /// `blocks[s]` multiplies the `s`-th row-block of `x`. Block `s` must be
    /// `n_s×n_s` and the block row counts must sum to `x`'s row count.
    pub fn block_matmul(&mut self, blocks: Rc<Vec<Matrix>>, x: Var) -> Var {
        let xv = self.value(x);
        let total: usize = blocks.iter().map(|b| b.dim().0).sum();
        assert_eq!(total, xv.dim().0, "block_matmul row mismatch");
        let mut v = Matrix::zeros(xv.dim());
        let mut at = 0;
        for b in blocks.iter() {
            let n = b.dim().0;
            assert_eq!(b.dim().1, n, "block_matmul blocks must be square");
            let y = b.dot(&xv.slice(s![at..at + n, ..]));
            v.slice_mut(s![at..at + n, ..]).assign(&y);
            at += n;
        }
        self.push(v, Op::BlockMatMul(blocks, x))
    }

    pub fn segment_mean(&mut self, x: Var, sizes: Vec<usize>) -> Var {
        let xv = self.value(x);
        let total: usize = sizes.iter().sum();
        assert_eq!(total, xv.dim().0, "segment_mean row mismatch");
        assert!(sizes.iter().all(|&n| n > 0), "segment_mean of empty segment");
        let mut v = Matrix::zeros((sizes.len(), xv.dim().1));
        let mut at = 0;
        for (sidx, &n) in sizes.iter().enumerate() {
            let mean = xv.slice(s![at..at + n, ..]).mean_axis(Axis(0)).unwrap();
            v.row_mut(sidx).assign(&mean);
            at += n;
        }
        self.push(v, Op::SegmentMean(x, Rc::new(sizes)))
    }

    /// Accumulate adjoints of every node reachable from `loss` (a `1×1` node).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_to = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, dy * self.value(*b));
                add_to(grads, *b, dy * self.value(*a));
            }
            Op::MatMul(a, b) => {
                add_to(grads, *a, dy.dot(&self.value(*b).t()));
                add_to(grads, *b, self.value(*a).t().dot(dy));
            }
            Op::Scale(a, c) => add_to(grads, *a, dy * *c),
            Op::AddScalar(a) => add_to(grads, *a, dy.clone()),
            Op::AddRow(a, row) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                add_to(grads, *a, dy * self.value(*row));
                let da = dy * self.value(*a);
                add_to(grads, *row, da.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                add_to(grads, *a, dy * self.value(*col));
                let da = dy * self.value(*a);
                add_to(grads, *col, da.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::SubCol(a, col) => {
                add_to(grads, *a, dy.clone());
                add_to(grads, *col, -dy.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Sigmoid(a) => add_to(grads, *a, dy * &(y * &y.mapv(|v| 1.0 - v))),
            Op::Tanh(a) => add_to(grads, *a, dy * &y.mapv(|v| 1.0 - v * v)),
            Op::Relu(a) => add_to(grads, *a, dy * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })),
            Op::Sqrt(a) => add_to(grads, *a, dy * &y.mapv(|v| 0.5 / v)),
            Op::Recip(a) => add_to(grads, *a, dy * &y.mapv(|v| -v * v)),
            Op::Transpose(a) => add_to(grads, *a, dy.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let mut dx = dy * y;
                for r in 0..dx.dim().0 {
                    let dot: f64 = dx.row(r).sum();
                    let yr = y.row(r).to_owned();
                    let mut row = dx.row_mut(r);
                    row += &(&yr * -dot);
                }
                add_to(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let mut dx = dy.clone();
                for r in 0..dx.dim().0 {
                    let dsum: f64 = dy.row(r).sum();
                    let sm = y.row(r).mapv(f64::exp);
                    let mut row = dx.row_mut(r);
                    row -= &(&sm * dsum);
                }
                add_to(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).dim();
                add_to(grads, *a, Matrix::from_elem(shape, dy[[0, 0]]));
            }
            Op::SumRows(a) => {
                let n = self.value(*a).dim().0;
                let mut dx = Matrix::zeros(self.value(*a).dim());
                for r in 0..n {
                    dx.row_mut(r).assign(&dy.row(0));
                }
                add_to(grads, *a, dx);
            }
            Op::MeanCols(a) => {
                let (n, m) = self.value(*a).dim();
                let mut dx = Matrix::zeros((n, m));
                for r in 0..n {
                    dx.row_mut(r).fill(dy[[r, 0]] / m as f64);
                }
                add_to(grads, *a, dx);
            }
            Op::GatherRows(a, idx) => {
                let mut dx = Matrix::zeros(self.value(*a).dim());
                for (out, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &dy.row(out);
                }
                add_to(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).dim().0;
                    add_to(grads, p, dy.slice(s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let ma = self.value(*a).dim().1;
                add_to(grads, *a, dy.slice(s![.., ..ma]).to_owned());
                add_to(grads, *b, dy.slice(s![.., ma..]).to_owned());
            }
            Op::RowFromEach(parts, row) => {
                for (out, &p) in parts.iter().enumerate() {
                    let mut dx = Matrix::zeros(self.value(p).dim());
                    dx.row_mut(*row).assign(&dy.row(out));
                    add_to(grads, p, dx);
                }
            }
            Op::BlockMatMul(blocks, x) => {
                let mut dx = Matrix::zeros(self.value(*x).dim());
                let mut at = 0;
                for b in blocks.iter() {
                    let n = b.dim().0;
                    let d = b.t().dot(&dy.slice(s![at..at + n, ..]));
                    dx.slice_mut(s![at..at + n, ..]).assign(&d);
                    at += n;
                }
                add_to(grads, *x, dx);
            }
            Op::SegmentMean(x, sizes) => {
                let mut dx = Matrix::zeros(self.value(*x).dim());
                let mut at = 0;
                for (sidx, &n) in sizes.iter().enumerate() {
                    let scaled = &dy.row(sidx) / n as f64;
                    for r in at..at + n {
                        dx.row_mut(r).assign(&scaled);
                    }
                    at += n;
                }
                add_to(grads, *x, dx);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`]. Nodes the loss does not depend on
/// have no entry.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn binary_same_shape(
    tape: &Tape,
    a: Var,
    b: Var,
    what: &str,
    f: impl Fn(&Matrix, &Matrix) -> Matrix,
) -> Matrix {
    let (x, y) = (tape.value(a), tape.value(b));
    assert_eq!(x.dim(), y.dim(), "{what} shape mismatch: {:?} vs {:?}", x.dim(), y.dim());
    f(x, y)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    v
}

/// Named trainable parameters, living outside any tape.
///
/// Models hold [`ParamId`]s; a [`Session`] binds each parameter to a tape leaf
/// on first use so one store can back many tapes over the course of training.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

/// One forward/backward pass: a tape plus the parameter bindings made on it.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
        }
    }

    /// Tape leaf for a parameter; inserted on first use, shared afterwards.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.constant(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.tape.constant(value)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        self.tape.backward(loss)
    }

    /// Gradient of each store parameter, aligned with store ids. Parameters
    /// never bound on this tape (or not reached by the loss) yield `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Matrix>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
