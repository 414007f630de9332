//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records operations on dense row-major matrices. Parameters are
//! read from a [`ParamStore`] into the tape as leaves; after the forward pass,
//! [`Tape::backward_into`] accumulates exact gradients back into the store.
//!
//! ```
//! use maven_core::autodiff::{Matrix, ParamStore, Tape};
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", Matrix::scalar(3.0));
//! let mut tape = Tape::new();
//! let x = tape.param(&store, w);
//! let y = tape.mul(x, x);
//! let loss = tape.sum(y);
//! tape.backward_into(loss, &mut store).unwrap();
//! assert_eq!(store.grad(w).data(), &[6.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("tape was recorded against parameter version {recorded}, store is at {current}")]
    StaleTape { recorded: u64, current: u64 },
    #[error("tape was recorded against a different parameter store")]
    ForeignStore,
    #[error("backward needs a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Rows of one-hot encodings: row `r` has a 1 at column `hot[r]`.
    pub fn one_hot(hot: &[usize], width: usize) -> Self {
        let mut m = Self::zeros(hot.len(), width);
        for (r, &c) in hot.iter().enumerate() {
            m.data[r * width + c] = 1.0;
        }
        m
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        gemm(self, false, other, false)
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "matmul inner dimension mismatch: {ka} vs {kb}");
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || ka == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe in-bounds views of the row-major buffers above,
    // and `c` is a distinct, correctly sized output buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Matrix,
    grad: Matrix,
    sq_avg: Matrix,
}

/// Named parameter tensors with their gradients and RMSprop accumulators.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    version: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        let (r, c) = value.shape();
        self.entries.push(ParamEntry {
            name: name.clone(),
            grad: Matrix::zeros(r, c),
            sq_avg: Matrix::zeros(r, c),
            value,
        });
        self.index.insert(name, id);
        self.version += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn sq_avg(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].sq_avg
    }

    /// Mutable access to a value. Invalidates outstanding tapes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.version += 1;
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(
            value.shape(),
            self.entries[id.0].value.shape(),
            "set_value shape mismatch for {}",
            self.entries[id.0].name
        );
        *self.value_mut(id) = value;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len(), "store layout mismatch");
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(dst.name, src.name, "store layout mismatch");
            dst.value.data.copy_from_slice(&src.value.data);
        }
        self.version += 1;
    }

    /// Flattened copy of all parameter values, in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data.iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data.iter().copied())
            .collect()
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &Matrix) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub(crate) fn entry_parts_mut(&mut self, id: ParamId) -> (&mut Matrix, &Matrix, &mut Matrix) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.sq_avg)
    }

    /// Multiplies every gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            e.grad.scale_in_place(c);
        }
    }

    /// Rescales gradients so their global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / (norm + 1e-6));
        }
        norm
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn restore_sq_avg(&mut self, id: ParamId, sq: Matrix) {
        assert_eq!(sq.shape(), self.entries[id.0].sq_avg.shape());
        self.entries[id.0].sq_avg = sq;
    }
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Exp(Var),
    LogFloor(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<Option<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    BatchVecMat(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    store: Option<(u64, u64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            store: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter into the tape. Repeated reads return the same node.
    ///
    /// Panics if the tape already holds parameters from another store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        match self.store {
            None => self.store = Some((store.uid, store.version)),
            Some((uid, _)) => assert_eq!(uid, store.uid, "tape mixes parameter stores"),
        }
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(self.value(a), false, self.value(b), false);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a single row");
        assert_eq!(av.cols, rv.cols, "add_row column mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push(out, Op::LogFloor(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            softmax_row(av.row(r), out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            log_softmax_row(av.row(r), out.row_mut(r));
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Sum of all entries, as a 1x1.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::scalar(av.sum() / av.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Per-row sums, as a column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        self.push(Matrix::from_vec(av.rows, 1, data), Op::SumCols(a))
    }

    /// Picks `a[r, idx[r]]` for each row, as a column.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows, "gather_cols needs one index per row");
        let data = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        self.push(Matrix::from_vec(av.rows, 1, data), Op::GatherCols(a, idx))
    }

    /// Builds a matrix whose row `i` is `a[idx[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(idx.len(), av.cols);
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                out.row_mut(i).copy_from_slice(av.row(s));
            }
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
                offset += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape changes element count");
        let out = Matrix::from_vec(rows, cols, av.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Row-wise vector-matrix product: `x` is `R x p`, `w` is `R x (p*q)` holding
    /// one `p x q` row-major matrix per row; the result is `R x q`.
    pub fn batch_vecmat(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rows, wv.rows, "batch_vecmat row mismatch");
        let p = xv.cols;
        assert!(p > 0 && wv.cols % p == 0, "batch_vecmat width mismatch");
        let q = wv.cols / p;
        let mut out = Matrix::zeros(xv.rows, q);
        for r in 0..xv.rows {
            let (xr, wr) = (xv.row(r), wv.row(r));
            let o = out.row_mut(r);
            for i in 0..p {
                let xi = xr[i];
                for (oj, wij) in o.iter_mut().zip(&wr[i * q..(i + 1) * q]) {
                    *oj += xi * wij;
                }
            }
        }
        self.push(out, Op::BatchVecMat(x, w))
    }

    /// Squared-error mean, a convenience over the primitive ops.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Gradients of the 1x1 `output` with respect to every node.
    pub fn gradients(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let ov = self.value(output);
        if ov.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                rows: ov.rows,
                cols: ov.cols,
            });
        }
        Ok(self.gradients_with_seed(output, Matrix::scalar(1.0)))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn gradients_with_seed(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Runs backward from a scalar loss and adds parameter gradients to `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if let Some((uid, version)) = self.store {
            if uid != store.uid {
                return Err(AutodiffError::ForeignStore);
            }
            if version != store.version {
                return Err(AutodiffError::StaleTape {
                    recorded: version,
                    current: store.version,
                });
            }
        }
        let grads = self.gradients(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.add_grad(id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        fn acc(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, gemm(g, false, bv, true));
                acc(grads, *b, gemm(av, true, g, false));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                acc(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                let mut gr = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (s, x) in gr.data.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *row, gr);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(grads, *a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Elu(a) => {
                let av = self.value(*a);
                acc(grads, *a, g.zip_map(av, |x, y| if y > 0.0 { x } else { x * y.exp() }));
            }
            Op::Tanh(a) => acc(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Abs(a) => {
                let av = self.value(*a);
                let sign = |y: f64| {
                    if y > 0.0 {
                        1.0
                    } else if y < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(grads, *a, g.zip_map(av, |x, y| x * sign(y)));
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::LogFloor(a, floor) => {
                let av = self.value(*a);
                let f = *floor;
                acc(grads, *a, g.zip_map(av, |x, y| if y > f { x / y } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, x), y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = y * (x - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, x), y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = x - y.exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).iter_mut().for_each(|x| *x = g.data[i]);
                }
                acc(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    ga.data[i * c + j] = g.data[i];
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        for (o, x) in ga.row_mut(s).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    let mut gp = Matrix::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    acc(grads, p, gp);
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::from_vec(r, c, g.data.clone()));
            }
            Op::BatchVecMat(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let p = xv.cols;
                let q = g.cols;
                let mut gx = Matrix::zeros(xv.rows, p);
                let mut gw = Matrix::zeros(wv.rows, wv.cols);
                for r in 0..xv.rows {
                    let (xr, wr, gr) = (xv.row(r), wv.row(r), g.row(r));
                    for i in 0..p {
                        let wi = &wr[i * q..(i + 1) * q];
                        gx.data[r * p + i] = wi.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let gwi = &mut gw.data[r * wv.cols + i * q..r * wv.cols + (i + 1) * q];
                        for (o, gj) in gwi.iter_mut().zip(gr) {
                            *o = xr[i] * gj;
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
        }
    }
}

/// Per-node gradients from one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to each entry of `x0`.
    fn numeric_grad(x0: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let weights = Matrix::uniform(x0.rows(), x0.cols(), 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let f = |x: &Matrix| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            let yv = t.value(y).clone();
            // project onto fixed random weights so every output entry matters
            if yv.shape() == weights.shape() {
                yv.zip_map(&weights, |a, b| a * b).sum()
            } else {
                yv.sum()
            }
        };
        let mut t = Tape::new();
        let xv = t.constant(x0.clone());
        let y = build(&mut t, xv);
        let seed = if t.value(y).shape() == weights.shape() {
            weights.clone()
        } else {
            Matrix::filled(t.value(y).rows(), t.value(y).cols(), 1.0)
        };
        let grads = t.gradients_with_seed(y, seed);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&x0, f);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform(rows, cols, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::scalar(3.0));
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let y = t.mul(x, x);
        let loss = t.sum(y);
        t.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::scalar(-1.5));
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let z = t.scale(x, 0.0);
        let c = t.add_scalar(z, 4.0);
        let loss = t.sum(c);
        t.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).item(), 0.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::scalar(1.0));
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let loss = t.sum(x);
        store.value_mut(w).data_mut()[0] = 2.0;
        assert!(matches!(
            t.backward_into(loss, &mut store),
            Err(AutodiffError::StaleTape { .. })
        ));
        let mut other = ParamStore::new();
        other.insert("w", Matrix::scalar(1.0));
        assert_eq!(t.backward_into(loss, &mut other), Err(AutodiffError::ForeignStore));
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x = random(3, 4, 1);
        check_unary(|t, v| t.tanh(v), x.clone());
        check_unary(|t, v| t.sigmoid(v), x.clone());
        check_unary(|t, v| t.exp(v), x.clone());
        check_unary(|t, v| t.elu(v), x.clone());
        check_unary(|t, v| t.relu(v), x.clone());
        check_unary(|t, v| t.abs(v), x.clone());
        check_unary(|t, v| t.softmax_rows(v), x.clone());
        check_unary(|t, v| t.log_softmax_rows(v), x.clone());
        check_unary(|t, v| t.sum_cols(v), x.clone());
        check_unary(|t, v| t.mean(v), x.clone());
        check_unary(|t, v| t.slice_cols(v, 1, 2), x.clone());
        check_unary(|t, v| t.gather_cols(v, vec![0, 3, 2]), x.clone());
        check_unary(|t, v| t.gather_rows(v, vec![Some(2), None, Some(0), Some(2)]), x.clone());
        check_unary(|t, v| t.reshape(v, 6, 2), x.clone());
        check_unary(
            |t, v| {
                let p = t.exp(v);
                t.log_floor(p, 1e-8)
            },
            x.clone(),
        );
        check_unary(|t, v| t.concat_cols(&[v, v]), x.clone());
        check_unary(|t, v| t.mul(v, v), x);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let b = random(4, 5, 2);
        let row = random(1, 5, 3);
        let w = random(3, 4 * 2, 4);
        check_unary(
            move |t, v| {
                let bv = t.constant(b.clone());
                t.matmul(v, bv)
            },
            random(3, 4, 5),
        );
        check_unary(
            move |t, v| {
                let r = t.constant(row.clone());
                t.add_row(v, r)
            },
            random(3, 5, 6),
        );
        let w2 = w.clone();
        check_unary(
            move |t, v| {
                let wv = t.constant(w2.clone());
                t.batch_vecmat(v, wv)
            },
            random(3, 4, 7),
        );
        let x = random(3, 4, 8);
        check_unary(
            move |t, v| {
                let xv = t.constant(x.clone());
                t.batch_vecmat(xv, v)
            },
            w,
        );
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = random(3, 4, 10);
        let b = random(3, 5, 11);
        let c = gemm(&a, true, &b, false);
        assert_eq!(c.shape(), (4, 5));
        let naive = a.transpose().matmul(&b);
        for (x, y) in c.data().iter().zip(naive.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let d = gemm(&b, false, &b, true);
        let naive = b.matmul(&b.transpose());
        for (x, y) in d.data().iter().zip(naive.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_reads_accumulate() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Matrix::scalar(2.0));
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let s = t.add(a, b);
        let loss = t.sum(s);
        t.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).item(), 2.0);
    }
}
