//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`]; only parameters whose group is marked trainable
//! on the tape receive gradients, and nodes that cannot reach a trainable
//! parameter are skipped during the backward sweep.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{Gradients, ParamGroup, ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant symmetric propagation matrix, stored as `(row, col, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub(crate) fn apply(&self, x: &Mat, transpose: bool) -> Mat {
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for &(r, c, w) in &self.entries {
            let (dst, src) = if transpose { (c, r) } else { (r, c) };
            let src_row = x.row(src);
            let mut dst_row = out.row_mut(dst);
            dst_row.scaled_add(w, &src_row);
        }
        out
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Log1m(Var, f64),
    Clamp(Var, f64, f64),
    AtLeastOne(Var),
    Recip(Var),
    SumAll(Var),
    MeanRows(Var),
    RowNorms(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    RepeatRow(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Propagate(Var, Rc<SparseMatrix>),
    LogSoftmax(Var),
    PickSum(Var, Rc<Vec<usize>>),
    StraightThrough(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Vec<ParamGroup>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(&[])
    }
}

impl Tape {
    /// A tape on which only parameters of `trainable` groups get gradients.
    pub fn new(trainable: &[ParamGroup]) -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
            trainable: trainable.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn row_vec(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.iter().copied().collect()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    /// Leaf for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.trainable.contains(&store.group(id));
        let v = self.push(store.value(id).clone(), Op::Param(id), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a` (n×c) plus the row vector `b` (1×c) on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    /// `a` times the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        // `+ 0.0` folds negative zeros so that empty sums stay bitwise zero.
        let value = self.value(a).mapv(|x| x * k + 0.0);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// `ln(1 − a)` with `a` clamped to at most `upper`.
    pub fn log1m(&mut self, a: Var, upper: f64) -> Var {
        let value = self.value(a).mapv(|x| (-x.min(upper)).ln_1p());
        let ng = self.ng(a);
        self.push(value, Op::Log1m(a, upper), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// `max(1, s)` for a 1×1 value.
    pub fn at_least_one(&mut self, s: Var) -> Var {
        let value = self.value(s).mapv(|x| x.max(1.0));
        let ng = self.ng(s);
        self.push(value, Op::AtLeastOne(s), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::recip);
        let ng = self.ng(a);
        self.push(value, Op::Recip(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Euclidean norm of each row, returned as a 1×n row vector.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let norms: Vec<f64> = self.value(a).rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let n = norms.len();
        let value = Mat::from_shape_vec((1, n), norms).expect("row shape");
        let ng = self.ng(a);
        self.push(value, Op::RowNorms(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, Rc::new(rows)), ng)
    }

    pub fn pick_row(&mut self, a: Var, row: usize) -> Var {
        self.gather_rows(a, vec![row])
    }

    /// Stacks `k` copies of the 1×c row `a`.
    pub fn repeat_row(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        let value = src.broadcast((k, src.ncols())).expect("1×c row").to_owned();
        let ng = self.ng(a);
        self.push(value, Op::RepeatRow(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `m · a` for a constant symmetric sparse `m`.
    pub fn propagate(&mut self, a: Var, m: Rc<SparseMatrix>) -> Var {
        let value = m.apply(self.value(a), false);
        let ng = self.ng(a);
        self.push(value, Op::Propagate(a, m), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// `Σ_r a[r, cols[r]]` as a 1×1 value.
    pub fn pick_sum(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let src = self.value(a);
        let total: f64 = cols.iter().enumerate().map(|(r, &c)| src[[r, c]]).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), total), Op::PickSum(a, Rc::new(cols)), ng)
    }

    /// Forward value `hard`, gradient passed straight to `relaxed`.
    pub fn straight_through(&mut self, relaxed: Var, hard: Mat) -> Var {
        let ng = self.ng(relaxed);
        self.push(hard, Op::StraightThrough(relaxed), ng)
    }

    /// Gradients of the 1×1 `loss` w.r.t. every trainable parameter used.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::zeros_like_none(store);
        if !self.ng(loss) {
            return grads;
        }
        let mut adj: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        acc(&mut adj, *a, g.dot(&val(*b).t()));
                    }
                    if ng(*b) {
                        acc(&mut adj, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if ng(*b) {
                        acc(&mut adj, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if ng(*b) {
                        acc(&mut adj, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        acc(&mut adj, *a, &g * val(*b));
                    }
                    if ng(*b) {
                        acc(&mut adj, *b, &g * val(*a));
                    }
                }
                Op::AddRow(a, b) => {
                    if ng(*b) {
                        acc(&mut adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(*a) {
                        acc(&mut adj, *a, g);
                    }
                }
                Op::MulScalar(a, s) => {
                    let k = val(*s)[[0, 0]];
                    if ng(*s) {
                        let d = (&g * val(*a)).sum();
                        acc(&mut adj, *s, Mat::from_elem((1, 1), d));
                    }
                    if ng(*a) {
                        acc(&mut adj, *a, g * k);
                    }
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut adj, *a, d);
                }
                Op::Exp(a) => acc(&mut adj, *a, g * &node.value),
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut adj, *a, d);
                }
                Op::Log1m(a, upper) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        *d = if x > *upper { 0.0 } else { -*d / (1.0 - x) };
                    });
                    acc(&mut adj, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                    acc(&mut adj, *a, d);
                }
                Op::AtLeastOne(a) => {
                    let d = if val(*a)[[0, 0]] > 1.0 { g } else { Mat::zeros((1, 1)) };
                    acc(&mut adj, *a, d);
                }
                Op::Recip(a) => {
                    let d = &g * &node.value.mapv(|y| -y * y);
                    acc(&mut adj, *a, d);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut adj, *a, Mat::from_elem(val(*a).raw_dim(), k));
                }
                Op::MeanRows(a) => {
                    let n = val(*a).nrows();
                    let d = g.broadcast((n, g.ncols())).unwrap().mapv(|x| x / n as f64);
                    acc(&mut adj, *a, d);
                }
                Op::RowNorms(a) => {
                    let x = val(*a);
                    let mut d = Mat::zeros(x.raw_dim());
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let norm = node.value[[0, r]];
                        if norm > 0.0 {
                            row.assign(&x.row(r));
                            row *= g[[0, r]] / norm;
                        }
                    }
                    acc(&mut adj, *a, d);
                }
                Op::GatherRows(a, rows) => {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::RepeatRow(a) => acc(&mut adj, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if ng(p) {
                            acc(&mut adj, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        if ng(p) {
                            acc(&mut adj, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::Propagate(a, m) => acc(&mut adj, *a, m.apply(&g, true)),
                Op::LogSoftmax(a) => {
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y.exp() * total);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::PickSum(a, cols) => {
                    let k = g[[0, 0]];
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    for (r, &c) in cols.iter().enumerate() {
                        d[[r, c]] += k;
                    }
                    acc(&mut adj, *a, d);
                }
                Op::StraightThrough(a) => acc(&mut adj, *a, g),
            }
        }
        grads
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use ndarray::array;

    /// Central differences over every entry of every parameter in `store`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let groups = ParamGroup::ALL;
        let mut tape = Tape::new(&groups);
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss, store);
        let eval = |s: &ParamStore| {
            let mut t = Tape::new(&[]);
            let l = f(&mut t, s);
            t.scalar(l)
        };
        for id in store.ids() {
            let g = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(store.value(id).raw_dim()));
            for idx in 0..store.value(id).len() {
                let orig = store.value(id).as_slice().unwrap()[idx];
                store.value_mut(id).as_slice_mut().unwrap()[idx] = orig + 1e-6;
                let up = eval(store);
                store.value_mut(id).as_slice_mut().unwrap()[idx] = orig - 1e-6;
                let down = eval(store);
                store.value_mut(id).as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / 2e-6;
                let analytic = g.as_slice().unwrap()[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "{} [{idx}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut store = ParamStore::default();
        let a = store.insert(ParamGroup::ThetaE, "a", array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]]);
        let b = store.insert(ParamGroup::ThetaE, "b", array![[0.9, 0.1, -0.3]]);
        check(&mut store, |t, s| {
            let a = t.param(s, a);
            let b = t.param(s, b);
            let x = t.add_row(a, b);
            let r = t.relu(x);
            let e = t.exp(b);
            let sg = t.sigmoid(x);
            let n = t.row_norms(x);
            let l1 = t.log1m(sg, 1.0 - 1e-6);
            let rep = t.repeat_row(e, 2);
            let m = t.mul(rep, sg);
            let c = t.concat_cols(&[m, r, l1]);
            let ls = t.log_softmax(c);
            let p = t.pick_sum(ls, vec![1, 7]);
            let total = t.sum_all(n);
            let one = t.at_least_one(total);
            let inv = t.recip(one);
            let mr = t.mean_rows(c);
            let sc = t.mul_scalar(mr, inv);
            let s2 = t.sum_all(sc);
            let cl = t.clamp(s2, -0.5, 10.0);
            t.add(p, cl)
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut store = ParamStore::default();
        let w = store.insert(ParamGroup::ThetaD, "w", array![[0.3, -0.7], [0.5, 0.2], [0.1, 0.8]]);
        let x = store.insert(ParamGroup::ThetaD, "x", array![[0.2, -0.1, 0.4], [1.0, 0.3, -0.2], [0.0, 0.5, 0.5]]);
        let m = Rc::new(SparseMatrix {
            rows: 3,
            entries: vec![(0, 0, 0.5), (0, 1, 0.4), (1, 0, 0.4), (1, 1, 0.3), (1, 2, 0.2), (2, 1, 0.2), (2, 2, 0.6)],
        });
        check(&mut store, move |t, s| {
            let w = t.param(s, w);
            let x = t.param(s, x);
            let h = t.propagate(x, m.clone());
            let y = t.matmul(h, w);
            let rows = t.gather_rows(y, vec![2, 0, 2]);
            let stacked = t.concat_rows(&[rows, y]);
            let d = t.sub(stacked, stacked);
            let sq = t.mul(stacked, stacked);
            let z = t.add(sq, d);
            let z = t.scale(z, 0.5);
            t.sum_all(z)
        });
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut store = ParamStore::default();
        let a = store.insert(ParamGroup::ThetaE, "a", array![[1.0, 2.0]]);
        let b = store.insert(ParamGroup::ThetaR, "b", array![[3.0, 4.0]]);
        let mut tape = Tape::new(&[ParamGroup::ThetaR]);
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let prod = tape.mul(va, vb);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, &store);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut store = ParamStore::default();
        let a = store.insert(ParamGroup::Phi, "a", array![[0.2, 0.7]]);
        let mut tape = Tape::new(&[ParamGroup::Phi]);
        let va = tape.param(&store, a);
        let st = tape.straight_through(va, array![[0.0, 1.0]]);
        assert_eq!(tape.value(st), &array![[0.0, 1.0]]);
        let loss = tape.sum_all(st);
        let grads = tape.backward(loss, &store);
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 1.0]]);
    }
}
