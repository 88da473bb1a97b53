//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to every parameter that entered the graph.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Shift(Var, isize),
    MaxPoolCols(Var, Vec<usize>),
    AvgPoolCols(Var, usize),
    SoftmaxRows(Var),
    Transpose(Var),
    NormalizeRows(Var, Vec<f64>),
    MeanSquaredError(Var, Mat),
    MeanAbsoluteError(Var, Mat),
    MeanOf(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Operation record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients indexed by [`ParamId`]; `None` for parameters that did
/// not influence the output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                accumulate(slot, g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= k;
        }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, _, v)| Some(Mat::zeros(v.dim()))).collect(),
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn slot_zeros(slot: &mut Option<Mat>, dim: (usize, usize)) -> &mut Mat {
    slot.get_or_insert_with(|| Mat::zeros(dim))
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1 x k) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.dim(row).0, 1, "add_row expects a single-row operand");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a * row` elementwise with `row` (1 x k) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.dim(row).0, 1, "mul_row expects a single-row operand");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = self.value(a) * &m;
        self.push(v, Op::MulConst(a, m))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
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

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows: widths differ");
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    /// Output row `n` is input row `n - k`; rows shifted in from outside are zero.
    pub fn shift_rows(&mut self, a: Var, k: isize) -> Var {
        let src = self.value(a);
        let (n, c) = src.dim();
        let mut v = Mat::zeros((n, c));
        for i in 0..n as isize {
            let j = i - k;
            if (0..n as isize).contains(&j) {
                v.row_mut(i as usize).assign(&src.row(j as usize));
            }
        }
        self.push(v, Op::Shift(a, k))
    }

    /// Max over non-overlapping column windows of width `w`.
    pub fn max_pool_cols(&mut self, a: Var, w: usize) -> Var {
        let src = self.value(a);
        let (n, c) = src.dim();
        assert!(w > 0 && c % w == 0, "pool width {w} must divide {c}");
        let out_c = c / w;
        let mut v = Mat::zeros((n, out_c));
        let mut arg = Vec::with_capacity(n * out_c);
        for i in 0..n {
            for j in 0..out_c {
                let (mut best, mut bi) = (f64::NEG_INFINITY, j * w);
                for k in j * w..(j + 1) * w {
                    if src[[i, k]] > best {
                        best = src[[i, k]];
                        bi = k;
                    }
                }
                v[[i, j]] = best;
                arg.push(bi);
            }
        }
        self.push(v, Op::MaxPoolCols(a, arg))
    }

    /// Mean over non-overlapping column windows of width `w`.
    pub fn avg_pool_cols(&mut self, a: Var, w: usize) -> Var {
        let src = self.value(a);
        let (n, c) = src.dim();
        assert!(w > 0 && c % w == 0, "pool width {w} must divide {c}");
        let v = Mat::from_shape_fn((n, c / w), |(i, j)| {
            (j * w..(j + 1) * w).map(|k| src[[i, k]]).sum::<f64>() / w as f64
        });
        self.push(v, Op::AvgPoolCols(a, w))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let k = v.ncols() as f64;
        let mut inv = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / k;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv.push(is);
        }
        self.push(v, Op::NormalizeRows(a, inv))
    }

    /// Scalar (1 x 1) mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape mismatch");
        let l = (p - &target).mapv(|d| d * d).mean().unwrap_or(0.0);
        self.push(Mat::from_elem((1, 1), l), Op::MeanSquaredError(pred, target))
    }

    /// Scalar (1 x 1) mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: Mat) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mae shape mismatch");
        let l = (p - &target).mapv(f64::abs).mean().unwrap_or(0.0);
        self.push(Mat::from_elem((1, 1), l), Op::MeanAbsoluteError(pred, target))
    }

    /// Mean of several scalars.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        let s: f64 = parts.iter().map(|&p| self.value(p)[[0, 0]]).sum();
        self.push(Mat::from_elem((1, 1), s / parts.len() as f64), Op::MeanOf(parts.to_vec()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: Var, n_params: usize) -> Gradients {
        assert_eq!(self.dim(output), (1, 1), "backward needs a scalar output");
        let mut g: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[output.0] = Some(Mat::ones((1, 1)));
        let mut params: Vec<Option<Mat>> = Vec::with_capacity(n_params);
        params.resize_with(n_params, || None);

        for i in (0..=output.0).rev() {
            let Some(grad) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut params[id.index()], grad),
                Op::MatMul(a, b) => {
                    let ga = grad.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&grad);
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[b.0], grad.clone());
                    accumulate(&mut g[a.0], grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g[b.0], -&grad);
                    accumulate(&mut g[a.0], grad);
                }
                Op::Mul(a, b) => {
                    let ga = &grad * self.value(*b);
                    let gb = &grad * self.value(*a);
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::AddRow(a, r) => {
                    let gr = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut g[r.0], gr);
                    accumulate(&mut g[a.0], grad);
                }
                Op::MulRow(a, r) => {
                    let gr = (&grad * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &grad * self.value(*r);
                    accumulate(&mut g[r.0], gr);
                    accumulate(&mut g[a.0], ga);
                }
                Op::MulConst(a, m) => accumulate(&mut g[a.0], &grad * m),
                Op::Scale(a, k) => accumulate(&mut g[a.0], grad * *k),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut g[a.0], &grad * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut g[a.0], &grad * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let ga = ndarray::Zip::from(&grad)
                        .and(y)
                        .map_collect(|&d, &y| if y > 0.0 { d } else { 0.0 });
                    accumulate(&mut g[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.dim(*p).1;
                        accumulate(&mut g[p.0], grad.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let dim = self.dim(*a);
                    let w = grad.ncols();
                    let dst = slot_zeros(&mut g[a.0], dim);
                    let mut view = dst.slice_mut(s![.., *start..*start + w]);
                    view += &grad;
                }
                Op::Row(a, r) => {
                    let dim = self.dim(*a);
                    let dst = slot_zeros(&mut g[a.0], dim);
                    let mut view = dst.row_mut(*r);
                    view += &grad.row(0);
                }
                Op::StackRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let h = self.dim(*p).0;
                        accumulate(&mut g[p.0], grad.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::Shift(a, k) => {
                    let (n, c) = grad.dim();
                    let mut ga = Mat::zeros((n, c));
                    for j in 0..n as isize {
                        let i = j + k;
                        if (0..n as isize).contains(&i) {
                            ga.row_mut(j as usize).assign(&grad.row(i as usize));
                        }
                    }
                    accumulate(&mut g[a.0], ga);
                }
                Op::MaxPoolCols(a, arg) => {
                    let dim = self.dim(*a);
                    let out_c = grad.ncols();
                    let dst = slot_zeros(&mut g[a.0], dim);
                    for (idx, &src_col) in arg.iter().enumerate() {
                        let (r, c) = (idx / out_c, idx % out_c);
                        dst[[r, src_col]] += grad[[r, c]];
                    }
                }
                Op::AvgPoolCols(a, w) => {
                    let dim = self.dim(*a);
                    let dst = slot_zeros(&mut g[a.0], dim);
                    for ((r, c), d) in grad.indexed_iter() {
                        for k in c * w..(c + 1) * w {
                            dst[[r, k]] += d / *w as f64;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &grad * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yy| *v -= yy * dot);
                    }
                    accumulate(&mut g[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut g[a.0], grad.t().to_owned()),
                Op::NormalizeRows(a, inv) => {
                    let xhat = &node.value;
                    let k = xhat.ncols() as f64;
                    let mut ga = grad.clone();
                    for ((mut row, xr), is) in ga.rows_mut().into_iter().zip(xhat.rows()).zip(inv) {
                        let mean_g = row.sum() / k;
                        let mean_gx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / k;
                        row.zip_mut_with(&xr, |v, &x| *v = is * (*v - mean_g - x * mean_gx));
                    }
                    accumulate(&mut g[a.0], ga);
                }
                Op::MeanSquaredError(p, target) => {
                    let d = grad[[0, 0]];
                    let pv = self.value(*p);
                    let n = pv.len() as f64;
                    accumulate(&mut g[p.0], (pv - target) * (2.0 * d / n));
                }
                Op::MeanAbsoluteError(p, target) => {
                    let d = grad[[0, 0]];
                    let pv = self.value(*p);
                    let n = pv.len() as f64;
                    accumulate(&mut g[p.0], (pv - target).mapv(|x| x.signum() * d / n));
                }
                Op::MeanOf(parts) => {
                    let d = grad[[0, 0]] / parts.len() as f64;
                    for p in parts {
                        accumulate(&mut g[p.0], Mat::from_elem((1, 1), d));
                    }
                }
            }
        }
        Gradients { grads: params }
    }
}
