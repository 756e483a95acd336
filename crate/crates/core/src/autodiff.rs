//! Matrix-level reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! then walks the record in reverse and accumulates adjoints. Every value is a
//! [`Matrix`] (scalars are `1 x 1`). Frozen weights enter through
//! [`Tape::linear`] as shared constants and never receive gradients, so only
//! leaves created with [`Tape::param`] are trainable.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, Matrix};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Linear { x: usize, w: Arc<Matrix<T>> },
    MatMul { a: usize, b: usize },
    MatMulT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Identity { a: usize },
    MeanRows { a: usize },
    Scale { a: usize, s: T },
    MulConst { a: usize, m: Matrix<T> },
    Gelu { a: usize },
    LayerNorm { a: usize, inv_std: Vec<T> },
    SoftmaxRows { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    RowNormalize { a: usize, norms: Vec<T> },
    WeightedSum { a: usize, w: Matrix<T> },
    Sum { a: usize },
    Square { a: usize },
    Pick { a: usize, index: usize },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass. Single-owner: concurrent passes use
/// independent tapes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x * w + bias` with frozen `w` (`in x out`) and optional frozen `1 x out` bias.
    pub fn linear(&mut self, x: Var, w: &Arc<Matrix<T>>, bias: Option<&Matrix<T>>) -> Var {
        let xv = self.value(x);
        let mut y = match bias {
            Some(b) => {
                let mut y = Matrix::zeros(xv.rows(), w.cols());
                for i in 0..y.rows() {
                    y.row_mut(i).copy_from_slice(b.as_slice());
                }
                y
            }
            None => Matrix::zeros(xv.rows(), w.cols()),
        };
        gemm_into(xv, false, w, false, T::one(), &mut y);
        let ng = self.ng(x.0);
        self.push(y, Op::Linear { x: x.0, w: Arc::clone(w) }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(y, Op::MatMul { a: a.0, b: b.0 }, ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(y, Op::MatMulT { a: a.0, b: b.0 }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(y, Op::Add { a: a.0, b: b.0 }, ng)
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut y = self.value(a).clone();
        assert_eq!(r.len(), y.cols(), "add_row width");
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        self.push(y, Op::AddRow { a: a.0, row: row.0 }, ng)
    }

    /// Adds a constant; the adjoint passes through unchanged.
    pub fn add_const(&mut self, a: Var, c: &Matrix<T>) -> Var {
        let y = self.value(a).zip_map(c, |x, y| x + y);
        let ng = self.ng(a.0);
        self.push(y, Op::Identity { a: a.0 }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|x| x + c);
        let ng = self.ng(a.0);
        self.push(y, Op::Identity { a: a.0 }, ng)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let inv = T::one() / T::of(av.rows() as f64);
        let mut y = Matrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, &v) in y.as_mut_slice().iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        y.scale_assign(inv);
        let ng = self.ng(a.0);
        self.push(y, Op::MeanRows { a: a.0 }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|x| x * s);
        let ng = self.ng(a.0);
        self.push(y, Op::Scale { a: a.0, s }, ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Matrix<T>) -> Var {
        let y = self.value(a).zip_map(&m, |x, y| x * y);
        let ng = self.ng(a.0);
        self.push(y, Op::MulConst { a: a.0, m }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let y = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(a.0);
        self.push(y, Op::Gelu { a: a.0 }, ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::of(av.cols() as f64);
        let mut y = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let row = y.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a.0);
        self.push(y, Op::LayerNorm { a: a.0, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(a.0);
        self.push(y, Op::SoftmaxRows { a: a.0 }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.as_slice());
        }
        let rows = data.len() / cols.max(1);
        let y = Matrix::new(rows, cols, data).expect("concat shape");
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(y, Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut y = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols height");
            for i in 0..rows {
                y.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(y, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let y = Matrix::new(len, av.cols(), av.as_slice()[start * av.cols()..(start + len) * av.cols()].to_vec())
            .expect("slice_rows bounds");
        let ng = self.ng(a.0);
        self.push(y, Op::SliceRows { a: a.0, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let y = Matrix::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let ng = self.ng(a.0);
        self.push(y, Op::SliceCols { a: a.0, start }, ng)
    }

    /// Scales each row to unit L2 norm. Errors on a zero row.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        let mut norms = Vec::with_capacity(y.rows());
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::DegenerateVector);
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(a.0);
        Ok(self.push(y, Op::RowNormalize { a: a.0, norms }, ng))
    }

    /// `sum(w .* a)` as a `1 x 1` value.
    pub fn weighted_sum(&mut self, a: Var, w: Matrix<T>) -> Var {
        let s = self.value(a).as_slice().iter().zip(w.as_slice()).map(|(&x, &y)| x * y).sum();
        let ng = self.ng(a.0);
        self.push(Matrix::filled(1, 1, s), Op::WeightedSum { a: a.0, w }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a.0);
        self.push(Matrix::filled(1, 1, s), Op::Sum { a: a.0 }, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let ng = self.ng(a.0);
        self.push(y, Op::Square { a: a.0 }, ng)
    }

    /// Largest entry as `1 x 1`; the adjoint flows to the first maximizer.
    pub fn max_all(&mut self, a: Var) -> Var {
        self.pick(a, |x, best| x > best)
    }

    /// Smallest entry as `1 x 1`; the adjoint flows to the first minimizer.
    pub fn min_all(&mut self, a: Var) -> Var {
        self.pick(a, |x, best| x < best)
    }

    fn pick(&mut self, a: Var, better: impl Fn(T, T) -> bool) -> Var {
        let vals = self.value(a).as_slice();
        let mut index = 0;
        for (i, &v) in vals.iter().enumerate() {
            if better(v, vals[index]) {
                index = i;
            }
        }
        let y = Matrix::filled(1, 1, vals[index]);
        let ng = self.ng(a.0);
        self.push(y, Op::Pick { a: a.0, index }, ng)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).as_slice()[0]
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        let l = lv.as_slice()[0];
        if !l.is_finite() {
            return Err(Error::Diverged(l.as_f64()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                if self.ng(*x) {
                    self.accumulate(grads, *x, dy.matmul_t(w));
                }
            }
            Op::MatMul { a, b } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.matmul_t(&self.nodes[*b].value));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.nodes[*a].value.t_matmul(dy));
                }
            }
            Op::MatMulT { a, b } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.matmul(&self.nodes[*b].value));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy.t_matmul(&self.nodes[*a].value));
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy.clone());
                }
            }
            Op::AddRow { a, row } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.ng(*row) {
                    let mut g = Matrix::zeros(1, dy.cols());
                    for i in 0..dy.rows() {
                        for (o, &v) in g.as_mut_slice().iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, g);
                }
            }
            Op::Identity { a } => self.accumulate(grads, *a, dy.clone()),
            Op::MeanRows { a } => {
                let rows = self.nodes[*a].value.rows();
                let inv = T::one() / T::of(rows as f64);
                let g = Matrix::from_fn(rows, dy.cols(), |_, j| dy.get(0, j) * inv);
                self.accumulate(grads, *a, g);
            }
            Op::Scale { a, s } => self.accumulate(grads, *a, dy.map(|v| v * *s)),
            Op::MulConst { a, m } => self.accumulate(grads, *a, dy.zip_map(m, |g, k| g * k)),
            Op::Gelu { a } => {
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let g = self.nodes[*a].value.zip_map(dy, |x, g| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    g * d
                });
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm { a, inv_std } => {
                let n = T::of(y.cols() as f64);
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let sum_d: T = dr.iter().copied().sum();
                    let sum_dy: T = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum();
                    let scale = inv_std[i] / n;
                    for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                        *o = scale * (n * dr[j] - sum_d - yr[j] * sum_dy);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxRows { a } => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (dr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let r = self.nodes[p].value.rows();
                    if self.ng(p) {
                        let g = Matrix::new(r, dy.cols(), dy.as_slice()[off * dy.cols()..(off + r) * dy.cols()].to_vec())
                            .expect("concat_rows adjoint");
                        self.accumulate(grads, p, g);
                    }
                    off += r;
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.ng(p) {
                        let g = Matrix::from_fn(dy.rows(), c, |i, j| dy.get(i, off + j));
                        self.accumulate(grads, p, g);
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.nodes[*a].value.shape();
                let mut g = Matrix::zeros(r, c);
                g.as_mut_slice()[start * c..(start + dy.rows()) * c].copy_from_slice(dy.as_slice());
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.nodes[*a].value.shape();
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    g.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *a, g);
            }
            Op::RowNormalize { a, norms } => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let inner: T = yr.iter().zip(dr).map(|(&u, &d)| u * d).sum();
                    for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                        *o = (dr[j] - yr[j] * inner) / norms[i];
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::WeightedSum { a, w } => {
                let s = dy.get(0, 0);
                self.accumulate(grads, *a, w.map(|v| v * s));
            }
            Op::Sum { a } => {
                let (r, c) = self.nodes[*a].value.shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, dy.get(0, 0)));
            }
            Op::Square { a } => {
                let two = T::of(2.0);
                let g = self.nodes[*a].value.zip_map(dy, |x, g| two * x * g);
                self.accumulate(grads, *a, g);
            }
            Op::Pick { a, index } => {
                let (r, c) = self.nodes[*a].value.shape();
                let mut g = Matrix::zeros(r, c);
                g.as_mut_slice()[*index] = dy.get(0, 0);
                self.accumulate(grads, *a, g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], target: usize, g: Matrix<T>) {
        if !self.ng(target) {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    /// Central-difference check of `f` at `x0` against the tape gradient.
    fn check(x0: Matrix<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = f(&mut tape, x);
        let g = tape.backward(loss).unwrap().get(x);
        let h = 1e-5;
        for k in 0..x0.as_slice().len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_mut_slice()[k] += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let l = f(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {k}: fd {fd} vs tape {an}");
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut rng = Rng::new(11);
        let w = random(3, 4, &mut rng);
        check(random(3, 4, &mut rng), move |t, x| {
            let a = t.gelu(x);
            let b = t.layer_norm(a);
            let c = t.row_normalize(b).unwrap();
            let d = t.softmax_rows(c);
            let e = t.square(d);
            t.weighted_sum(e, w.clone())
        });
    }

    #[test]
    fn products_and_reshapes() {
        let mut rng = Rng::new(12);
        let w = Arc::new(random(4, 6, &mut rng));
        let other = random(2, 6, &mut rng);
        let weights = random(5, 6, &mut rng);
        check(random(3, 4, &mut rng), move |t, x| {
            let y = t.linear(x, &w, None);
            let o = t.constant(other.clone());
            let m = t.mean_rows(y);
            let z = t.concat_rows(&[o, y, m]);
            let zz = t.matmul_t(z, z);
            let q = t.slice_cols(zz, 1, 3);
            let r = t.slice_rows(z, 0, 3);
            let s = t.matmul(q, r);
            let s2 = t.add_row(s, m);
            let c = t.concat_cols(&[s2, s2]);
            let c = t.slice_cols(c, 3, 6);
            let c = t.concat_rows(&[c, y]);
            let c = t.slice_rows(c, 0, 5);
            let c = t.scale(c, 0.5);
            t.weighted_sum(c, weights.clone())
        });
    }

    #[test]
    fn reductions() {
        let mut rng = Rng::new(13);
        check(random(2, 5, &mut rng), |t, x| {
            let a = t.max_all(x);
            let b = t.min_all(x);
            let s = t.sum(x);
            let ab = t.add(a, b);
            let ab = t.add_scalar(ab, 0.3);
            let sq = t.square(ab);
            t.add(sq, s)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Matrix::filled(2, 2, 1.0));
        let p = t.param(Matrix::filled(2, 2, 2.0));
        let s = t.add(c, p);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(c), Matrix::zeros(2, 2));
        assert_eq!(g.get(p), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut t = Tape::<f64>::new();
        let p = t.param(Matrix::filled(1, 1, f64::INFINITY));
        let l = t.sum(p);
        assert!(matches!(t.backward(l), Err(Error::Diverged(_))));
    }
}
