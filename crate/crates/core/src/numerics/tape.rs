//! Reverse-mode differentiation over a flat, append-only tape.
//!
//! Every forward op appends a node holding its output value and enough cached
//! state to run its adjoint. Nodes only reference earlier nodes, so a single
//! reverse sweep over the node list is a valid topological traversal.

use super::tensor::{dims_of, Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    NormalizeRows { input: usize, norms: Vec<T>, eps: T },
    SoftmaxRows(usize),
    LogSoftmaxRows { input: usize, probs: Vec<T> },
    LogSumExpRows { input: usize, probs: Vec<T> },
    Dot(usize, usize),
    Sum(usize),
    Mean(usize),
    Gather { input: usize, index: Vec<(usize, usize)> },
    Nll { input: usize, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Differentiation tape. Build a scalar with the op methods, then consume the
/// tape with [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    max + total.ln()
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Single-element value of `v`, if it is one.
    pub fn item(&self, v: Var) -> Option<T> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.inputs_of(&op).iter().any(|&i| self.nodes[i].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<usize> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::NormalizeRows { input, .. }
            | Op::LogSoftmaxRows { input, .. }
            | Op::LogSumExpRows { input, .. }
            | Op::Gather { input, .. }
            | Op::Nll { input, .. } => vec![*input],
        }
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c), "scale")
    }

    /// `a[r, :] + bias` for every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (r, c) = ta.matrix_dims();
        if tb.len() != c || tb.shape().len() > 1 {
            return Err(mismatch("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (x, &b) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *x = *x + b;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(v, Op::AddRow(a.0, bias.0), "add_row")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let v = matmul_raw(ta, tb);
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() > 2 {
            return Err(invalid(format!("transpose expects at most 2-D, got {:?}", ta.shape())));
        }
        let v = ta.transpose();
        self.push(v, Op::Transpose(a.0), "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.0), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a.0), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::ln);
        self.push(v, Op::Log(a.0), "log")
    }

    /// Row-wise L2 normalization; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.normalize_impl(a, None)
    }

    /// Row-wise L2 normalization dividing by `max(norm, eps)`.
    pub fn l2_normalize_rows_eps(&mut self, a: Var, eps: T) -> Result<Var> {
        self.normalize_impl(a, Some(eps))
    }

    fn normalize_impl(&mut self, a: Var, eps: Option<T>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.matrix_dims();
        let mut data = ta.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let denom = match eps {
                Some(e) => norm.max(e),
                None if norm == T::zero() => return Err(Error::ZeroNorm { row: i }),
                None => norm,
            };
            for x in row.iter_mut() {
                *x = *x / denom;
            }
            norms.push(norm);
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let op = Op::NormalizeRows {
            input: a.0,
            norms,
            eps: eps.unwrap_or_else(T::zero),
        };
        self.push(v, op, "l2_normalize_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.matrix_dims();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(ta.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(v, Op::SoftmaxRows(a.0), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.matrix_dims();
        let mut probs = vec![T::zero(); r * c];
        let mut out = ta.data().to_vec();
        for i in 0..r {
            let lse = softmax_row(ta.row(i), &mut probs[i * c..(i + 1) * c]);
            for x in &mut out[i * c..(i + 1) * c] {
                *x = *x - lse;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(v, Op::LogSoftmaxRows { input: a.0, probs }, "log_softmax_rows")
    }

    /// `log Σ_c exp(a[r, c])` per row, computed with max subtraction. Output shape `[rows]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.matrix_dims();
        let mut probs = vec![T::zero(); r * c];
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            out.push(softmax_row(ta.row(i), &mut probs[i * c..(i + 1) * c]));
        }
        let v = Tensor::vector(out)?;
        self.push(v, Op::LogSumExpRows { input: a.0, probs }, "logsumexp_rows")
    }

    /// Sum of the elementwise product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a.0, b.0), "dot")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a.0), "mean")
    }

    /// Picks `a[r, c]` for every `(r, c)` in `index`; output shape `[index.len()]`.
    pub fn gather(&mut self, a: Var, index: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.matrix_dims();
        if index.is_empty() {
            return Err(invalid("gather with empty index"));
        }
        let mut out = Vec::with_capacity(index.len());
        for &(i, j) in index {
            if i >= r || j >= c {
                return Err(invalid(format!("gather index ({i}, {j}) out of range for {:?}", ta.shape())));
            }
            out.push(ta.data()[i * c + j]);
        }
        let v = Tensor::vector(out)?;
        self.push(v, Op::Gather { input: a.0, index: index.to_vec() }, "gather")
    }

    /// Mean negative log-likelihood `-(1/n) Σ_r logp[r, targets[r]]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        let (r, c) = t.matrix_dims();
        if targets.len() != r {
            return Err(mismatch("nll", t.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(invalid(format!("nll target {y} out of range for {c} classes")));
            }
            total = total - t.data()[i * c + y];
        }
        let v = Tensor::scalar(total / T::lit(r as f64));
        self.push(v, Op::Nll { input: logp.0, targets: targets.to_vec() }, "nll")
    }

    /// Runs the reverse sweep from a single-element `root`, consuming the tape.
    /// Every leaf gets a gradient (zeros when unreachable from `root`).
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut seed = Tensor::zeros_like(root_val);
        seed.data_mut()[0] = T::one();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros_like(&node.value));
            } else if !matches!(node.op, Op::Leaf) && idx != root.0 {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |target: usize, f: &dyn Fn(usize) -> T| {
            if !self.nodes[target].tracked {
                return;
            }
            let shape_src = &self.nodes[target].value;
            let slot = grads[target].get_or_insert_with(|| Tensor::zeros_like(shape_src));
            for (k, x) in slot.data_mut().iter_mut().enumerate() {
                *x = *x + f(k);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &|k| gd[k]);
                acc(*b, &|k| gd[k]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|k| gd[k]);
                acc(*b, &|k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, &|k| gd[k] * vb[k]);
                acc(*b, &|k| gd[k] * va[k]);
            }
            Op::Scale(a, c) => acc(*a, &|k| gd[k] * *c),
            Op::AddRow(a, b) => {
                acc(*a, &|k| gd[k]);
                let (r, c) = out.matrix_dims();
                let mut col = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        col[j] = col[j] + gd[i * c + j];
                    }
                }
                acc(*b, &|k| col[k]);
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                if self.nodes[*a].tracked {
                    let ga = matmul_raw(g, &tb.transpose());
                    acc(*a, &|k| ga.data()[k]);
                }
                if self.nodes[*b].tracked {
                    let gb = matmul_raw(&ta.transpose(), g);
                    acc(*b, &|k| gb.data()[k]);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, &|k| gt.data()[k]);
            }
            Op::Relu(a) => {
                let va = self.nodes[*a].value.data();
                acc(*a, &|k| if va[k] > T::zero() { gd[k] } else { T::zero() });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &|k| gd[k] * y[k]);
            }
            Op::Log(a) => {
                let va = self.nodes[*a].value.data();
                acc(*a, &|k| gd[k] / va[k]);
            }
            Op::NormalizeRows { input, norms, eps } => {
                let (r, c) = out.matrix_dims();
                let y = out.data();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let norm = norms[i];
                    let range = i * c..(i + 1) * c;
                    if *eps > T::zero() && norm <= *eps {
                        for k in range {
                            ga[k] = gd[k] / *eps;
                        }
                    } else {
                        let proj: T = range.clone().map(|k| y[k] * gd[k]).sum();
                        for k in range {
                            ga[k] = (gd[k] - y[k] * proj) / norm;
                        }
                    }
                }
                acc(*input, &|k| ga[k]);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.matrix_dims();
                let y = out.data();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let range = i * c..(i + 1) * c;
                    let s: T = range.clone().map(|k| gd[k] * y[k]).sum();
                    for k in range {
                        ga[k] = y[k] * (gd[k] - s);
                    }
                }
                acc(*a, &|k| ga[k]);
            }
            Op::LogSoftmaxRows { input, probs } => {
                let (r, c) = out.matrix_dims();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let range = i * c..(i + 1) * c;
                    let s: T = range.clone().map(|k| gd[k]).sum();
                    for k in range {
                        ga[k] = gd[k] - probs[k] * s;
                    }
                }
                acc(*input, &|k| ga[k]);
            }
            Op::LogSumExpRows { input, probs } => {
                let (_, c) = dims_of(self.nodes[*input].value.shape());
                acc(*input, &|k| gd[k / c] * probs[k]);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let s = gd[0];
                acc(*a, &|k| s * vb[k]);
                acc(*b, &|k| s * va[k]);
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, &|_| s);
            }
            Op::Mean(a) => {
                let n = T::lit(self.nodes[*a].value.len() as f64);
                let s = gd[0] / n;
                acc(*a, &|_| s);
            }
            Op::Gather { input, index } => {
                let (_, c) = self.nodes[*input].value.matrix_dims();
                let mut ga = vec![T::zero(); self.nodes[*input].value.len()];
                for (pos, &(i, j)) in index.iter().enumerate() {
                    ga[i * c + j] = ga[i * c + j] + gd[pos];
                }
                acc(*input, &|k| ga[k]);
            }
            Op::Nll { input, targets } => {
                let (r, c) = self.nodes[*input].value.matrix_dims();
                let scale = gd[0] / T::lit(r as f64);
                let mut ga = vec![T::zero(); r * c];
                for (i, &y) in targets.iter().enumerate() {
                    ga[i * c + y] = -scale;
                }
                acc(*input, &|k| ga[k]);
            }
        }
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = a.matrix_dims();
    let (_, m) = b.matrix_dims();
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == T::zero() {
                continue;
            }
            for (o, &y) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o = *o + x * y;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant(vecf(&[-1.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(vecf(&[3.0, 4.0])).unwrap();
        let y = t.l2_normalize_rows(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let mut t = Tape::new();
        let x = t.constant(vecf(&[0.0, 0.0])).unwrap();
        assert!(matches!(t.l2_normalize_rows(x), Err(Error::ZeroNorm { row: 0 })));
        let y = t.l2_normalize_rows_eps(x, 1e-12).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let x = t.constant(vecf(&[0.0, 0.0])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vecf(&[3.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_softmax_gradient_is_p_minus_y() {
        let mut t = Tape::new();
        let x = t.leaf(vecf(&[0.0, 0.0])).unwrap();
        let p = t.softmax_rows(x).unwrap();
        let lp = t.log(p).unwrap();
        let first = t.gather(lp, &[(0, 0)]).unwrap();
        let root = t.sum(first).unwrap();
        let g = t.backward(root).unwrap();
        let d = g.get(x).unwrap().data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(vecf(&[1000.0])).unwrap();
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vecf(&[1.0, 2.0])).unwrap();
        let b = t.constant(vecf(&[1.0, 2.0, 3.0])).unwrap();
        match t.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(vecf(&[1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(a), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vecf(&[1.0, 2.0])).unwrap();
        let b = t.leaf(vecf(&[5.0])).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::vector(vec![1.0f32, 2.0]).unwrap()).unwrap();
        let e = t.exp(x).unwrap();
        let s = t.sum(e).unwrap();
        let g = t.backward(s).unwrap();
        assert!((g.get(x).unwrap().data()[1] - 2.0f32.exp()).abs() < 1e-5);
    }
}
