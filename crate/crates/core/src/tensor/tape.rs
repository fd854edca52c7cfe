//! Reverse-mode differentiation over batched 2-D arrays.
//!
//! A [`Tape`] records every forward operation as a node holding its value.
//! [`Tape::backward`] walks the nodes in reverse recording order and returns
//! the adjoint of every node; [`Gradients::accumulate_into`] adds the
//! adjoints of parameter leaves into a [`ParamStore`]. Gradient slots are
//! never cleared implicitly: two backward passes without
//! [`ParamStore::zero_grad`] in between sum their gradients.

use super::array::{kernels, Array};
use super::params::ParamStore;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(String),
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MulCol { x: Var, col: Var },
    Sum(Var),
    RowSum(Var),
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Array,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err(op, format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives no gradient in the parameter store.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Const, value)
    }

    /// Leaf bound to `store[name]`; its adjoint is written back by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value))
    }

    /// `x W^T (+ b)` with `x: B x n`, `W: m x n`, `b: m`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, n, m) = (xv.rows(), xv.cols(), wv.rows());
        if wv.cols() != n {
            return Err(shape_err("affine", format!("x is {rows}x{n}, W is {m}x{}", wv.cols())));
        }
        let mut out = kernels::matmul_t(xv.data(), rows, n, wv.data(), m);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err("affine", format!("W is {m}x{n}, b has {} values", bv.len())));
            }
            kernels::add_row(&mut out, bv.data());
        }
        Ok(self.push(Op::Affine { x, w, b }, Array::matrix(rows, m, out)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Array::matrix(av.rows(), av.cols(), data);
        Ok(self.push(mk(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let value = Array::matrix(v.rows(), v.cols(), v.data().iter().map(|&x| f(x)).collect());
        self.push(op, value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), kernels::relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of a {rows}x{cols} array", start + len)));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, Array::matrix(rows, len, data)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.value(*p).rows()).ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", format!("row counts {} and {rows}", v.rows())));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Array::matrix(rows, total, data)))
    }

    /// Scales row `r` of `x` by `col[r]` (`col: B x 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(shape_err("mul_col", format!("x is {}x{}, col is {}x{}", xv.rows(), xv.cols(), cv.rows(), cv.cols())));
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for (r, chunk) in data.chunks_mut(cols).enumerate() {
            let k = cv.data()[r];
            for v in chunk {
                *v *= k;
            }
        }
        Ok(self.push(Op::MulCol { x, col }, Array::matrix(xv.rows(), cols, data)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Array::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `B x d -> B x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<f64> = v.data().chunks(v.cols()).map(|c| c.iter().sum()).collect();
        let rows = v.rows();
        self.push(Op::RowSum(x), Array::matrix(rows, 1, data))
    }

    /// Row-wise softmax over entries whose mask bit is set (row-major `B x S`
    /// mask). Every row needs at least one set bit.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if mask.len() != v.len() {
            return Err(shape_err("masked_softmax", format!("mask has {} bits for {} values", mask.len(), v.len())));
        }
        if mask.chunks(cols).any(|m| !m.iter().any(|&b| b)) {
            return Err(Error::InvalidArgument("masked_softmax: a row has no unmasked entry".into()));
        }
        let mut out = vec![0.0; v.len()];
        for ((src, m), dst) in v.data().chunks(cols).zip(mask.chunks(cols)).zip(out.chunks_mut(cols)) {
            kernels::masked_softmax(src, m, dst);
        }
        let rows = v.rows();
        Ok(self.push(Op::MaskedSoftmax { x, mask }, Array::matrix(rows, cols, out)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.masked_softmax(x, vec![true; n])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, cols) = (v.rows(), v.cols());
        if labels.len() != rows {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {cols} classes")));
        }
        let mut total = 0.0;
        for (row, &y) in v.data().chunks(cols).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Array::scalar(total / rows as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }, value))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl Fn(usize) -> f64) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += f(k);
            }
        }
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, n, m) = (xv.rows(), xv.cols(), wv.rows());
                // dx = g W
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    for k in 0..m {
                        let gk = g[r * m + k];
                        if gk == 0.0 {
                            continue;
                        }
                        let wk = &wv.data()[k * n..(k + 1) * n];
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxr[j] += gk * wk[j];
                        }
                    }
                }
                // dW = g^T x
                let mut dw = vec![0.0; m * n];
                for r in 0..rows {
                    let xr = &xv.data()[r * n..(r + 1) * n];
                    for k in 0..m {
                        let gk = g[r * m + k];
                        if gk == 0.0 {
                            continue;
                        }
                        let dwk = &mut dw[k * n..(k + 1) * n];
                        for j in 0..n {
                            dwk[j] += gk * xr[j];
                        }
                    }
                }
                acc(grads, *x, rows * n, |k| dx[k]);
                acc(grads, *w, m * n, |k| dw[k]);
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        for k in 0..m {
                            db[k] += g[r * m + k];
                        }
                    }
                    acc(grads, *b, m, |k| db[k]);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.len(), |k| g[k]);
                acc(grads, *b, g.len(), |k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.len(), |k| g[k]);
                acc(grads, *b, g.len(), |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, g.len(), |k| g[k] * bv[k]);
                acc(grads, *b, g.len(), |k| g[k] * av[k]);
            }
            Op::Scale(a, k0) => acc(grads, *a, g.len(), |k| g[k] * k0),
            Op::AddScalar(a) => acc(grads, *a, g.len(), |k| g[k]),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(grads, *a, g.len(), |k| if av[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Tanh(a) => acc(grads, *a, g.len(), |k| g[k] * (1.0 - out[k] * out[k])),
            Op::Sigmoid(a) => acc(grads, *a, g.len(), |k| g[k] * out[k] * (1.0 - out[k])),
            Op::Exp(a) => acc(grads, *a, g.len(), |k| g[k] * out[k]),
            Op::Square(a) => {
                let av = self.value(*a).data();
                acc(grads, *a, g.len(), |k| 2.0 * av[k] * g[k]);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                acc(grads, *a, g.len(), |k| if av[k] < *lo || av[k] > *hi { 0.0 } else { g[k] });
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *x, rows * cols, |k| dx[k]);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.rows(), node.value.cols());
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    acc(grads, *p, rows * c, |k| dp[k]);
                    offset += c;
                }
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let cols = xv.cols();
                acc(grads, *x, g.len(), |k| g[k] * cv.data()[k / cols]);
                let dc: Vec<f64> = (0..xv.rows())
                    .map(|r| (0..cols).map(|j| g[r * cols + j] * xv.data()[r * cols + j]).sum())
                    .collect();
                acc(grads, *col, dc.len(), |k| dc[k]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, n, |_| g[0]);
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).cols();
                let n = self.value(*x).len();
                acc(grads, *x, n, |k| g[k / cols]);
            }
            Op::MaskedSoftmax { x, mask } => {
                let cols = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..node.value.rows() {
                    let s = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        if mask[r * cols + j] {
                            dx[r * cols + j] = s[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(grads, *x, dx.len(), |k| dx[k]);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (rows, cols) = (lv.rows(), lv.cols());
                let mask = vec![true; cols];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    kernels::masked_softmax(lv.row(r), &mask, &mut dx[r * cols..(r + 1) * cols]);
                    dx[r * cols + labels[r]] -= 1.0;
                }
                let scale = g[0] / rows as f64;
                acc(grads, *logits, dx.len(), |k| dx[k] * scale);
            }
        }
    }
}

/// Node adjoints from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the adjoints of every parameter leaf into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Array::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_param_grad() {
        let mut store = ParamStore::new();
        store.insert("p", Array::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, "p").unwrap();
        let zero = t.scale(p, 0.0);
        let c = t.constant(Array::scalar(5.0));
        let s = t.sum(zero);
        let loss = t.add(s, c).unwrap();
        t.backward(loss).unwrap().accumulate_into(&t, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut store = ParamStore::new();
        store.insert("p", Array::scalar(2.0)).unwrap();
        let mut t = Tape::new();
        let p = t.param(&store, "p").unwrap();
        let loss = t.square(p);
        for _ in 0..2 {
            t.backward(loss).unwrap().accumulate_into(&t, &mut store).unwrap();
        }
        assert_eq!(store.grad("p").unwrap().item(), 8.0);
        store.zero_grad();
        assert_eq!(store.grad("p").unwrap().item(), 0.0);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut t = Tape::new();
        let x = t.constant(Array::matrix(2, 2, vec![0.0; 4]));
        assert!(t.masked_softmax(x, vec![true, false, false, false]).is_err());
    }
}
