//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the ids of its inputs. [`Tape::backward`] walks the nodes in
//! reverse insertion order and accumulates exact gradients of a `1 × 1` loss
//! into every node.
//!
//! Parameters enter the tape as borrowed leaves, so binding a model to a tape
//! costs nothing and the tape's lifetime is tied to the parameters it reads.
//!
//! ```
//! use gcsd_core::autograd::Tape;
//! use gcsd_core::tensor::Tensor;
//!
//! let w = Tensor::from_vec(1, 2, vec![2.0, -1.0]);
//! let mut tape = Tape::new();
//! let wv = tape.leaf(&w);
//! let sq = tape.mul(wv, wv);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(wv).data(), &[4.0, -2.0]);
//! ```

use std::borrow::Cow;

use thiserror::Error;

use crate::tensor::{dot, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmaxPick(Var, Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on get an all-zero tensor of the right shape.
    pub fn get(&self, v: Var) -> Cow<'_, Tensor> {
        match &self.grads[v.0] {
            Some(g) => Cow::Borrowed(g),
            None => {
                let (r, c) = self.shapes[v.0];
                Cow::Owned(Tensor::zeros(r, c))
            }
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Tensor::zeros(r, c)
        })
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax with an optional causal mask (entries with column index
/// greater than the row index are exactly zero).
pub fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let limit = if causal { (r + 1).min(x.cols()) } else { x.cols() };
        let row = &x.row(r)[..limit];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut total = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            o[c] = e;
            total += e;
        }
        for v in &mut o[..limit] {
            *v /= total;
        }
    }
    out
}

/// `log softmax(row)` for one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; gradients flow into it but the tensor is not copied.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf, used for constants and detached inputs.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, as a `1 × cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    /// Selects rows of `a` by index (embedding lookup when `a` is a table).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(out, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        let mut normed = Tensor::zeros(xv.rows(), n);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut rstds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            let nr = normed.row_mut(r);
            for (o, v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            let or = out.row_mut(r);
            for c in 0..n {
                or[c] = nr[c] * gv.data()[c] + bv.data()[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd: rstds,
            },
        )
    }

    /// Row-wise causal softmax: row `r` normalizes over columns `0..=r`;
    /// later columns are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), true);
        self.push(v, Op::Softmax(a))
    }

    /// For each row `r`, `log softmax(a[r])[targets[r]]`, as an `n × 1` column.
    pub fn log_softmax_pick(&mut self, a: Var, targets: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), targets.len());
        let data = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| log_softmax(av.row(r))[t])
            .collect();
        let out = Tensor::from_vec(targets.len(), 1, data);
        self.push(out, Op::LogSoftmaxPick(a, targets.to_vec()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutogradError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(AutogradError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(self.value(*b));
                let db = self.value(*a).matmul_at(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulBt(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_at(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y);
                let db = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, dr);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x));
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gy, y| gy * (1.0 - y * y));
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(out, |gy, y| gy * y);
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row).copy_from_slice(g.data());
                }
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.value(*a).shape();
                let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                for (i, &src) in rows.iter().enumerate() {
                    for (o, v) in slot.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let ar = self.value(*a).rows();
                let cols = g.cols();
                let da = Tensor::from_vec(ar, cols, g.data()[..ar * cols].to_vec());
                let db = Tensor::from_vec(g.rows() - ar, cols, g.data()[ar * cols..].to_vec());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                let len = g.cols();
                for row in 0..r {
                    for (o, v) in slot.row_mut(row)[*start..*start + len]
                        .iter_mut()
                        .zip(g.row(row))
                    {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.row_mut(row)
                            .copy_from_slice(&g.row(row)[offset..offset + c]);
                    }
                    accumulate(grads, *p, d);
                    offset += c;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (rows, n) = g.shape();
                let mut dg = Tensor::zeros(1, n);
                let mut db = Tensor::zeros(1, n);
                let mut dx = Tensor::zeros(rows, n);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = normed.row(r);
                    let mut dxh = vec![0.0; n];
                    for c in 0..n {
                        dg.data_mut()[c] += gr[c] * xh[c];
                        db.data_mut()[c] += gr[c];
                        dxh[c] = gr[c] * gv.data()[c];
                    }
                    let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dxh_xh = dot(&dxh, xh) / n as f64;
                    let out_row = dx.row_mut(r);
                    for c in 0..n {
                        out_row[c] = rstd[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(y, gr);
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gr[c] - inner);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmaxPick(a, targets) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = av.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let dr = d.row_mut(r);
                    for (c, v) in row.iter().enumerate() {
                        dr[c] = -gr * (v - max).exp() / total;
                    }
                    dr[t] += gr;
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` at every entry of every input.
    fn check<F>(inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let analytic: Vec<Tensor> = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let loss = f(&mut tape, &vars);
            let grads = tape.backward(loss).unwrap();
            vars.iter().map(|v| grads.get(*v).into_owned()).collect()
        };
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
            let loss = f(&mut tape, &vars);
            tape.value(loss).item()
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[k].data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let w = rand_t(3, 4, 1);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(v).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = rand_t(2, 2, 2);
        let c = Tensor::scalar(3.5);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let k = tape.leaf(&c);
        let g = tape.backward(k).unwrap();
        assert!(g.get(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let w = rand_t(2, 2, 3);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        assert_eq!(
            tape.backward(v).err(),
            Some(AutogradError::NonScalarLoss { rows: 2, cols: 2 })
        );
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        let ins = [rand_t(3, 4, 4), rand_t(4, 2, 5), rand_t(1, 2, 6)];
        check(&ins, |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m2 = t.mul(m, m);
            t.sum(m2)
        });
        let ins = [rand_t(3, 4, 7), rand_t(5, 4, 8)];
        check(&ins, |t, v| {
            let m = t.matmul_bt(v[0], v[1]);
            let e = t.tanh(m);
            t.sum(e)
        });
    }

    #[test]
    fn nonlinearity_gradients() {
        let ins = [rand_t(2, 5, 9)];
        check(&ins, |t, v| {
            let g = t.gelu(v[0]);
            let e = t.exp(g);
            let s = t.scale(e, 0.3);
            let s = t.add_scalar(s, 1.0);
            let p = t.mul(s, v[0]);
            t.sum(p)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let ins = [rand_t(3, 6, 10), rand_t(1, 6, 11), rand_t(1, 6, 12)];
        check(&ins, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let y3 = t.mul(y, y);
            let y3 = t.mul(y3, y);
            t.sum(y3)
        });
    }

    #[test]
    fn softmax_and_pick_gradients() {
        let w = rand_t(4, 4, 13);
        let ins = [rand_t(4, 4, 14)];
        check(&ins, |t, v| {
            let p = t.causal_softmax(v[0]);
            let c = t.constant(w.clone());
            let m = t.mul(p, c);
            t.sum(m)
        });
        let ins = [rand_t(3, 5, 15)];
        check(&ins, |t, v| {
            let lp = t.log_softmax_pick(v[0], &[4, 0, 2]);
            t.sum(lp)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let ins = [rand_t(5, 4, 16), rand_t(1, 4, 17)];
        check(&ins, |t, v| {
            let g = t.gather_rows(v[0], &[3, 1, 3]);
            let c = t.concat_rows(v[1], g);
            let a = t.slice_cols(c, 1, 2);
            let b = t.slice_cols(c, 0, 2);
            let j = t.concat_cols(&[a, b, a]);
            let s = t.sum_rows(j);
            let s2 = t.mul(s, s);
            let m = t.mean(s2);
            let sub = t.sub(m, m);
            t.add(m, sub)
        });
    }

    #[test]
    fn causal_softmax_masks_future_exactly() {
        let x = rand_t(4, 4, 18);
        let y = softmax_rows(&x, true);
        for r in 0..4 {
            let total: f64 = y.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for c in r + 1..4 {
                assert_eq!(y.get(r, c), 0.0);
            }
        }
    }
}
