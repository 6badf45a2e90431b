//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Every node holds a dense `n × m` array; scalars are `1 × 1`. Operations
//! are evaluated eagerly when they are recorded, so the graph doubles as a
//! Wengert list: [`Graph::backward`] walks it once in reverse and
//! accumulates vector-Jacobian products into every node that depends on a
//! trainable leaf. Nodes that do not depend on any trainable leaf are never
//! visited in the backward pass.
//!
//! Fused operations that are cheaper to differentiate by hand (the mixture
//! density and its score, for example) plug in through [`CustomOp`].

use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use super::fastmath;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A hand-differentiated operation.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op only has to supply the backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input. `needs[i]` tells whether the
    /// gradient of input `i` is wanted; return `None` for the others.
    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        output: &Array2<f64>,
        grad: &Array2<f64>,
        needs: &[bool],
    ) -> Vec<Option<Array2<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SumAll(Var),
    SumCols(Var),
    Transpose(Var),
    SelectCols(Var, Vec<usize>),
    MergeCols {
        a: Var,
        a_cols: Vec<usize>,
        b: Var,
        b_cols: Vec<usize>,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    RepeatRows(Var, usize),
    Reshape(Var),
    LogSumExpRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or input of interest).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a + bias` with `bias` a `1 × m` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a row vector");
        let value = self.value(a) + self.value(bias);
        self.binary(a, bias, value, Op::AddBias(a, bias))
    }

    /// `a + s` with `s` a `1 × 1` node broadcast to every entry.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a) + sv;
        self.binary(a, s, value, Op::AddScalar(a, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.unary(a, value, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        match value.as_slice_mut() {
            Some(xs) => fastmath::tanh_inplace(xs),
            None => value.mapv_inplace(fastmath::tanh),
        }
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        match value.as_slice_mut() {
            Some(xs) => fastmath::exp_inplace(xs),
            None => value.mapv_inplace(fastmath::exp),
        }
        self.unary(a, value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Row sums: `n × m → n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, value, Op::SumCols(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let value = self.value(a).select(Axis(1), cols);
        self.unary(a, value, Op::SelectCols(a, cols.to_vec()))
    }

    /// Interleave the columns of `a` and `b` into a matrix of width
    /// `a_cols.len() + b_cols.len()`; column `a_cols[j]` of the result is
    /// column `j` of `a`, likewise for `b`.
    pub fn merge_cols(&mut self, a: Var, a_cols: &[usize], b: Var, b_cols: &[usize]) -> Var {
        let (n, wa) = self.shape(a);
        let (nb, wb) = self.shape(b);
        assert_eq!(n, nb, "merge_cols row mismatch");
        assert_eq!(wa, a_cols.len());
        assert_eq!(wb, b_cols.len());
        let mut value = Array2::zeros((n, wa + wb));
        for (j, &c) in a_cols.iter().enumerate() {
            value.column_mut(c).assign(&self.value(a).column(j));
        }
        for (j, &c) in b_cols.iter().enumerate() {
            value.column_mut(c).assign(&self.value(b).column(j));
        }
        let op = Op::MergeCols {
            a,
            a_cols: a_cols.to_vec(),
            b,
            b_cols: b_cols.to_vec(),
        };
        self.binary(a, b, value, op)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Repeat every row `k` times consecutively: row `i*k + j` is row `i`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        let (n, m) = src.dim();
        let mut value = Array2::zeros((n * k, m));
        for i in 0..n {
            for j in 0..k {
                value.row_mut(i * k + j).assign(&src.row(i));
            }
        }
        self.unary(a, value, Op::RepeatRows(a, k))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), shape.0 * shape.1, "reshape size mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec(shape, flat).expect("reshape");
        self.unary(a, value, Op::Reshape(a))
    }

    /// Stabilized `log Σ_j exp(a_ij)` per row: `n × m → n × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let value = logsumexp_rows(self.value(a));
        self.unary(a, value, Op::LogSumExpRows(a))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Array2<f64>, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom(inputs.to_vec(), op), needs)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to all nodes that
    /// depend on a differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.dim()
            )));
        }
        let l = lv[[0, 0]];
        if !l.is_finite() {
            return Err(Error::numeric(format!("loss is not finite: {l}")));
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                if needs(*b) {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::AddScalar(a, s) => {
                if needs(*s) {
                    accumulate(grads, *s, Array2::from_elem((1, 1), g.sum()));
                }
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if needs(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&node.value)
                    .for_each(|o, &y| *o *= 1.0 - y * y);
                accumulate(grads, *a, out);
            }
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Log(a) => accumulate(grads, *a, g / val(*a)),
            Op::Square(a) => accumulate(grads, *a, g * val(*a) * 2.0),
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                accumulate(grads, *a, Array2::from_elem(val(*a).dim(), gv));
            }
            Op::SumCols(a) => {
                let (n, m) = val(*a).dim();
                let out = Array2::from_shape_fn((n, m), |(i, _)| g[[i, 0]]);
                accumulate(grads, *a, out);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::SelectCols(a, cols) => {
                let mut out = Array2::zeros(val(*a).dim());
                for (j, &c) in cols.iter().enumerate() {
                    let mut col = out.column_mut(c);
                    col += &g.column(j);
                }
                accumulate(grads, *a, out);
            }
            Op::MergeCols {
                a,
                a_cols,
                b,
                b_cols,
            } => {
                if needs(*a) {
                    accumulate(grads, *a, g.select(Axis(1), a_cols));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.select(Axis(1), b_cols));
                }
            }
            Op::SliceRows(a, start) => {
                let mut out = Array2::zeros(val(*a).dim());
                let n = g.nrows();
                out.slice_mut(s![*start..*start + n, ..]).assign(g);
                accumulate(grads, *a, out);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if needs(p) {
                        accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::RepeatRows(a, k) => {
                let (n, m) = val(*a).dim();
                let mut out = Array2::zeros((n, m));
                for i in 0..n {
                    let mut row = out.row_mut(i);
                    for j in 0..*k {
                        row += &g.row(i * k + j);
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let out = Array2::from_shape_vec(val(*a).dim(), flat).expect("reshape grad");
                accumulate(grads, *a, out);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let mut out = x.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let lse = node.value[[i, 0]];
                    let gi = g[[i, 0]];
                    row.mapv_inplace(|v| gi * fastmath::exp(v - lse));
                }
                accumulate(grads, *a, out);
            }
            Op::Custom(inputs, op) => {
                let in_vals: Vec<&Array2<f64>> = inputs.iter().map(|&v| val(v)).collect();
                let need_flags: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let outs = op.backward(&in_vals, &node.value, g, &need_flags);
                for ((&v, out), need) in inputs.iter().zip(outs).zip(need_flags) {
                    if let (Some(out), true) = (out, need) {
                        accumulate(grads, v, out);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Row-wise stabilized log-sum-exp of a plain array.
pub fn logsumexp_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), 1));
    for (i, row) in a.rows().into_iter().enumerate() {
        out[[i, 0]] = logsumexp(row.iter().copied());
    }
    out
}

/// Stabilized `log Σ exp(x)`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.map(|x| fastmath::exp(x - max)).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let theta = g.leaf(array![[1.0, 2.0]]);
        let sq = g.square(theta);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let theta = g.leaf(array![[1.0, 2.0]]);
        let c = g.scalar_constant(3.5);
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        let dtheta = grads.get_or_zeros(theta, (1, 2));
        assert_eq!(dtheta, array![[0.0, 0.0]]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut g = Graph::new();
        let theta = g.leaf(array![[-1.0]]);
        let l = g.ln(theta);
        let loss = g.sum(l);
        let err = g.backward(loss).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("NaN"), "{err}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let theta = g.leaf(array![[1.0, 2.0]]);
        assert!(g.backward(theta).unwrap_err().is_config());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + x) -> df/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0, -1.0]]);
        let xx = g.mul(x, x);
        let y = g.add(xx, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[7.0, -1.0]]);
    }

    #[test]
    fn merge_and_select_are_inverse() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let a = g.select_cols(x, &[0, 2]);
        let b = g.select_cols(x, &[1]);
        let y = g.merge_cols(a, &[0, 2], b, &[1]);
        assert_eq!(g.value(y), g.value(x));
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Array2::from_elem((2, 3), 1.0));
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert_eq!(logsumexp([f64::NEG_INFINITY].into_iter()), f64::NEG_INFINITY);
        let v = logsumexp([1000.0, 1000.0].into_iter());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
