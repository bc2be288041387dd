//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in evaluation order, so the node list
//! is already a topological order and the backward pass is a single reverse
//! sweep. The op set is the small one the training losses need; losses with
//! bespoke structure (contrastive, graph penalty) enter through
//! [`Tape::custom_scalar`] with their own analytic local gradient.

use super::matrix::Matrix;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    SumSquares(Var),
    /// Scalar node whose derivative with respect to `input` is `local`.
    CustomScalar {
        input: Var,
        local: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar node with respect to the tape's leaves.
pub struct TapeGrads {
    grads: Vec<Option<Matrix>>,
}

impl TapeGrads {
    /// Gradient for `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var, like: &Tape) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = like.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var, like: &Tape) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = like.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Softmax(a) | Op::SumSquares(a) => {
                self.requires_grad(*a)
            }
            Op::CustomScalar { input, .. } => self.requires_grad(*input),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a` plus the 1×m row `bias` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(Error::Shape(format!(
                "bias must be a row, got {:?}",
                b.shape()
            )));
        }
        let value = self.value(a).add_row(b.data())?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        value.add_scaled_assign(self.value(b), -1.0);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::Softmax(a))
    }

    /// Scalar `Σ aᵢⱼ²`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(s), Op::SumSquares(a))
    }

    /// Adds an externally differentiated scalar function of `input`.
    pub fn custom_scalar(&mut self, input: Var, value: f64, local: Matrix) -> Result<Var> {
        if local.shape() != self.value(input).shape() {
            return Err(Error::Shape(format!(
                "custom gradient {:?} for input {:?}",
                local.shape(),
                self.value(input).shape()
            )));
        }
        Ok(self.push(Matrix::scalar(value), Op::CustomScalar { input, local }))
    }

    /// Backpropagates from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<TapeGrads> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                out.shape()
            )));
        }
        if !out.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::AddRow(a, bias) => {
                    let mut db = vec![0.0; g.cols()];
                    for row in g.row_iter() {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Matrix::from_raw(1, g.cols(), db));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = g;
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let inner: f64 = d.row(r).iter().zip(pr).map(|(gv, pv)| gv * pv).sum();
                        for (dv, &pv) in d.row_mut(r).iter_mut().zip(pr) {
                            *dv = pv * (*dv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumSquares(a) => {
                    let up = g.data()[0];
                    accumulate(&mut grads, *a, self.value(*a).map(|v| 2.0 * up * v));
                }
                Op::CustomScalar { input, local } => {
                    let up = g.data()[0];
                    accumulate(&mut grads, *input, local.map(|v| up * v));
                }
            }
        }
        Ok(TapeGrads { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        // f = Σ (x·w + b)² with x = [1, 2], w = [3; 4], b = [1] → y = 12.
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(1, 2, vec![1.0, 2.0]).unwrap());
        let w = t.leaf(Matrix::new(2, 1, vec![3.0, 4.0]).unwrap());
        let b = t.leaf(Matrix::scalar(1.0));
        let xw = t.matmul(x, w).unwrap();
        let y = t.add_row(xw, b).unwrap();
        let f = t.sum_squares(y);
        assert_eq!(t.scalar(f), 144.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(w, &t).data(), &[24.0, 48.0]);
        assert_eq!(g.get(b, &t).data(), &[24.0]);
        assert_eq!(g.get(x, &t).data(), &[72.0, 96.0]);
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(2.0));
        let unused = t.leaf(Matrix::filled(2, 2, 1.0));
        let f = t.sum_squares(a);
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(unused, &t), Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(2, 2, 1.0));
        assert!(t.backward(a).is_err());
        let big = t.leaf(Matrix::scalar(1e200));
        let s = t.sum_squares(big);
        assert!(matches!(t.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_gradient_matches_difference_quotient() {
        let logits = vec![0.3, -1.2, 2.0];
        let weights = [1.0, -2.0, 0.5];
        let eval = |l: &[f64]| {
            let mut p = l.to_vec();
            super::super::matrix::softmax_in_place(&mut p);
            p.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(1, 3, logits.clone()).unwrap());
        let p = t.softmax(x);
        let local = Matrix::new(1, 3, weights.to_vec()).unwrap();
        let value = eval(&logits);
        let f = t.custom_scalar(p, value, local).unwrap();
        let g = t.backward(f).unwrap().get(x, &t);
        for k in 0..3 {
            let h = 1e-6;
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8);
        }
    }
}
