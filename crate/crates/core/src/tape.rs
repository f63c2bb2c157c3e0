//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and
//! accumulates gradients. Fused operations (layer norm, causal
//! convolution, the selective scan, the contrastive losses) register their
//! own backward closures through [`Tape::custom`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::matrix::Matrix;

type BackwardFn = Box<dyn Fn(&Matrix) -> Vec<Matrix>>;

struct Node {
    value: Rc<Matrix>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = v.value().shape();
            Matrix::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, parents: Vec<usize>, backward: Option<BackwardFn>, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node { value: Rc::new(value), parents, requires_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A trainable input.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// A value that never needs a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Registers an operation with a hand-written backward. `backward`
    /// receives the gradient of the output and returns one gradient per
    /// parent, in order.
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: Matrix, backward: impl Fn(&Matrix) -> Vec<Matrix> + 'static) -> Var<'t> {
        self.push(value, parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)), false)
    }

    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.id] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Matrix> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b);
        self.tape.custom(&[self, other], out, move |g| vec![g.matmul_t(&b), a.t_matmul(g)])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |x, y| x + y);
        self.tape.custom(&[self, other], out, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |x, y| x - y);
        self.tape.custom(&[self, other], out, |g| vec![g.clone(), g.scale(-1.0)])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.custom(&[self, other], out, move |g| vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.custom(&[self], out, move |g| vec![g.scale(s)])
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let out = self.value().add_row_broadcast(&bias.value());
        self.tape.custom(&[self, bias], out, |g| vec![g.clone(), g.sum_rows()])
    }

    /// `x · W + b`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let y = self.matmul(weight);
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.custom(&[self], out, move |g| vec![g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })])
    }

    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(silu);
        self.tape.custom(&[self], out, move |g| {
            vec![g.zip_map(&x, |gv, xv| {
                let s = sigmoid(xv);
                gv * s * (1.0 + xv * (1.0 - s))
            })]
        })
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(softplus);
        self.tape.custom(&[self], out, move |g| vec![g.zip_map(&x, |gv, xv| gv * sigmoid(xv))])
    }

    /// Sum of all entries as a `1 × 1`.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.shape();
        let out = Matrix::filled(1, 1, x.sum());
        self.tape.custom(&[self], out, move |g| vec![Matrix::filled(r, c, g[(0, 0)])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(|v| v.as_ref()).collect();
        let out = Matrix::hcat(&refs);
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        tape.custom(parts, out, move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice_cols(start, start + w);
                    start += w;
                    part
                })
                .collect()
        })
    }

    /// Row-wise mean over contiguous segments: output row `k` is the mean of
    /// rows `offsets[k]..offsets[k + 1]`.
    pub fn segment_mean(self, offsets: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = segment_mean(&x, offsets);
        let offsets = offsets.to_vec();
        let (rows, cols) = x.shape();
        self.tape.custom(&[self], out, move |g| {
            let mut gx = Matrix::zeros(rows, cols);
            for k in 0..offsets.len() - 1 {
                let (s, e) = (offsets[k], offsets[k + 1]);
                let inv = 1.0 / (e - s) as f64;
                for i in s..e {
                    for (o, gv) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = gv * inv;
                    }
                }
            }
            vec![gx]
        })
    }

    /// `S · x` for a constant sparse `S`.
    pub fn sparse_left_mul(self, s: Rc<SparseMatrix>) -> Var<'t> {
        let out = s.matmul(&self.value());
        self.tape.custom(&[self], out, move |g| vec![s.t_matmul(g)])
    }
}

/// Coordinate-format sparse matrix, used for constant graph operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.cols, x.rows(), "sparse matmul shape");
        let mut out = Matrix::zeros(self.rows, x.cols());
        for &(i, j, w) in &self.entries {
            let src = x.row(j).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        out
    }

    pub fn t_matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.rows, x.rows(), "sparse t_matmul shape");
        let mut out = Matrix::zeros(self.cols, x.cols());
        for &(i, j, w) in &self.entries {
            let src = x.row(i).to_vec();
            for (o, v) in out.row_mut(j).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(i, j, w) in &self.entries {
            m[(i, j)] += w;
        }
        m
    }
}

pub fn segment_mean(x: &Matrix, offsets: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(offsets.len() - 1, x.cols());
    for k in 0..offsets.len() - 1 {
        let (s, e) = (offsets[k], offsets[k + 1]);
        assert!(e > s, "empty segment {k}");
        let inv = 1.0 / (e - s) as f64;
        for i in s..e {
            for (o, v) in out.row_mut(k).iter_mut().zip(x.row(i)) {
                *o += v * inv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_grad(build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, x0: Matrix) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = build(&tape, x);
        let g = tape.backward(y).get_or_zeros(x);
        let eps = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_mut_slice()[k] += delta;
                let t = Tape::new();
                let v = t.param(xp);
                build(&t, v).value()[(0, 0)]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((numeric - g.as_slice()[k]).abs() < 1e-6 * numeric.abs().max(1.0), "entry {k}: {} vs {numeric}", g.as_slice()[k]);
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let x0 = Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]]);
        let w = Matrix::from_rows(&[vec![0.2, -0.1], vec![0.5, 0.3], vec![-0.4, 0.9]]);
        check_grad(
            move |t, x| {
                let h = x.matmul(t.constant(w.clone())).silu();
                let s = x.softplus().sum();
                h.mul(h).sum().add(s)
            },
            x0,
        );
    }

    #[test]
    fn segment_mean_and_concat_grads() {
        let x0 = Matrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.3 + j as f64 * 0.7);
        check_grad(
            |_, x| {
                let m = x.segment_mean(&[0, 2, 5]);
                Var::hcat(&[m, m.relu()]).mul(Var::hcat(&[m, m])).sum()
            },
            x0,
        );
    }

    #[test]
    fn sparse_propagation_grad() {
        let s = Rc::new(SparseMatrix { rows: 3, cols: 3, entries: vec![(0, 1, 0.5), (1, 0, 0.5), (2, 2, 1.0), (1, 2, -0.3)] });
        let x0 = Matrix::from_fn(3, 2, |i, j| i as f64 - j as f64 * 0.5);
        check_grad(move |_, x| x.sparse_left_mul(Rc::clone(&s)).softplus().sum(), x0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Matrix::filled(1, 1, 2.0));
        let p = tape.param(Matrix::filled(1, 1, 3.0));
        let grads = tape.backward(c.mul(p));
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }
}
