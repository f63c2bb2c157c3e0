//! Differentiable building blocks shared by the encoders and both SSM
//! blocks, plus the named parameter store they draw weights from.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ssm;
use crate::tape::{Gradients, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Flat, ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    /// Places every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    /// Linear weight `fan_in × fan_out` and bias `1 × fan_out`, both
    /// uniform in `±1/√fan_in`.
    pub fn add_linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(format!("{prefix}.w"), Matrix::random_uniform(fan_in, fan_out, bound, rng));
        if bias {
            self.insert(format!("{prefix}.b"), Matrix::random_uniform(1, fan_out, bound, rng));
        }
    }

    pub fn add_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{prefix}.g"), Matrix::filled(1, width, 1.0));
        self.insert(format!("{prefix}.b"), Matrix::zeros(1, width));
    }

    pub fn add_conv<R: Rng + ?Sized>(&mut self, prefix: &str, channels: usize, width: usize, rng: &mut R) {
        let bound = 1.0 / (width as f64).sqrt();
        self.insert(format!("{prefix}.k"), Matrix::random_uniform(channels, width, bound, rng));
        self.insert(format!("{prefix}.b"), Matrix::random_uniform(1, channels, bound, rng));
    }
}

/// Parameters bound to one tape.
pub struct Bound<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn linear(&self, x: Var<'t>, prefix: &str) -> Var<'t> {
        x.linear(self.get(&format!("{prefix}.w")), self.try_get(&format!("{prefix}.b")))
    }

    pub fn layer_norm(&self, x: Var<'t>, prefix: &str) -> Var<'t> {
        layer_norm(x, self.get(&format!("{prefix}.g")), self.get(&format!("{prefix}.b")))
    }

    pub fn conv(&self, x: Var<'t>, prefix: &str) -> Var<'t> {
        causal_conv1d(x, self.get(&format!("{prefix}.k")), self.get(&format!("{prefix}.b")))
    }

    /// Collects gradients back into a store keyed like the parameters.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), grads.get_or_zeros(*v));
        }
        out
    }
}

/// Row-wise layer normalization with learned gain and bias (`1 × cols`).
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let (g, b) = (gain.value(), bias.value());
    let (rows, cols) = xv.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let r = xv.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        rstd[i] = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * rstd[i];
        }
    }
    let out = Matrix::from_fn(rows, cols, |i, j| xhat[(i, j)] * g[(0, j)] + b[(0, j)]);
    x.tape().custom(&[x, gain, bias], out, move |grad| {
        let mut g_gain = Matrix::zeros(1, cols);
        let mut g_x = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let gr = grad.row(i);
            let xh = xhat.row(i);
            let mut dxhat = vec![0.0; cols];
            for j in 0..cols {
                g_gain[(0, j)] += gr[j] * xh[j];
                dxhat[j] = gr[j] * g[(0, j)];
            }
            let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
            for j in 0..cols {
                g_x[(i, j)] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        vec![g_x, g_gain, grad.sum_rows()]
    })
}

/// Depthwise causal 1-D convolution along rows:
/// `y[t, c] = b[c] + Σ_k K[c, k] · x[t − (w − 1) + k, c]`, zero-padded on
/// the left so the output has as many rows as the input.
pub fn causal_conv1d<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let k = kernel.value();
    let (rows, cols) = xv.shape();
    assert_eq!(k.rows(), cols, "one kernel row per channel");
    let width = k.cols();
    let mut out = Matrix::zeros(rows, cols);
    let b = bias.value();
    for t in 0..rows {
        for c in 0..cols {
            let mut acc = b[(0, c)];
            for j in 0..width {
                if let Some(src) = (t + j).checked_sub(width - 1) {
                    acc += k[(c, j)] * xv[(src, c)];
                }
            }
            out[(t, c)] = acc;
        }
    }
    x.tape().custom(&[x, kernel, bias], out, move |g| {
        let mut gx = Matrix::zeros(rows, cols);
        let mut gk = Matrix::zeros(cols, width);
        for t in 0..rows {
            for c in 0..cols {
                let gv = g[(t, c)];
                for j in 0..width {
                    if let Some(src) = (t + j).checked_sub(width - 1) {
                        gk[(c, j)] += gv * xv[(src, c)];
                        gx[(src, c)] += gv * k[(c, j)];
                    }
                }
            }
        }
        vec![gx, gk, g.sum_rows()]
    })
}

/// The selective scan as a tape operation. `b`, `c` are `T × N`, `delta`
/// and `x` are `T × D`, `a_log` is `D × N`.
pub fn selective_scan<'t>(a_log: Var<'t>, delta: Var<'t>, b: Var<'t>, c: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let (y, cache) = ssm::scan_forward(&a_log.value(), &delta.value(), &b.value(), &c.value(), &x.value())?;
    Ok(x.tape().custom(&[a_log, delta, b, c, x], y, move |g| {
        let grads = ssm::scan_backward(&cache, g);
        vec![grads.a_log, grads.delta, grads.b, grads.c, grads.x]
    }))
}

pub fn check_rows(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.0 != b.0 {
        return Err(Error::Shape(format!("{what}: {} rows vs {} rows", a.0, b.0)));
    }
    Ok(())
}
