//! Diagonal selective state space machinery.
//!
//! Every channel `d` of a `T × D` input sequence owns an independent
//! `N`-dimensional state. The continuous state matrix is diagonal and
//! real, `A[d, n] = −exp(a_log[d, n])`, initialized to `−(n + 1)`. The
//! per-step parameters `B_t`, `C_t` (`T × N`, shared across channels) and
//! `Δ_t` (`T × D`) are supplied by the caller, which is what makes the scan
//! selective.
//!
//! Discretization is zero-order hold in closed form:
//! `Ā = exp(ΔA)`, `B̄ = (exp(ΔA) − 1)/A · B`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Below this `|Δ·A|` the ZOH input factor switches to its series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// `a_log` for a `channels × state_size` diagonal state matrix with
/// `A[d, n] = −(n + 1)`.
pub fn init_a_log(channels: usize, state_size: usize) -> Matrix {
    assert!(state_size >= 1, "state size must be at least 1");
    Matrix::from_fn(channels, state_size, |_, n| ((n + 1) as f64).ln())
}

pub fn a_from_log(a_log: &Matrix) -> Matrix {
    a_log.map(|l| -l.exp())
}

pub fn log_from_a(a: &Matrix) -> Matrix {
    a.map(|x| (-x).ln())
}

/// Scalar ZOH: returns `(Ā, f)` with `B̄ = f · B`, `f = (exp(Δa) − 1)/a`.
pub fn zoh_scalar(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let a_bar = z.exp();
    let f = if z.abs() < ZOH_SERIES_THRESHOLD { delta * (1.0 + 0.5 * z) } else { z.exp_m1() / a };
    (a_bar, f)
}

/// Partial derivatives of the ZOH factor `f(a, Δ)`: `(∂f/∂a, ∂f/∂Δ)`.
fn zoh_factor_grads(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let df_ddelta = z.exp();
    let df_da = if z.abs() < 1e-3 {
        delta * delta * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (a * a)
    };
    (df_da, df_ddelta)
}

/// Discretized parameters for a whole sequence, indexed `[t][d][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmDiscrete {
    pub steps: usize,
    pub channels: usize,
    pub state_size: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl SsmDiscrete {
    #[inline]
    fn idx(&self, t: usize, d: usize, n: usize) -> usize {
        (t * self.channels + d) * self.state_size + n
    }

    pub fn a_bar_at(&self, t: usize, d: usize, n: usize) -> f64 {
        self.a_bar[self.idx(t, d, n)]
    }

    pub fn b_bar_at(&self, t: usize, d: usize, n: usize) -> f64 {
        self.b_bar[self.idx(t, d, n)]
    }
}

/// ZOH-discretizes `A` (`D × N`, negative) against per-step `B` (`T × N`)
/// and `Δ` (`T × D`, positive).
pub fn discretize_zoh(a: &Matrix, b: &Matrix, delta: &Matrix) -> Result<SsmDiscrete> {
    let (channels, state_size) = a.shape();
    let steps = delta.rows();
    if delta.cols() != channels || b.shape() != (steps, state_size) {
        return Err(Error::Shape(format!(
            "A is {:?}, B is {:?}, Δ is {:?}; expected B = (T, N) and Δ = (T, D)",
            a.shape(),
            b.shape(),
            delta.shape()
        )));
    }
    if let Some(bad) = delta.as_slice().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Domain(format!("step size must be positive, got {bad}")));
    }
    let len = steps * channels * state_size;
    let mut a_bar = Vec::with_capacity(len);
    let mut b_bar = Vec::with_capacity(len);
    for t in 0..steps {
        for d in 0..channels {
            let dt = delta[(t, d)];
            for n in 0..state_size {
                let (ab, f) = zoh_scalar(a[(d, n)], dt);
                a_bar.push(ab);
                b_bar.push(f * b[(t, n)]);
            }
        }
    }
    Ok(SsmDiscrete { steps, channels, state_size, a_bar, b_bar })
}

/// `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t`, from `h_0 = 0`.
pub fn selective_scan(disc: &SsmDiscrete, c: &Matrix, x: &Matrix) -> Result<Matrix> {
    Ok(scan_states(disc, c, x, false)?.0)
}

fn scan_states(disc: &SsmDiscrete, c: &Matrix, x: &Matrix, keep: bool) -> Result<(Matrix, Vec<f64>)> {
    let (steps, channels, state_size) = (disc.steps, disc.channels, disc.state_size);
    if steps == 0 {
        return Err(Error::Shape("scan needs at least one step".into()));
    }
    if x.shape() != (steps, channels) || c.shape() != (steps, state_size) {
        return Err(Error::Shape(format!(
            "scan over {steps} steps × {channels} channels × {state_size} states got x {:?}, C {:?}",
            x.shape(),
            c.shape()
        )));
    }
    let mut h = vec![0.0; channels * state_size];
    let mut history = if keep { Vec::with_capacity(steps * h.len()) } else { Vec::new() };
    let mut y = Matrix::zeros(steps, channels);
    for t in 0..steps {
        let c_t = c.row(t);
        for d in 0..channels {
            let xt = x[(t, d)];
            let mut acc = 0.0;
            for n in 0..state_size {
                let i = disc.idx(t, d, n);
                let s = &mut h[d * state_size + n];
                *s = disc.a_bar[i] * *s + disc.b_bar[i] * xt;
                acc += c_t[n] * *s;
            }
            y[(t, d)] = acc;
        }
        if keep {
            history.extend_from_slice(&h);
        }
    }
    Ok((y, history))
}

/// Everything the backward pass needs from a forward scan.
#[derive(Debug, Clone)]
pub struct ScanCache {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    delta: Matrix,
    x: Matrix,
    disc: SsmDiscrete,
    states: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub a_log: Matrix,
    pub delta: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub x: Matrix,
}

/// Discretize-and-scan in one step, keeping the hidden states for
/// [`scan_backward`].
pub fn scan_forward(a_log: &Matrix, delta: &Matrix, b: &Matrix, c: &Matrix, x: &Matrix) -> Result<(Matrix, ScanCache)> {
    let a = a_from_log(a_log);
    let disc = discretize_zoh(&a, b, delta)?;
    let (y, states) = scan_states(&disc, c, x, true)?;
    Ok((y, ScanCache { a, b: b.clone(), c: c.clone(), delta: delta.clone(), x: x.clone(), disc, states }))
}

/// Reverse-mode gradients of `Σ dy ⊙ y` through discretization and scan.
pub fn scan_backward(cache: &ScanCache, dy: &Matrix) -> ScanGrads {
    let disc = &cache.disc;
    let (steps, channels, state_size) = (disc.steps, disc.channels, disc.state_size);
    assert_eq!(dy.shape(), (steps, channels), "upstream gradient shape");
    let mut g_a = Matrix::zeros(channels, state_size);
    let mut g_delta = Matrix::zeros(steps, channels);
    let mut g_b = Matrix::zeros(steps, state_size);
    let mut g_c = Matrix::zeros(steps, state_size);
    let mut g_x = Matrix::zeros(steps, channels);
    // Gradient flowing into h_t from later steps.
    let mut carry = vec![0.0; channels * state_size];
    let width = channels * state_size;
    for t in (0..steps).rev() {
        let h_t = &cache.states[t * width..(t + 1) * width];
        let h_prev = if t > 0 { Some(&cache.states[(t - 1) * width..t * width]) } else { None };
        for d in 0..channels {
            let dy_td = dy[(t, d)];
            let xt = cache.x[(t, d)];
            let dt = cache.delta[(t, d)];
            for n in 0..state_size {
                let k = d * state_size + n;
                let i = disc.idx(t, d, n);
                g_c[(t, n)] += dy_td * h_t[k];
                let gh = carry[k] + dy_td * cache.c[(t, n)];
                let a = cache.a[(d, n)];
                let a_bar = disc.a_bar[i];
                let hp = h_prev.map_or(0.0, |h| h[k]);
                let g_abar = gh * hp;
                let g_bbar = gh * xt;
                g_x[(t, d)] += gh * disc.b_bar[i];

                let (_, f) = zoh_scalar(a, dt);
                let (df_da, df_ddelta) = zoh_factor_grads(a, dt);
                let bn = cache.b[(t, n)];
                g_b[(t, n)] += g_bbar * f;
                g_delta[(t, d)] += g_abar * a * a_bar + g_bbar * bn * df_ddelta;
                let g_a_cont = g_abar * dt * a_bar + g_bbar * bn * df_da;
                // a = −exp(a_log), so ∂a/∂a_log = a.
                g_a[(d, n)] += g_a_cont * a;

                carry[k] = gh * a_bar;
            }
        }
    }
    ScanGrads { a_log: g_a, delta: g_delta, b: g_b, c: g_c, x: g_x }
}
