//! View-Fused Mamba.
//!
//! Each view's node sequence is normalized, projected, convolved and gated
//! by SiLU. The selective parameters `(B, C, Δ)` of view `o` are computed
//! from view `a`'s processed sequence and vice versa, so each scan is steered
//! by the other view. The scan runs over the batch node order: graphs are
//! contiguous and nodes keep their dataset order inside each graph.
//!
//! The helpers in this module (`preprocess`, `select`, `gated_output`) are
//! shared with the spectrum-guided block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Bound, ParamStore};
use crate::matrix::Matrix;
use crate::ssm;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub state_size: usize,
    pub conv_width: usize,
    pub delta_rank: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { state_size: 8, conv_width: 4, delta_rank: 4 }
    }
}

/// `ln`, `in_proj` and `conv` under `prefix`.
pub fn init_branch<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, cfg: &BlockConfig, rng: &mut R) {
    store.add_layer_norm(&format!("{prefix}.ln"), width);
    store.add_linear(&format!("{prefix}.in_proj"), width, width, true, rng);
    store.add_conv(&format!("{prefix}.conv"), width, cfg.conv_width, rng);
}

/// `x_b`, `x_c`, the low-rank `Δ` projection and `a_log` under `prefix`.
pub fn init_selection<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, cfg: &BlockConfig, rng: &mut R) {
    store.add_linear(&format!("{prefix}.x_b"), width, cfg.state_size, false, rng);
    store.add_linear(&format!("{prefix}.x_c"), width, cfg.state_size, false, rng);
    store.add_linear(&format!("{prefix}.dt_down"), width, cfg.delta_rank, false, rng);
    let bound = 1.0 / (cfg.delta_rank as f64).sqrt();
    store.insert(format!("{prefix}.dt_up.w"), Matrix::random_uniform(cfg.delta_rank, width, bound, rng));
    // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their
    // inverse softplus.
    let bias = Matrix::from_fn(1, width, |_, _| {
        let dt: f64 = rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp();
        dt + (-(-dt).exp_m1()).ln()
    });
    store.insert(format!("{prefix}.dt_up.b"), bias);
    store.insert(format!("{prefix}.a_log"), ssm::init_a_log(width, cfg.state_size));
}

/// `gate`, `out`, `ln1` and `ln2` under `prefix`.
pub fn init_output<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) {
    store.add_linear(&format!("{prefix}.gate"), width, width, true, rng);
    store.add_linear(&format!("{prefix}.out"), width, width, true, rng);
    store.add_layer_norm(&format!("{prefix}.ln1"), width);
    store.add_layer_norm(&format!("{prefix}.ln2"), width);
}

pub fn init_vfm<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, cfg: &BlockConfig, rng: &mut R) {
    for view in ["vfm.o", "vfm.a"] {
        init_branch(store, view, width, cfg, rng);
        init_selection(store, view, width, cfg, rng);
        init_output(store, view, width, rng);
    }
}

/// Returns `(LayerNorm(H), SiLU(Conv1D(Linear(LayerNorm(H)))))`; the first
/// is reused by the gate branch.
pub fn preprocess_var<'t>(h: Var<'t>, params: &Bound<'t>, prefix: &str) -> (Var<'t>, Var<'t>) {
    let normed = params.layer_norm(h, &format!("{prefix}.ln"));
    let projected = params.linear(normed, &format!("{prefix}.in_proj"));
    (normed, params.conv(projected, &format!("{prefix}.conv")).silu())
}

/// `B = src·W_B`, `C = src·W_C`, `Δ = softplus(src·W_down·W_up + b)`.
pub fn select_var<'t>(src: Var<'t>, params: &Bound<'t>, prefix: &str) -> (Var<'t>, Var<'t>, Var<'t>) {
    let b = params.linear(src, &format!("{prefix}.x_b"));
    let c = params.linear(src, &format!("{prefix}.x_c"));
    let low = params.linear(src, &format!("{prefix}.dt_down"));
    let delta = params.linear(low, &format!("{prefix}.dt_up")).softplus();
    (b, c, delta)
}

/// `LayerNorm(LayerNorm(Linear(y ⊙ SiLU(Linear(normed)))) + residual)`.
pub fn gated_output<'t>(y: Var<'t>, normed: Var<'t>, residual: Var<'t>, params: &Bound<'t>, prefix: &str) -> Var<'t> {
    let gate = params.linear(normed, &format!("{prefix}.gate")).silu();
    let projected = params.linear(y.mul(gate), &format!("{prefix}.out"));
    let inner = params.layer_norm(projected, &format!("{prefix}.ln1"));
    params.layer_norm(inner.add(residual), &format!("{prefix}.ln2"))
}

/// One selective SSM pass of `input` steered by `selector`.
pub fn ssm_var<'t>(input: Var<'t>, selector: Var<'t>, params: &Bound<'t>, prefix: &str) -> Result<Var<'t>> {
    let (b, c, delta) = select_var(selector, params, prefix);
    layers::selective_scan(params.get(&format!("{prefix}.a_log")), delta, b, c, input)
}

/// Returns `(Z_o, Z_a)`. With `cross_view = false` each view selects its
/// own parameters, which is the ablation without view fusion in the SSM.
pub fn vfm_forward_var<'t>(h_o: Var<'t>, h_a: Var<'t>, params: &Bound<'t>, cross_view: bool) -> Result<(Var<'t>, Var<'t>)> {
    layers::check_rows("VFM views", h_o.shape(), h_a.shape())?;
    let (norm_o, in_o) = preprocess_var(h_o, params, "vfm.o");
    let (norm_a, in_a) = preprocess_var(h_a, params, "vfm.a");
    let (sel_o, sel_a) = if cross_view { (in_a, in_o) } else { (in_o, in_a) };
    let y_o = ssm_var(in_o, sel_o, params, "vfm.o")?;
    let y_a = ssm_var(in_a, sel_a, params, "vfm.a")?;
    Ok((gated_output(y_o, norm_o, h_o, params, "vfm.o"), gated_output(y_a, norm_a, h_a, params, "vfm.a")))
}

/// Forward-only preprocessing of one view.
pub fn preprocess(h: &Matrix, store: &ParamStore, prefix: &str) -> Matrix {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (_, out) = preprocess_var(tape.constant(h.clone()), &bound, prefix);
    let out = out.value().as_ref().clone();
    out
}

/// `(B, C, Δ)` for view `prefix` from the opposite view's processed sequence.
pub fn cross_parameterize(h_input_other: &Matrix, expected_rows: usize, store: &ParamStore, prefix: &str) -> Result<(Matrix, Matrix, Matrix)> {
    if h_input_other.rows() != expected_rows {
        return Err(Error::Shape(format!("views disagree on node count: {} vs {expected_rows}", h_input_other.rows())));
    }
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (b, c, d) = select_var(tape.constant(h_input_other.clone()), &bound, prefix);
    let out = (b.value().as_ref().clone(), c.value().as_ref().clone(), d.value().as_ref().clone());
    Ok(out)
}

pub fn vfm_forward(h_o: &Matrix, h_a: &Matrix, store: &ParamStore, cross_view: bool) -> Result<(Matrix, Matrix)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (z_o, z_a) = vfm_forward_var(tape.constant(h_o.clone()), tape.constant(h_a.clone()), &bound, cross_view)?;
    let out = (z_o.value().as_ref().clone(), z_a.value().as_ref().clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{silu, softplus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(width: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_vfm(&mut s, width, &BlockConfig { state_size: 3, conv_width: 2, delta_rank: 2 }, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn single_node_identity_preprocess_is_silu_of_norm() {
        let mut s = store(3, 0);
        *s.get_mut("vfm.o.in_proj.w").unwrap() = Matrix::identity(3);
        *s.get_mut("vfm.o.in_proj.b").unwrap() = Matrix::zeros(1, 3);
        *s.get_mut("vfm.o.conv.k").unwrap() = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        *s.get_mut("vfm.o.conv.b").unwrap() = Matrix::zeros(1, 3);
        let h = Matrix::row_vector(&[1.0, 2.0, 6.0]);
        let out = preprocess(&h, &s, "vfm.o");
        let mean = 3.0;
        let std = ((4.0 + 1.0 + 9.0) / 3.0 + layers::LAYER_NORM_EPS).sqrt();
        for j in 0..3 {
            assert!((out[(0, j)] - silu((h[(0, j)] - mean) / std)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_ln2_steps() {
        let mut s = store(3, 1);
        *s.get_mut("vfm.o.dt_up.b").unwrap() = Matrix::zeros(1, 3);
        let (b, c, d) = cross_parameterize(&Matrix::zeros(4, 3), 4, &s, "vfm.o").unwrap();
        assert!(b.as_slice().iter().chain(c.as_slice()).all(|&v| v == 0.0));
        assert!(d.as_slice().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn constant_delta_from_bias() {
        let mut s = store(3, 2);
        *s.get_mut("vfm.o.dt_up.w").unwrap() = Matrix::zeros(2, 3);
        *s.get_mut("vfm.o.dt_up.b").unwrap() = Matrix::filled(1, 3, 0.7);
        let h = Matrix::random_uniform(5, 3, 2.0, &mut ChaCha8Rng::seed_from_u64(9));
        let (_, _, d) = cross_parameterize(&h, 5, &s, "vfm.o").unwrap();
        assert!(d.as_slice().iter().all(|&v| (v - softplus(0.7)).abs() < 1e-15));
    }

    #[test]
    fn positive_steps_and_shape_checks() {
        let s = store(4, 3);
        let h = Matrix::random_uniform(6, 4, 5.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (_, _, d) = cross_parameterize(&h, 6, &s, "vfm.a").unwrap();
        assert!(d.as_slice().iter().all(|&v| v > 0.0));
        assert!(matches!(cross_parameterize(&h, 5, &s, "vfm.a"), Err(Error::Shape(_))));
        assert!(matches!(vfm_forward(&h, &h.slice_rows(0, 5), &s, true), Err(Error::Shape(_))));
    }

    #[test]
    fn output_shape_matches_input() {
        let s = store(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h_o, h_a) = (Matrix::random_uniform(7, 4, 1.0, &mut rng), Matrix::random_uniform(7, 4, 1.0, &mut rng));
        let (z_o, z_a) = vfm_forward(&h_o, &h_a, &s, true).unwrap();
        assert_eq!(z_o.shape(), (7, 4));
        assert_eq!(z_a.shape(), (7, 4));
        assert_eq!((z_o.clone(), z_a.clone()), vfm_forward(&h_o, &h_a, &s, true).unwrap());
    }

    #[test]
    fn other_view_steers_the_scan() {
        let s = store(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h_o = Matrix::random_uniform(5, 4, 1.0, &mut rng);
        let h_a = Matrix::random_uniform(5, 4, 1.0, &mut rng);
        let mut h_a2 = h_a.clone();
        h_a2[(2, 1)] += 0.5;
        let (z1, _) = vfm_forward(&h_o, &h_a, &s, true).unwrap();
        let (z2, _) = vfm_forward(&h_o, &h_a2, &s, true).unwrap();
        assert!(z1.max_abs_diff(&z2) > 1e-9);
        // Without fusion, view o never sees view a.
        let (z1, _) = vfm_forward(&h_o, &h_a, &s, false).unwrap();
        let (z2, _) = vfm_forward(&h_o, &h_a2, &s, false).unwrap();
        assert_eq!(z1, z2);
    }
}
