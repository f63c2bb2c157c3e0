//! Spectrum-Guided Mamba.
//!
//! Refines graph embeddings with a selective scan over the batch's graph
//! sequence. The scan's `(B, C, Δ)` come from an embedding of each graph's
//! per-dimension Rayleigh quotients, so the state update is steered by how
//! much high-frequency energy the graph's input signal carries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Bound, ParamStore};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};
use crate::vfm::{self, BlockConfig};

/// Parameters for one SGM instance under `prefix` (`sgm.o` or `sgm.a`).
/// `rq_dim` is the width of the Rayleigh vector; `spectral = false` leaves
/// out the Rayleigh branch entirely.
pub fn init_sgm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    rq_dim: usize,
    cfg: &BlockConfig,
    spectral: bool,
    rng: &mut R,
) {
    vfm::init_branch(store, prefix, width, cfg, rng);
    if spectral {
        store.add_linear(&format!("{prefix}.rq_mlp0"), rq_dim, width, true, rng);
        store.add_linear(&format!("{prefix}.rq_mlp1"), width, width, true, rng);
        vfm::init_branch(store, &format!("{prefix}.rq"), width, cfg, rng);
    }
    vfm::init_selection(store, prefix, width, cfg, rng);
    vfm::init_output(store, prefix, width, rng);
}

/// `MLP(rq) = Linear(ReLU(Linear(rq)))`, one row per graph.
pub fn rq_embed_var<'t>(rq: Var<'t>, params: &Bound<'t>, prefix: &str) -> Var<'t> {
    let hidden = params.linear(rq, &format!("{prefix}.rq_mlp0")).relu();
    params.linear(hidden, &format!("{prefix}.rq_mlp1"))
}

/// `z_G` for a batch of graph embeddings `h_g` (`|B| × D`) and their
/// Rayleigh vectors `rq` (`|B| × d`). With `spectral = false` the selective
/// parameters come from the processed `h_G` instead of the Rayleigh branch.
pub fn sgm_forward_var<'t>(h_g: Var<'t>, rq: &Matrix, params: &Bound<'t>, prefix: &str, spectral: bool) -> Result<Var<'t>> {
    if rq.rows() != h_g.shape().0 {
        return Err(Error::Shape(format!("{} Rayleigh vectors for {} graphs", rq.rows(), h_g.shape().0)));
    }
    let (normed, input) = vfm::preprocess_var(h_g, params, prefix);
    let selector = if spectral {
        let h_rq = rq_embed_var(h_g.tape().constant(rq.clone()), params, prefix);
        vfm::preprocess_var(h_rq, params, &format!("{prefix}.rq")).1
    } else {
        input
    };
    let y = vfm::ssm_var(input, selector, params, prefix)?;
    Ok(vfm::gated_output(y, normed, h_g, params, prefix))
}

/// Forward-only Rayleigh embedding of a single graph.
pub fn rq_embed(rq: &[f64], store: &ParamStore, prefix: &str) -> Vec<f64> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = rq_embed_var(tape.constant(Matrix::row_vector(rq)), &bound, prefix).value().as_slice().to_vec();
    out
}

pub fn sgm_forward(h_g: &Matrix, rq: &Matrix, store: &ParamStore, prefix: &str, spectral: bool) -> Result<Matrix> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let z = sgm_forward_var(tape.constant(h_g.clone()), rq, &bound, prefix, spectral)?;
    let out = z.value().as_ref().clone();
    Ok(out)
}
