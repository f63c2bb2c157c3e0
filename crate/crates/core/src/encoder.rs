//! GCN and GIN encoders.
//!
//! Each view gets its own `L`-layer encoder. Node embeddings concatenate
//! every layer's output, and graph embeddings are per-graph means of the
//! node embeddings.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraphBatch;
use crate::layers::{Bound, ParamStore};
use crate::matrix::Matrix;
use crate::tape::{SparseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Gcn,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden_dim: usize,
    /// GIN self-weight `ε`; unused by GCN.
    pub gin_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Gcn, layers: 2, hidden_dim: 16, gin_eps: 0.0 }
    }
}

impl EncoderConfig {
    /// Width of the concatenated node embedding, `L · d_h`.
    pub fn output_dim(&self) -> usize {
        self.layers * self.hidden_dim
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` over the whole batch.
pub fn gcn_operator(batch: &GraphBatch) -> SparseMatrix {
    let n = batch.node_count();
    let mut deg = vec![1.0; n];
    for &(i, j) in &batch.edge_index {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|v| (v, v, 1.0 / deg[v])).collect();
    for &(i, j) in &batch.edge_index {
        let w = 1.0 / (deg[i] * deg[j]).sqrt();
        entries.push((i, j, w));
        entries.push((j, i, w));
    }
    SparseMatrix { rows: n, cols: n, entries }
}

/// `(1 + ε) I + A` over the whole batch.
pub fn gin_operator(batch: &GraphBatch, eps: f64) -> SparseMatrix {
    let n = batch.node_count();
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|v| (v, v, 1.0 + eps)).collect();
    for &(i, j) in &batch.edge_index {
        entries.push((i, j, 1.0));
        entries.push((j, i, 1.0));
    }
    SparseMatrix { rows: n, cols: n, entries }
}

pub fn gcn_layer_var<'t>(h: Var<'t>, op: &Rc<SparseMatrix>, w: Var<'t>) -> Var<'t> {
    h.sparse_left_mul(Rc::clone(op)).matmul(w).relu()
}

/// MLP is `Linear → ReLU → Linear`.
pub fn gin_layer_var<'t>(h: Var<'t>, op: &Rc<SparseMatrix>, mlp: [Var<'t>; 4]) -> Var<'t> {
    let [w1, b1, w2, b2] = mlp;
    h.sparse_left_mul(Rc::clone(op)).linear(w1, Some(b1)).relu().linear(w2, Some(b2))
}

/// `ReLU(D̃^{-1/2} Ã D̃^{-1/2} H W)`.
pub fn gcn_layer(h: &Matrix, batch: &GraphBatch, w: &Matrix) -> Matrix {
    let tape = Tape::new();
    let op = Rc::new(gcn_operator(batch));
    gcn_layer_var(tape.constant(h.clone()), &op, tape.constant(w.clone())).value().as_ref().clone()
}

/// `MLP((1 + ε) H + Σ_{u ∈ N(v)} H_u)` with `mlp = [W1, b1, W2, b2]`.
pub fn gin_layer(h: &Matrix, batch: &GraphBatch, mlp: [&Matrix; 4], eps: f64) -> Matrix {
    let tape = Tape::new();
    let op = Rc::new(gin_operator(batch, eps));
    let vars = mlp.map(|m| tape.constant(m.clone()));
    gin_layer_var(tape.constant(h.clone()), &op, vars).value().as_ref().clone()
}

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, input_dim: usize, rng: &mut R) {
    let mut fan_in = input_dim;
    for l in 0..cfg.layers {
        match cfg.kind {
            EncoderKind::Gcn => store.add_linear(&format!("{prefix}.layer{l}"), fan_in, cfg.hidden_dim, false, rng),
            EncoderKind::Gin => {
                store.add_linear(&format!("{prefix}.layer{l}.mlp0"), fan_in, cfg.hidden_dim, true, rng);
                store.add_linear(&format!("{prefix}.layer{l}.mlp1"), cfg.hidden_dim, cfg.hidden_dim, true, rng);
            }
        }
        fan_in = cfg.hidden_dim;
    }
}

/// Node embeddings (`Σ|V| × L·d_h`) and graph embeddings (`|B| × L·d_h`).
pub fn encode_var<'t>(
    tape: &'t Tape,
    batch: &GraphBatch,
    features: &Matrix,
    cfg: &EncoderConfig,
    params: &Bound<'t>,
    prefix: &str,
) -> (Var<'t>, Var<'t>) {
    let op = Rc::new(match cfg.kind {
        EncoderKind::Gcn => gcn_operator(batch),
        EncoderKind::Gin => gin_operator(batch, cfg.gin_eps),
    });
    let mut h = tape.constant(features.clone());
    let mut outputs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        h = match cfg.kind {
            EncoderKind::Gcn => gcn_layer_var(h, &op, params.get(&format!("{prefix}.layer{l}.w"))),
            EncoderKind::Gin => {
                let p = |s: &str| params.get(&format!("{prefix}.layer{l}.{s}"));
                gin_layer_var(h, &op, [p("mlp0.w"), p("mlp0.b"), p("mlp1.w"), p("mlp1.b")])
            }
        };
        outputs.push(h);
    }
    let nodes = Var::hcat(&outputs);
    let graphs = nodes.segment_mean(&batch.offsets);
    (nodes, graphs)
}

/// Forward-only encoding with parameters from `store`.
pub fn encode(batch: &GraphBatch, features: &Matrix, cfg: &EncoderConfig, store: &ParamStore, prefix: &str) -> (Matrix, Matrix) {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (n, g) = encode_var(&tape, batch, features, cfg, &bound, prefix);
    let (n, g) = (n.value().as_ref().clone(), g.value().as_ref().clone());
    (n, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_of(g: &Graph) -> GraphBatch {
        GraphBatch::new(&[g])
    }

    #[test]
    fn gcn_isolated_nodes_keep_rows() {
        let g = Graph::from_edges(2, &[]);
        let h = Matrix::identity(2);
        assert_eq!(gcn_layer(&h, &batch_of(&g), &Matrix::identity(2)), h);
    }

    #[test]
    fn gcn_k2_symmetric_rows() {
        let g = Graph::from_edges(2, &[(0, 1)]);
        let h = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        let w = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]);
        let out = gcn_layer(&h, &batch_of(&g), &w);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn gcn_path_matches_dense_oracle() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        let w = Matrix::random_uniform(4, 2, 1.0, &mut rng);
        // Ã = A + I, D̃ = diag(2, 3, 2).
        let a_tilde = g.adjacency().zip_map(&Matrix::identity(3), |a, b| a + b);
        let d = [2.0f64, 3.0, 2.0];
        let norm = Matrix::from_fn(3, 3, |i, j| a_tilde[(i, j)] / (d[i] * d[j]).sqrt());
        let oracle = norm.matmul(&h).matmul(&w).map(|v| v.max(0.0));
        assert!(gcn_layer(&h, &batch_of(&g), &w).max_abs_diff(&oracle) < 1e-12);
    }

    fn identity_mlp(d: usize) -> [Matrix; 4] {
        [Matrix::identity(d), Matrix::zeros(1, d), Matrix::identity(d), Matrix::zeros(1, d)]
    }

    #[test]
    fn gin_sum_aggregation() {
        let mlp = identity_mlp(2);
        let refs = [&mlp[0], &mlp[1], &mlp[2], &mlp[3]];
        let iso = Graph::from_edges(1, &[]);
        let h = Matrix::row_vector(&[0.5, 2.0]);
        assert_eq!(gin_layer(&h, &batch_of(&iso), refs, 0.0), h);
        let k2 = Graph::from_edges(2, &[(0, 1)]);
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.25, 3.0]]);
        assert_eq!(gin_layer(&h, &batch_of(&k2), refs, 0.0), Matrix::from_rows(&[vec![1.25, 3.0], vec![1.25, 3.0]]));
    }

    #[test]
    fn gin_matches_dense_oracle() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        let mlp = [
            Matrix::random_uniform(3, 4, 1.0, &mut rng),
            Matrix::random_uniform(1, 4, 1.0, &mut rng),
            Matrix::random_uniform(4, 2, 1.0, &mut rng),
            Matrix::random_uniform(1, 2, 1.0, &mut rng),
        ];
        let eps = 0.3;
        let agg = g.adjacency().zip_map(&Matrix::identity(5), |a, i| a + (1.0 + eps) * i).matmul(&h);
        let hidden = agg.matmul(&mlp[0]).add_row_broadcast(&mlp[1]).map(|v| v.max(0.0));
        let oracle = hidden.matmul(&mlp[2]).add_row_broadcast(&mlp[3]);
        let out = gin_layer(&h, &batch_of(&g), [&mlp[0], &mlp[1], &mlp[2], &mlp[3]], eps);
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn concatenated_width_and_mean_readout() {
        let cfg = EncoderConfig { kind: EncoderKind::Gcn, layers: 2, hidden_dim: 3, gin_eps: 0.0 };
        let mut store = ParamStore::new();
        init_encoder(&mut store, "enc", &cfg, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let a = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let b = Graph::from_edges(2, &[(0, 1)]);
        let batch = GraphBatch::new(&[&a, &b]);
        let feats = Matrix::from_fn(5, 4, |i, j| ((i + j) % 3) as f64);
        let (nodes, graphs) = encode(&batch, &feats, &cfg, &store, "enc");
        assert_eq!(nodes.shape(), (5, 6));
        assert_eq!(graphs.shape(), (2, 6));
        let mean0: Vec<f64> = (0..6).map(|j| (nodes[(0, j)] + nodes[(1, j)] + nodes[(2, j)]) / 3.0).collect();
        for j in 0..6 {
            assert!((graphs[(0, j)] - mean0[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_readout_of_two_rows() {
        let tape = Tape::new();
        let nodes = tape.constant(Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]));
        assert_eq!(nodes.segment_mean(&[0, 2]).value().row(0), &[1.0, 1.0]);
    }
}
