//! Deterministic two-view inputs.
//!
//! The feature view carries semantic node information; the structure view
//! encodes each node's structural role through random-walk return
//! probabilities. Nothing here is random.

use serde::{Deserialize, Serialize};

use crate::dataset::Graph;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub walk_steps: usize,
    pub degree_cap: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { walk_steps: 16, degree_cap: 64 }
    }
}

/// Node feature matrices for the two views of one graph, rows in the
/// graph's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub features_o: Matrix,
    pub features_a: Matrix,
}

impl ViewPair {
    pub fn build(g: &Graph, cfg: &AugmentConfig) -> Self {
        Self { features_o: build_feature_view(g, cfg.degree_cap), features_a: build_structure_view(g, cfg.walk_steps) }
    }
}

/// Node attributes (or label one-hots, which the parser already stores as
/// features) when present; otherwise a degree one-hot with `degree_cap + 1`
/// columns, the last being the overflow bucket for degree ≥ `degree_cap`.
pub fn build_feature_view(g: &Graph, degree_cap: usize) -> Matrix {
    if g.feature_dim() > 0 {
        return g.features.clone();
    }
    let mut m = Matrix::zeros(g.node_count, degree_cap + 1);
    for (v, d) in g.degrees().into_iter().enumerate() {
        m[(v, d.min(degree_cap))] = 1.0;
    }
    m
}

/// Column `t - 1` of row `v` holds `(Pᵗ)_vv` with `P = D⁻¹A`.
pub fn build_structure_view(g: &Graph, walk_steps: usize) -> Matrix {
    assert!(walk_steps >= 1, "walk_steps must be at least 1");
    let n = g.node_count;
    let neighbors = g.neighbors();
    let mut out = Matrix::zeros(n, walk_steps);
    // Propagate the distribution of every start node at once: row s of
    // `dist` is the walk distribution after t steps from s.
    let mut dist = Matrix::identity(n);
    for t in 0..walk_steps {
        let mut next = Matrix::zeros(n, n);
        for s in 0..n {
            let cur = dist.row(s);
            let row = next.row_mut(s);
            for (u, &p) in cur.iter().enumerate() {
                if p == 0.0 || neighbors[u].is_empty() {
                    continue;
                }
                let share = p / neighbors[u].len() as f64;
                for &w in &neighbors[u] {
                    row[w] += share;
                }
            }
        }
        dist = next;
        for v in 0..n {
            out[(v, t)] = dist[(v, v)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_one_hot_on_path() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let m = build_feature_view(&g, 4);
        assert_eq!(m.cols(), 5);
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_overflow_bucket() {
        let star = Graph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let m = build_feature_view(&star, 3);
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0, 1.0]);
        let m = build_feature_view(&star, 4);
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attributes_pass_through() {
        let feats = Matrix::from_rows(&[vec![0.5, 1.5], vec![2.0, -1.0]]);
        let g = Graph::new(0, 2, [(0, 1)], feats.clone(), 0).unwrap();
        assert_eq!(build_feature_view(&g, 8), feats);
    }

    #[test]
    fn single_edge_returns_every_other_step() {
        let g = Graph::from_edges(2, &[(0, 1)]);
        let m = build_structure_view(&g, 2);
        assert_eq!(m, Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
    }

    #[test]
    fn triangle_return_probabilities() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(build_structure_view(&g, 1), Matrix::zeros(3, 1));
        // P = (J - I)/2, so (P²)_vv = 2 · (1/2)² = 1/2.
        let m = build_structure_view(&g, 2);
        for v in 0..3 {
            assert!((m[(v, 1)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_nodes_are_zero() {
        let g = Graph::from_edges(3, &[(0, 1)]);
        let m = build_structure_view(&g, 4);
        assert!(m.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn structure_view_matches_dense_matrix_power() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (3, 4)]);
        let adj = g.adjacency();
        let deg = g.degrees();
        let p = Matrix::from_fn(5, 5, |i, j| adj[(i, j)] / deg[i] as f64);
        let mut power = Matrix::identity(5);
        let m = build_structure_view(&g, 6);
        for t in 0..6 {
            power = power.matmul(&p);
            for v in 0..5 {
                assert!((m[(v, t)] - power[(v, v)]).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&m[(v, t)]));
            }
        }
    }
}
