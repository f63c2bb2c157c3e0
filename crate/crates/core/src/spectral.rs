//! Graph Laplacians, the edge-sum Rayleigh quotient and spectral energy
//! distributions.
//!
//! The training path only ever calls [`rayleigh_quotient_diag`], which needs
//! no eigendecomposition. [`spectral_energy_distribution`] does a dense
//! symmetric eigendecomposition and is meant for analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::Graph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    #[default]
    Unnormalized,
    SymmetricNormalized,
}

pub const DEFAULT_EIGEN_CAP: usize = 2000;

/// `D − A`, or `I − D^{-1/2} A D^{-1/2}`. In the normalized form an
/// isolated node keeps a diagonal of 1 and no off-diagonal entries.
pub fn laplacian(g: &Graph, kind: LaplacianKind) -> Matrix {
    let n = g.node_count;
    let deg = g.degrees();
    let mut l = Matrix::zeros(n, n);
    match kind {
        LaplacianKind::Unnormalized => {
            for v in 0..n {
                l[(v, v)] = deg[v] as f64;
            }
            for &(i, j) in &g.edges {
                l[(i, j)] = -1.0;
                l[(j, i)] = -1.0;
            }
        }
        LaplacianKind::SymmetricNormalized => {
            for v in 0..n {
                l[(v, v)] = 1.0;
            }
            for &(i, j) in &g.edges {
                let w = -1.0 / ((deg[i] * deg[j]) as f64).sqrt();
                l[(i, j)] = w;
                l[(j, i)] = w;
            }
        }
    }
    l
}

/// Per-column Rayleigh quotient `diag(XᵀLX) ⊘ diag(XᵀX)` via the edge sum
///
/// `Σ_{(i,j): A_ij = 1} (x_i − x_j)² / (2 Σ_i x_i²)`
///
/// over ordered pairs. The normalized kind uses the degree-scaled signal
/// `x_i / √d_i` in the numerator, which is the same quadratic form as
/// `xᵀ(I − D^{-1/2}AD^{-1/2})x` when no node is isolated. A column with zero
/// energy maps to 0.
pub fn rayleigh_quotient_diag(g: &Graph, x: &Matrix, kind: LaplacianKind) -> Vec<f64> {
    assert_eq!(x.rows(), g.node_count, "signal rows must match node count");
    let d = x.cols();
    let deg = g.degrees();
    let mut numer = vec![0.0; d];
    let mut denom = vec![0.0; d];
    for v in 0..g.node_count {
        for (k, &xv) in x.row(v).iter().enumerate() {
            denom[k] += xv * xv;
        }
    }
    match kind {
        LaplacianKind::Unnormalized => {
            for &(i, j) in &g.edges {
                for k in 0..d {
                    let diff = x[(i, k)] - x[(j, k)];
                    // (i, j) and (j, i) both appear in the ordered-pair sum.
                    numer[k] += 2.0 * diff * diff;
                }
            }
        }
        LaplacianKind::SymmetricNormalized => {
            let isolated: Vec<usize> = (0..g.node_count).filter(|&v| deg[v] == 0).collect();
            for &(i, j) in &g.edges {
                let (si, sj) = (1.0 / (deg[i] as f64).sqrt(), 1.0 / (deg[j] as f64).sqrt());
                for k in 0..d {
                    let diff = x[(i, k)] * si - x[(j, k)] * sj;
                    numer[k] += 2.0 * diff * diff;
                }
            }
            // An isolated node contributes x_v² through the unit diagonal.
            for &v in &isolated {
                for k in 0..d {
                    numer[k] += 2.0 * x[(v, k)] * x[(v, k)];
                }
            }
        }
    }
    numer.iter().zip(&denom).map(|(&n, &s)| if s > 0.0 { n / (2.0 * s) } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `x̂_k² / Σ x̂²`, aligned with `eigenvalues`.
    pub energies: Vec<f64>,
    /// Per-column Rayleigh quotients of the signal.
    pub rayleigh: Vec<f64>,
}

impl SpectralReport {
    /// Fraction of energy on the top quarter of the spectrum by rank.
    pub fn top_quartile_energy(&self) -> f64 {
        let n = self.energies.len();
        let start = n - n.div_ceil(4);
        self.energies[start..].iter().sum()
    }
}

/// Eigendecomposes the Laplacian and projects each signal column onto the
/// eigenbasis. Energies are summed over columns before normalizing, so a
/// single column gives exactly `x̂_k² / Σ x̂²`. Fails if the per-column
/// Rayleigh quotient disagrees with `Σ λ_k x̂_k² / Σ x̂_k²` beyond 1e-8.
pub fn spectral_energy_distribution(g: &Graph, x: &Matrix, kind: LaplacianKind, cap: usize) -> Result<SpectralReport> {
    let n = g.node_count;
    if n > cap {
        return Err(Error::TooLarge { nodes: n, cap });
    }
    if x.rows() != n {
        return Err(Error::Shape(format!("signal has {} rows for {n} nodes", x.rows())));
    }
    let (eigenvalues, vectors) = sorted_eigen(&laplacian(g, kind));
    let signal = DMatrix::from_row_slice(n, x.cols(), x.as_slice());
    let hat = vectors.transpose() * &signal;
    let mut energies = vec![0.0; n];
    for k in 0..n {
        for c in 0..x.cols() {
            energies[k] += hat[(k, c)] * hat[(k, c)];
        }
    }
    let total: f64 = energies.iter().sum();
    if total > 0.0 {
        for e in &mut energies {
            *e /= total;
        }
    }

    let rayleigh = rayleigh_quotient_diag(g, x, kind);
    for c in 0..x.cols() {
        let col_energy: f64 = (0..n).map(|k| hat[(k, c)] * hat[(k, c)]).sum();
        if col_energy == 0.0 {
            continue;
        }
        let spectral: f64 = (0..n).map(|k| eigenvalues[k] * hat[(k, c)] * hat[(k, c)]).sum::<f64>() / col_energy;
        let diff = (spectral - rayleigh[c]).abs();
        if diff > 1e-8 * spectral.abs().max(1.0) {
            return Err(Error::Domain(format!("Rayleigh identity violated on column {c}: {spectral} vs {}", rayleigh[c])));
        }
    }
    Ok(SpectralReport { eigenvalues, energies, rayleigh })
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors
/// as columns.
pub fn sorted_eigen(m: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m.as_slice()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<DVector<f64>>>());
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2() -> Graph {
        Graph::from_edges(2, &[(0, 1)])
    }

    #[test]
    fn k2_laplacians() {
        let expected = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert_eq!(laplacian(&k2(), LaplacianKind::Unnormalized), expected);
        assert_eq!(laplacian(&k2(), LaplacianKind::SymmetricNormalized), expected);
    }

    #[test]
    fn triangle_spectrum() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]);
        let (vals, _) = sorted_eigen(&laplacian(&g, LaplacianKind::Unnormalized));
        for (v, e) in vals.iter().zip([0.0, 3.0, 3.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_in_normalized_laplacian() {
        let g = Graph::from_edges(3, &[(0, 1)]);
        let l = laplacian(&g, LaplacianKind::SymmetricNormalized);
        assert_eq!(l[(2, 2)], 1.0);
        assert_eq!(l.row(2)[..2], [0.0, 0.0]);
    }

    #[test]
    fn k2_alternating_signal_hits_lambda_max() {
        let x = Matrix::column_vector(&[1.0, -1.0]);
        assert_eq!(rayleigh_quotient_diag(&k2(), &x, LaplacianKind::Unnormalized), vec![2.0]);
    }

    #[test]
    fn constant_and_zero_columns_map_to_zero() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let x = Matrix::from_fn(4, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        assert_eq!(rayleigh_quotient_diag(&g, &x, LaplacianKind::Unnormalized), vec![0.0, 0.0]);
    }

    #[test]
    fn normalized_edge_form_matches_quadratic_form() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 0), (2, 3)]);
        let x = Matrix::from_fn(5, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 } + j as f64);
        let l = laplacian(&g, LaplacianKind::SymmetricNormalized);
        let rq = rayleigh_quotient_diag(&g, &x, LaplacianKind::SymmetricNormalized);
        for c in 0..2 {
            let col = Matrix::column_vector(&x.column(c));
            let q = col.t_matmul(&l.matmul(&col))[(0, 0)] / col.t_matmul(&col)[(0, 0)];
            assert!((q - rq[c]).abs() < 1e-12, "{q} vs {}", rq[c]);
        }
    }

    #[test]
    fn k2_energy_concentrates_on_one_eigenvalue() {
        let r = spectral_energy_distribution(&k2(), &Matrix::column_vector(&[1.0, -1.0]), LaplacianKind::Unnormalized, 10).unwrap();
        assert!((r.eigenvalues[1] - 2.0).abs() < 1e-12);
        assert!((r.energies[1] - 1.0).abs() < 1e-12 && r.energies[0].abs() < 1e-12);
        let r = spectral_energy_distribution(&k2(), &Matrix::column_vector(&[1.0, 1.0]), LaplacianKind::Unnormalized, 10).unwrap();
        assert!((r.energies[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn size_cap_enforced() {
        let g = Graph::from_edges(5, &[]);
        assert!(matches!(
            spectral_energy_distribution(&g, &Matrix::zeros(5, 1), LaplacianKind::Unnormalized, 4),
            Err(Error::TooLarge { nodes: 5, cap: 4 })
        ));
    }

    #[test]
    fn mixing_toward_high_frequency_raises_quotient() {
        for g in [k2(), Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)])] {
            let (vals, vecs) = sorted_eigen(&laplacian(&g, LaplacianKind::Unnormalized));
            let n = g.node_count;
            let (low, high) = (vecs.column(0), vecs.column(n - 1));
            assert!(vals[0] < vals[n - 1]);
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=20 {
                let t = step as f64 / 20.0;
                let x: Vec<f64> = (0..n).map(|i| (1.0 - t) * low[i] + t * high[i]).collect();
                let r = rayleigh_quotient_diag(&g, &Matrix::column_vector(&x), LaplacianKind::Unnormalized)[0];
                assert!(r >= prev - 1e-12);
                prev = r;
            }
        }
    }
}
