//! Contrastive objectives, adaptive scale weighting, z-scored anomaly
//! scores and ROC AUC.
//!
//! Both InfoNCE variants exclude the positive pair from the denominator:
//!
//! `ℓ(z_i, z'_i) = −log( exp(cos(z_i, z'_i)/τ) / Σ_{k ≠ i} exp(cos(z_i, z'_k)/τ) )`
//!
//! so individual losses can be negative. At node scale negatives are the
//! other nodes of the same graph; at graph scale they are the other graphs
//! in the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::tape::Var;

/// Norm floor inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Floor applied to every fitted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.2, alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("loss.alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn unit_rows(z: &Matrix) -> (Matrix, Vec<f64>) {
    let norms: Vec<f64> = (0..z.rows()).map(|i| norm(z.row(i)).max(COSINE_EPS)).collect();
    let unit = Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] / norms[i]);
    (unit, norms)
}

/// Contrast within one group of `n ≥ 2` aligned rows. Returns, per row,
/// `ℓ(o_i, a_i) + ℓ(a_i, o_i)` and the gradient of `Σ_i w_i · (that sum)`
/// with respect to the similarity logits `S[i, k] = cos(o_i, a_k)/τ`.
fn contrast_group(sim: &Matrix, weights: Option<&[f64]>) -> (Vec<f64>, Matrix) {
    let n = sim.rows();
    let mut losses = vec![0.0; n];
    let mut grad = Matrix::zeros(n, n);
    // Row direction: anchor o_i, negatives a_k.
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| sim[(i, k)]).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|s| (s - max).exp()).sum();
        losses[i] += -sim[(i, i)] + max + denom.ln();
        if let Some(w) = weights {
            grad[(i, i)] -= w[i];
            for k in (0..n).filter(|&k| k != i) {
                grad[(i, k)] += w[i] * (sim[(i, k)] - max).exp() / denom;
            }
        }
    }
    // Column direction: anchor a_i, negatives o_k.
    for i in 0..n {
        let col: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| sim[(k, i)]).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = col.iter().map(|s| (s - max).exp()).sum();
        losses[i] += -sim[(i, i)] + max + denom.ln();
        if let Some(w) = weights {
            grad[(i, i)] -= w[i];
            for k in (0..n).filter(|&k| k != i) {
                grad[(k, i)] += w[i] * (sim[(k, i)] - max).exp() / denom;
            }
        }
    }
    (losses, grad)
}

/// Gradients of `Σ_{i,k} G[i,k] · cos(o_i, a_k)/τ` with respect to the raw
/// rows of `o` and `a`.
fn cosine_backward(o_unit: &Matrix, o_norm: &[f64], a_unit: &Matrix, a_norm: &[f64], g_sim: &Matrix, tau: f64) -> (Matrix, Matrix) {
    let g_ou = g_sim.matmul(a_unit).scale(1.0 / tau);
    let g_au = g_sim.t_matmul(o_unit).scale(1.0 / tau);
    let project = |unit: &Matrix, norms: &[f64], g: &Matrix| {
        let mut out = Matrix::zeros(unit.rows(), unit.cols());
        for i in 0..unit.rows() {
            let u = unit.row(i);
            let gi = g.row(i);
            let radial = dot(u, gi);
            let at_floor = norms[i] <= COSINE_EPS;
            for j in 0..unit.cols() {
                out[(i, j)] = if at_floor { gi[j] / norms[i] } else { (gi[j] - u[j] * radial) / norms[i] };
            }
        }
        out
    };
    (project(o_unit, o_norm, &g_ou), project(a_unit, a_norm, &g_au))
}

fn similarity(o_unit: &Matrix, a_unit: &Matrix, tau: f64) -> Matrix {
    o_unit.matmul_t(a_unit).scale(1.0 / tau)
}

/// Per-graph node-scale losses `1/(2|V_j|) Σ_i [ℓ(o_i, a_i) + ℓ(a_i, o_i)]`.
/// Graphs with a single node have no negatives and contribute 0.
pub fn node_infonce(z_o: &Matrix, z_a: &Matrix, offsets: &[usize], tau: f64) -> Result<Vec<f64>> {
    Ok(node_infonce_impl(z_o, z_a, offsets, tau, None)?.0)
}

type LossAndGrads = (Vec<f64>, Option<(Matrix, Matrix)>);

fn node_infonce_impl(z_o: &Matrix, z_a: &Matrix, offsets: &[usize], tau: f64, upstream: Option<&[f64]>) -> Result<LossAndGrads> {
    if z_o.shape() != z_a.shape() {
        return Err(Error::Shape(format!("node views {:?} vs {:?}", z_o.shape(), z_a.shape())));
    }
    if offsets.last() != Some(&z_o.rows()) {
        return Err(Error::Shape("graph offsets do not cover the node rows".into()));
    }
    let graphs = offsets.len() - 1;
    let mut losses = vec![0.0; graphs];
    let mut grads = upstream.map(|_| (Matrix::zeros(z_o.rows(), z_o.cols()), Matrix::zeros(z_a.rows(), z_a.cols())));
    for j in 0..graphs {
        let (s, e) = (offsets[j], offsets[j + 1]);
        let n = e - s;
        if n < 2 {
            continue;
        }
        let (o_unit, o_norm) = unit_rows(&z_o.slice_rows(s, e));
        let (a_unit, a_norm) = unit_rows(&z_a.slice_rows(s, e));
        let sim = similarity(&o_unit, &a_unit, tau);
        let scale = 1.0 / (2.0 * n as f64);
        let weights = upstream.map(|u| vec![u[j] * scale; n]);
        let (per_node, g_sim) = contrast_group(&sim, weights.as_deref());
        losses[j] = per_node.iter().sum::<f64>() * scale;
        if let Some((g_o, g_a)) = grads.as_mut() {
            let (go, ga) = cosine_backward(&o_unit, &o_norm, &a_unit, &a_norm, &g_sim, tau);
            for i in 0..n {
                g_o.row_mut(s + i).copy_from_slice(go.row(i));
                g_a.row_mut(s + i).copy_from_slice(ga.row(i));
            }
        }
    }
    Ok((losses, grads))
}

/// Per-graph graph-scale losses `½ [ℓ(o_i, a_i) + ℓ(a_i, o_i)]` with the
/// rest of the batch as negatives.
pub fn graph_infonce(z_o: &Matrix, z_a: &Matrix, tau: f64) -> Result<Vec<f64>> {
    Ok(graph_infonce_impl(z_o, z_a, tau, None)?.0)
}

fn graph_infonce_impl(z_o: &Matrix, z_a: &Matrix, tau: f64, upstream: Option<&[f64]>) -> Result<LossAndGrads> {
    if z_o.shape() != z_a.shape() {
        return Err(Error::Shape(format!("graph views {:?} vs {:?}", z_o.shape(), z_a.shape())));
    }
    if z_o.rows() < 2 {
        return Err(Error::BatchTooSmall(z_o.rows()));
    }
    let (o_unit, o_norm) = unit_rows(z_o);
    let (a_unit, a_norm) = unit_rows(z_a);
    let sim = similarity(&o_unit, &a_unit, tau);
    let weights = upstream.map(|u| u.iter().map(|w| 0.5 * w).collect::<Vec<_>>());
    let (per_graph, g_sim) = contrast_group(&sim, weights.as_deref());
    let losses = per_graph.iter().map(|l| 0.5 * l).collect();
    let grads = upstream.map(|_| cosine_backward(&o_unit, &o_norm, &a_unit, &a_norm, &g_sim, tau));
    Ok((losses, grads))
}

/// Node-scale losses as a `|B| × 1` tape value.
pub fn node_infonce_var<'t>(z_o: Var<'t>, z_a: Var<'t>, offsets: &[usize], tau: f64) -> Result<Var<'t>> {
    let (zo, za) = (z_o.value(), z_a.value());
    let losses = node_infonce(&zo, &za, offsets, tau)?;
    let offsets = offsets.to_vec();
    Ok(z_o.tape().custom(&[z_o, z_a], Matrix::column_vector(&losses), move |g| {
        let (_, grads) = node_infonce_impl(&zo, &za, &offsets, tau, Some(g.as_slice())).expect("shapes checked in forward");
        let (go, ga) = grads.expect("upstream given");
        vec![go, ga]
    }))
}

/// Graph-scale losses as a `|B| × 1` tape value.
pub fn graph_infonce_var<'t>(z_o: Var<'t>, z_a: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (zo, za) = (z_o.value(), z_a.value());
    let losses = graph_infonce(&zo, &za, tau)?;
    Ok(z_o.tape().custom(&[z_o, z_a], Matrix::column_vector(&losses), move |g| {
        let (_, grads) = graph_infonce_impl(&zo, &za, tau, Some(g.as_slice())).expect("shapes checked in forward");
        let (go, ga) = grads.expect("upstream given");
        vec![go, ga]
    }))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scale weights `(σ_node^α, σ_graph^α)` from the current batch's losses.
/// They are treated as constants by the optimizer.
pub fn adaptive_weights(node_losses: &[f64], graph_losses: &[f64], alpha: f64) -> (f64, f64) {
    let weight = |l: &[f64]| if alpha == 0.0 { 1.0 } else { mean_std(l).1.powf(alpha) };
    (weight(node_losses), weight(graph_losses))
}

/// `σ_node^α · mean(node) + σ_graph^α · mean(graph)` on plain values.
pub fn adaptive_total_loss(node_losses: &[f64], graph_losses: &[f64], cfg: &LossConfig) -> f64 {
    let (wn, wg) = adaptive_weights(node_losses, graph_losses, cfg.alpha);
    wn * mean_std(node_losses).0 + wg * mean_std(graph_losses).0
}

/// Tape version with explicit (detached) weights.
pub fn weighted_total_var<'t>(node_losses: Var<'t>, graph_losses: Var<'t>, weights: (f64, f64)) -> Var<'t> {
    node_losses.mean().scale(weights.0).add(graph_losses.mean().scale(weights.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub mu_node: f64,
    pub sigma_node: f64,
    pub mu_graph: f64,
    pub sigma_graph: f64,
}

pub fn fit_normalizer(train_node_losses: &[f64], train_graph_losses: &[f64]) -> Result<ScoreNormalizer> {
    if train_node_losses.is_empty() || train_graph_losses.is_empty() {
        return Err(Error::InvalidDataset("cannot fit score normalizer on an empty training set".into()));
    }
    let (mu_node, s_node) = mean_std(train_node_losses);
    let (mu_graph, s_graph) = mean_std(train_graph_losses);
    Ok(ScoreNormalizer { mu_node, sigma_node: s_node.max(SIGMA_FLOOR), mu_graph, sigma_graph: s_graph.max(SIGMA_FLOOR) })
}

/// `(L_n − μ_n)/σ_n + (L_g − μ_g)/σ_g`.
pub fn anomaly_score(loss_node: f64, loss_graph: f64, norm: &ScoreNormalizer) -> f64 {
    (loss_node - norm.mu_node) / norm.sigma_node + (loss_graph - norm.mu_graph) / norm.sigma_graph
}

/// Rank-based ROC AUC (Mann-Whitney U) with midranks for ties; `true`
/// marks the positive (anomalous) class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_zero_node_loss() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let l = node_infonce(&z, &z, &[0, 2], 0.5).unwrap();
        assert_eq!(l, vec![0.0]);
    }

    #[test]
    fn excluded_positive_admits_negative_loss() {
        // cos(o0, a0) = 1 and cos(o0, a1) = 0 with τ = 1: ℓ = −log(e / 1) = −1.
        let o = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = node_infonce(&o, &o, &[0, 2], 1.0).unwrap();
        // All four directed terms are −1; averaged over 2|V| = 4.
        assert!((l[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_node_graph_contributes_zero() {
        let o = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 1.0], vec![0.5, -1.0]]);
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![-0.5, 2.0]]);
        let l = node_infonce(&o, &a, &[0, 1, 3], 0.2).unwrap();
        assert_eq!(l[0], 0.0);
        assert!(l[1] != 0.0);
    }

    #[test]
    fn graph_loss_needs_two_graphs() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(graph_infonce(&z, &z, 0.2), Err(Error::BatchTooSmall(1))));
        let z2 = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(graph_infonce(&z2, &z2, 0.2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn orthogonal_graph_loss() {
        // Graph 0's views are orthogonal to each other and to everything else.
        let o = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        let a = Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        let tau = 0.5;
        let l = graph_infonce(&o, &a, tau).unwrap();
        // Each direction: −log(e⁰ / (e⁰ + e⁰)) = ln 2.
        assert!((l[0] - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn adaptive_loss_arithmetic() {
        let cfg = LossConfig { tau: 0.2, alpha: 0.0 };
        assert_eq!(adaptive_total_loss(&[1.0, 3.0], &[2.0, 2.0], &cfg), 4.0);
        let cfg = LossConfig { tau: 0.2, alpha: 1.0 };
        assert_eq!(adaptive_total_loss(&[1.0, 3.0], &[2.0, 2.0], &cfg), 2.0);
        assert_eq!(adaptive_total_loss(&[5.0, 5.0], &[5.0, 5.0], &cfg), 0.0);
    }

    #[test]
    fn normalizer_conventions() {
        let n = fit_normalizer(&[1.0, 1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((n.mu_node, n.sigma_node), (1.0, SIGMA_FLOOR));
        assert_eq!((n.mu_graph, n.sigma_graph), (1.0, 1.0));
        assert!(fit_normalizer(&[], &[]).is_err());
    }

    #[test]
    fn score_centering_and_scaling() {
        let n = ScoreNormalizer { mu_node: 2.0, sigma_node: 0.5, mu_graph: -1.0, sigma_graph: 3.0 };
        assert_eq!(anomaly_score(2.0, -1.0, &n), 0.0);
        assert_eq!(anomaly_score(2.5, 2.0, &n), 2.0);
        assert!(anomaly_score(2.6, 2.0, &n) > anomaly_score(2.5, 2.0, &n));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.5, 0.4], &[false, false]), Err(Error::SingleClass)));
    }
}
