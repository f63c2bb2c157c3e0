#![allow(dead_code)]

use std::path::PathBuf;

use gladmamba::dataset::{assign_anomaly_labels, Graph, GraphDataset};
use gladmamba::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Normal graphs are rings with a few pendant nodes; anomalies are rings
/// of the same size densified with random chords. No node attributes.
pub fn ring_dataset(normals: usize, anomalies: usize, seed: u64) -> GraphDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::new();
    for id in 0..normals + anomalies {
        let anomaly = id >= normals;
        let n = rng.gen_range(8..14);
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let mut count = n;
        if anomaly {
            for _ in 0..n / 2 {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                edges.push((a, b));
            }
        } else {
            for _ in 0..2 {
                edges.push((rng.gen_range(0..n), count));
                count += 1;
            }
        }
        let label = i64::from(anomaly);
        graphs.push(Graph::new(id, count, edges, Matrix::zeros(count, 0), label).unwrap());
    }
    assign_anomaly_labels(GraphDataset::from_graphs("rings", graphs), Some(1)).unwrap()
}

/// Erdős–Rényi graph on `n` nodes with edge probability `p` and
/// `feature_dim` uniform features.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64, feature_dim: usize) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let features = Matrix::random_uniform(n, feature_dim, 1.0, rng);
    Graph::new(0, n, edges, features, 0).unwrap()
}

pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// A deliberately small model for exhaustive checks.
pub fn tiny_model_config(variant: gladmamba::model::Variant) -> gladmamba::model::ModelConfig {
    use gladmamba::augment::AugmentConfig;
    use gladmamba::encoder::EncoderConfig;
    use gladmamba::vfm::BlockConfig;
    let block = BlockConfig { state_size: 2, conv_width: 2, delta_rank: 2 };
    gladmamba::model::ModelConfig {
        aug: AugmentConfig { walk_steps: 3, degree_cap: 4 },
        encoder: EncoderConfig { hidden_dim: 3, ..Default::default() },
        vfm: block,
        sgm: block,
        variant,
        ..Default::default()
    }
}
