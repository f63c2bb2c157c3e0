#![allow(clippy::needless_range_loop)]

mod common;

use gladmamba::augment::{build_feature_view, build_structure_view};
use gladmamba::dataset::{assign_anomaly_labels, make_split, Graph, GraphBatch, GraphDataset};
use gladmamba::encoder::{encode, init_encoder, EncoderConfig, EncoderKind};
use gladmamba::layers::ParamStore;
use gladmamba::objective::auc;
use gladmamba::spectral::{rayleigh_quotient_diag, LaplacianKind};
use gladmamba::train::batch_ranges;
use gladmamba::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64, n: usize, p: f64, dim: usize) -> Graph {
    common::random_graph(&mut ChaCha8Rng::seed_from_u64(seed), n, p, dim)
}

fn encoder(kind: EncoderKind, input_dim: usize, seed: u64) -> (EncoderConfig, ParamStore) {
    let cfg = EncoderConfig { kind, layers: 2, hidden_dim: 5, gin_eps: 0.3 };
    let mut store = ParamStore::new();
    init_encoder(&mut store, "enc", &cfg, input_dim, &mut ChaCha8Rng::seed_from_u64(seed));
    (cfg, store)
}

fn kind() -> impl Strategy<Value = EncoderKind> {
    prop_oneof![Just(EncoderKind::Gcn), Just(EncoderKind::Gin)]
}

fn laplacian() -> impl Strategy<Value = LaplacianKind> {
    prop_oneof![Just(LaplacianKind::Unnormalized), Just(LaplacianKind::SymmetricNormalized)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rayleigh_quotient_ignores_signal_scale(seed in any::<u64>(), n in 2usize..20, p in 0.1f64..0.9, scale in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3], kind in laplacian()) {
        let g = graph(seed, n, p, 3);
        let base = rayleigh_quotient_diag(&g, &g.features, kind);
        let scaled = rayleigh_quotient_diag(&g, &g.features.scale(scale), kind);
        let max_degree = g.degrees().into_iter().max().unwrap_or(0) as f64;
        let upper = match kind {
            LaplacianKind::Unnormalized => 2.0 * max_degree,
            LaplacianKind::SymmetricNormalized => 2.0,
        };
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            prop_assert!(*a >= -1e-12 && *a <= upper + 1e-12, "{a} outside [0, {upper}]");
        }
    }

    #[test]
    fn auc_depends_only_on_score_order(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-5i32..5)) * 0.5).collect();
        let base = auc(&scores, &labels).unwrap();
        let monotone: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 + 11.0).collect();
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert_eq!(base, auc(&monotone, &labels).unwrap());
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn split_keeps_anomalies_out_of_training(seed in any::<u64>(), normals in 2usize..60, anomalies in 1usize..20, frac in 0.05f64..0.95) {
        let graphs: Vec<Graph> = (0..normals + anomalies)
            .map(|id| Graph::new(id, 1, [], Matrix::zeros(1, 0), i64::from(id >= normals)).unwrap())
            .collect();
        let ds = assign_anomaly_labels(GraphDataset::from_graphs("labels", graphs), Some(1)).unwrap();
        let n_train = (frac * normals as f64).floor() as usize;
        let split = match make_split(&ds, seed, frac) {
            Ok(s) => s,
            Err(_) => {
                prop_assert!(n_train == 0 || n_train == normals);
                return Ok(());
            }
        };
        prop_assert_eq!(split.train_ids.len(), n_train);
        prop_assert!(split.train_ids.iter().all(|&id| id < normals));
        let mut all: Vec<usize> = split.train_ids.iter().chain(&split.test_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..normals + anomalies).collect::<Vec<_>>());
        prop_assert!(split.test_ids.iter().any(|&id| id < normals));
        prop_assert_eq!(&split, &make_split(&ds, seed, frac).unwrap());
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..15, p in 0.1f64..0.8, kind in kind()) {
        let g = graph(seed, n, p, 4);
        let perm = common::random_permutation(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), n);
        let h = g.permuted(&perm);
        let (cfg, store) = encoder(kind, 4, seed);
        let (nodes, pooled) = encode(&GraphBatch::new(&[&g]), &g.features, &cfg, &store, "enc");
        let (nodes_p, pooled_p) = encode(&GraphBatch::new(&[&h]), &h.features, &cfg, &store, "enc");
        for v in 0..n {
            for (a, b) in nodes.row(v).iter().zip(nodes_p.row(perm[v])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        prop_assert!(pooled.max_abs_diff(&pooled_p) < 1e-12);
    }

    #[test]
    fn batching_matches_graph_by_graph_encoding(seed in any::<u64>(), sizes in prop::collection::vec(1usize..10, 1..6), kind in kind()) {
        let graphs: Vec<Graph> = sizes.iter().enumerate().map(|(i, &n)| graph(seed.wrapping_add(i as u64), n, 0.4, 3)).collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        let (cfg, store) = encoder(kind, 3, seed);
        let batch = GraphBatch::new(&refs);
        let features = GraphBatch::stack(&graphs.iter().map(|g| &g.features).collect::<Vec<_>>());
        let (nodes, pooled) = encode(&batch, &features, &cfg, &store, "enc");
        for (k, g) in graphs.iter().enumerate() {
            let (n1, p1) = encode(&GraphBatch::new(&[g]), &g.features, &cfg, &store, "enc");
            let rows = batch.graph_nodes(k);
            prop_assert!(nodes.slice_rows(rows.start, rows.end).max_abs_diff(&n1) < 1e-10);
            prop_assert!(pooled.slice_rows(k, k + 1).max_abs_diff(&p1) < 1e-10);
        }
    }

    #[test]
    fn structure_view_holds_return_probabilities(seed in any::<u64>(), n in 1usize..25, p in 0.0f64..0.9, steps in 1usize..12) {
        let g = graph(seed, n, p, 0);
        let view = build_structure_view(&g, steps);
        prop_assert_eq!(view.shape(), (n, steps));
        prop_assert!(view.as_slice().iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        // No self loops, so a walk cannot return after one step.
        prop_assert!(view.column(0).iter().all(|&x| x == 0.0));
        let degrees = g.degrees();
        if steps >= 2 {
            let neighbors = g.neighbors();
            for v in 0..n {
                let expected: f64 = neighbors[v].iter().map(|&u| 1.0 / (degrees[v] * degrees[u]) as f64).sum();
                prop_assert!((view[(v, 1)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degree_view_is_one_hot(seed in any::<u64>(), n in 1usize..25, p in 0.0f64..0.9, cap in 1usize..8) {
        let g = graph(seed, n, p, 0);
        let view = build_feature_view(&g, cap);
        prop_assert_eq!(view.shape(), (n, cap + 1));
        for (v, d) in g.degrees().into_iter().enumerate() {
            prop_assert_eq!(view.row(v).iter().sum::<f64>(), 1.0);
            prop_assert_eq!(view[(v, d.min(cap))], 1.0);
        }
    }

    #[test]
    fn batch_ranges_are_balanced_and_complete(n in 1usize..500, size in 2usize..130) {
        let ranges = batch_ranges(n, size);
        prop_assert_eq!(ranges.first().unwrap().start, 0);
        prop_assert_eq!(ranges.last().unwrap().end, n);
        prop_assert!(ranges.windows(2).all(|w| w[0].end == w[1].start));
        let lens: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let (lo, hi) = (*lens.iter().min().unwrap(), *lens.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert!(n == 1 || lo >= 2, "{lens:?}");
        prop_assert!(hi <= size || ranges.len() == n / 2);
    }
}
