//! Training, scoring and the per-seed experiment loop.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{self, GraphDataset, SplitSpec};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::model::{BatchInputs, InputDims, Model, ModelConfig, PreparedGraph, Variant};
use crate::objective::{self, ScoreNormalizer};
use crate::optim::Adam;
use crate::rng::{substream, Stream};
use crate::tape::Tape;

/// Parses `<root>/<dataset>` and assigns anomaly labels.
pub fn load_dataset(cfg: &RunConfig, data_root: Option<&Path>) -> Result<GraphDataset> {
    let ds = dataset::parse_tu_dataset(&cfg.dataset_dir(data_root), &cfg.dataset)?;
    dataset::assign_anomaly_labels(ds, cfg.anomaly_class)
}

/// Every graph of a dataset with its views and Rayleigh vectors built.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub graphs: Vec<PreparedGraph>,
    position: HashMap<usize, usize>,
}

impl PreparedDataset {
    pub fn new(ds: &GraphDataset, cfg: &ModelConfig) -> Result<Self> {
        let graphs = crate::model::prepare_dataset(ds, cfg);
        let first = graphs.first().ok_or_else(|| Error::InvalidDataset("dataset has no graphs".into()))?;
        let dims = InputDims::of(first);
        if let Some(g) = graphs.iter().find(|g| InputDims::of(g) != dims) {
            return Err(Error::InvalidDataset(format!("graph {} has view widths {:?}, expected {:?}", g.graph.id, InputDims::of(g), dims)));
        }
        let position = graphs.iter().enumerate().map(|(i, g)| (g.graph.id, i)).collect();
        Ok(Self { name: ds.name.clone(), graphs, position })
    }

    pub fn dims(&self) -> InputDims {
        InputDims::of(&self.graphs[0])
    }

    pub fn select(&self, ids: &[usize]) -> Result<Vec<&PreparedGraph>> {
        ids.iter()
            .map(|id| self.position.get(id).map(|&i| &self.graphs[i]).ok_or_else(|| Error::InvalidSplit(format!("unknown graph id {id}"))))
            .collect()
    }
}

/// Splits `n` items into `⌈n / size⌉` consecutive batches whose sizes
/// differ by at most one. Graph-level contrast draws its negatives from the
/// batch, so unequal batches would shift the loss scale of a short tail.
/// No batch of one is produced unless `n == 1`.
pub fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let k = n.div_ceil(size.max(1)).min(n / 2).max(1);
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub id: usize,
    pub anomaly: bool,
    pub loss_node: f64,
    pub loss_graph: f64,
    pub score: f64,
    /// Refined graph embeddings of the two views.
    pub embedding_o: Vec<f64>,
    pub embedding_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<GraphScore>,
    pub auc: f64,
}

/// Per-graph losses and graph embeddings, scored in consecutive batches of
/// `batch_size` in the given order. Scores are left at 0.
pub fn score_losses(model: &Model, graphs: &[&PreparedGraph], batch_size: usize) -> Result<Vec<GraphScore>> {
    let mut out = Vec::with_capacity(graphs.len());
    for r in batch_ranges(graphs.len(), batch_size) {
        let chunk = &graphs[r];
        let inputs = BatchInputs::new(chunk);
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let trace = model.forward(&tape, &bound, &inputs)?;
        let (node, graph) = (trace.node_losses.value(), trace.graph_losses.value());
        let (zo, za) = (trace.zg_o.value(), trace.zg_a.value());
        for (k, g) in chunk.iter().enumerate() {
            out.push(GraphScore {
                id: g.graph.id,
                anomaly: g.anomaly,
                loss_node: node[(k, 0)],
                loss_graph: graph[(k, 0)],
                score: 0.0,
                embedding_o: zo.row(k).to_vec(),
                embedding_a: za.row(k).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn fit_on(model: &Model, train: &[&PreparedGraph], batch_size: usize) -> Result<ScoreNormalizer> {
    let losses = score_losses(model, train, batch_size)?;
    let node: Vec<f64> = losses.iter().map(|s| s.loss_node).collect();
    let graph: Vec<f64> = losses.iter().map(|s| s.loss_graph).collect();
    objective::fit_normalizer(&node, &graph)
}

/// Standardized scores and AUC with anomalies as the positive class.
pub fn evaluate(model: &Model, norm: &ScoreNormalizer, graphs: &[&PreparedGraph], batch_size: usize) -> Result<ScoreReport> {
    let mut scores = score_losses(model, graphs, batch_size)?;
    for s in &mut scores {
        s.score = objective::anomaly_score(s.loss_node, s.loss_graph, norm);
    }
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scores.iter().map(|s| s.anomaly).collect();
    let auc = objective::auc(&values, &labels)?;
    Ok(ScoreReport { scores, auc })
}

/// AUCs of the test set re-scored under shuffled batch composition.
pub fn shuffled_eval_aucs(model: &Model, norm: &ScoreNormalizer, graphs: &[&PreparedGraph], batch_size: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed, Stream::Diagnostic);
    let mut order = graphs.to_vec();
    (0..trials)
        .map(|_| {
            order.shuffle(&mut rng);
            Ok(evaluate(model, norm, &order, batch_size)?.auc)
        })
        .collect()
}

/// AUCs of the test set with node order randomly permuted inside every graph.
pub fn node_order_aucs(model: &Model, norm: &ScoreNormalizer, graphs: &[&PreparedGraph], batch_size: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed.wrapping_add(1 << 32), Stream::Diagnostic);
    (0..trials)
        .map(|_| {
            let permuted: Vec<PreparedGraph> = graphs
                .iter()
                .map(|g| {
                    let mut perm: Vec<usize> = (0..g.graph.node_count).collect();
                    perm.shuffle(&mut rng);
                    PreparedGraph::new(&g.graph.permuted(&perm), g.anomaly, &model.cfg)
                })
                .collect();
            let refs: Vec<&PreparedGraph> = permuted.iter().collect();
            Ok(evaluate(model, norm, &refs, batch_size)?.auc)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub model: Model,
    /// Mean adaptive loss over the batches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl TrainedRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Trains one seed on the normal training graphs, then fits the score
/// normalizer over the whole training set.
pub fn train_seed(cfg: &RunConfig, ds: &GraphDataset, data: &PreparedDataset, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let split = dataset::make_split(ds, seed, cfg.train_frac)?;
    let train = data.select(&split.train_ids)?;
    if train.len() < 2 {
        return Err(Error::BatchTooSmall(train.len()));
    }
    let mut model = Model::new(cfg.model_config(), data.dims(), &mut substream(seed, Stream::Init))?;
    let mut opt = Adam::new(cfg.adam());
    let mut shuffle = substream(seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let ranges = batch_ranges(order.len(), cfg.batch_size);
        for (b, r) in ranges.iter().enumerate() {
            let batch: Vec<&PreparedGraph> = order[r.clone()].iter().map(|&i| train[i]).collect();
            let out = model.loss_and_gradients(&BatchInputs::new(&batch), None)?;
            if !out.loss.is_finite() || out.grads.iter().any(|(_, g)| !g.is_finite()) {
                log::error!("non-finite loss {} (weights {:?}) at epoch {epoch}, batch {b}", out.loss, out.weights);
                return Err(Error::Diverged { epoch, batch: b });
            }
            opt.step(&mut model.params, &out.grads);
            total += out.loss;
        }
        let mean = total / ranges.len() as f64;
        log::debug!("{} seed {seed} epoch {epoch}: loss {mean:.6}", cfg.dataset);
        epoch_losses.push(mean);
    }
    let normalizer = fit_on(&model, &train, cfg.eval.batch_size)?;
    let checkpoint = Checkpoint { run: cfg.clone(), dims: model.dims, split, normalizer, params: model.params.clone() };
    Ok(TrainedRun { checkpoint, model, epoch_losses, wall_clock_secs: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eval_shuffle_aucs: Vec<f64>,
    pub eval_shuffle_auc_std: f64,
    pub node_order_aucs: Vec<f64>,
    pub node_order_auc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub auc: f64,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub epochs: usize,
    pub train_graphs: usize,
    pub test_graphs: usize,
    pub diagnostics: Diagnostics,
}

pub const METRICS_SCHEMA: &str = "gladmamba.metrics/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: String,
    pub dataset: String,
    pub variant: Variant,
    pub encoder: EncoderKind,
    pub anomaly_class: i64,
    pub anomaly_ratio: f64,
    pub parameter_count: usize,
    pub seeds: Vec<SeedRecord>,
    pub auc_mean: f64,
    /// Population standard deviation across seeds.
    pub auc_std: f64,
    pub total_wall_clock_secs: f64,
    pub config: RunConfig,
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,auc,final_loss,wall_clock_secs,train_graphs,test_graphs,eval_shuffle_auc_std,node_order_auc_std\n");
        for r in &self.seeds {
            let loss = r.final_loss.map(|l| l.to_string()).unwrap_or_default();
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.seed, r.auc, loss, r.wall_clock_secs, r.train_graphs, r.test_graphs, r.diagnostics.eval_shuffle_auc_std, r.diagnostics.node_order_auc_std
            );
        }
        s += &format!("mean,{},,,,,,\nstd,{},,,,,,\n", self.auc_mean, self.auc_std);
        s
    }

    /// Checks the fields a downstream reader relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("metrics record: {m}")));
        if self.schema != METRICS_SCHEMA {
            return bad(format!("schema {:?}", self.schema));
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        for r in &self.seeds {
            if !(0.0..=1.0).contains(&r.auc) || !(r.wall_clock_secs >= 0.0) {
                return bad(format!("seed {} has auc {} and wall clock {}", r.seed, r.auc, r.wall_clock_secs));
            }
            if r.final_loss.is_some_and(|l| !l.is_finite()) || (r.epochs > 0) != r.final_loss.is_some() {
                return bad(format!("seed {} final loss {:?} with {} epochs", r.seed, r.final_loss, r.epochs));
            }
        }
        let aucs: Vec<f64> = self.seeds.iter().map(|r| r.auc).collect();
        let (mean, std) = objective::mean_std(&aucs);
        if (mean - self.auc_mean).abs() > 1e-12 || (std - self.auc_std).abs() > 1e-12 {
            return bad(format!("aggregate {}±{} does not match seeds ({mean}±{std})", self.auc_mean, self.auc_std));
        }
        Ok(())
    }
}

/// `<out_dir>/<dataset>/<variant>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.dataset).join(cfg.variant.as_str())
}

pub fn scores_csv(report: &ScoreReport) -> String {
    let width = |f: fn(&GraphScore) -> usize| report.scores.first().map(f).unwrap_or(0);
    let (wo, wa) = (width(|s| s.embedding_o.len()), width(|s| s.embedding_a.len()));
    let mut s = String::from("id,anomaly,loss_node,loss_graph,score");
    (0..wo).for_each(|i| s += &format!(",z_o{i}"));
    (0..wa).for_each(|i| s += &format!(",z_a{i}"));
    s.push('\n');
    for g in &report.scores {
        s += &format!("{},{},{},{},{}", g.id, u8::from(g.anomaly), g.loss_node, g.loss_graph, g.score);
        for v in g.embedding_o.iter().chain(&g.embedding_a) {
            s += &format!(",{v}");
        }
        s.push('\n');
    }
    s
}

/// Trains and evaluates every seed in `cfg.seeds`. With `out` set, writes
/// per-seed checkpoints and score/embedding dumps plus the metrics record.
pub fn run_experiment(cfg: &RunConfig, ds: &GraphDataset, out: Option<&Path>) -> Result<MetricsRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let data = PreparedDataset::new(ds, &cfg.model_config())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut parameter_count = 0;
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, ds, &data, seed)?;
        parameter_count = run.model.params.scalar_count();
        let split = &run.checkpoint.split;
        let test = data.select(&split.test_ids)?;
        let norm = &run.checkpoint.normalizer;
        let report = evaluate(&run.model, norm, &test, cfg.eval.batch_size)?;
        let shuffle = shuffled_eval_aucs(&run.model, norm, &test, cfg.eval.batch_size, cfg.eval.shuffle_trials, seed)?;
        let node_order = node_order_aucs(&run.model, norm, &test, cfg.eval.batch_size, cfg.eval.node_order_trials, seed)?;
        log::info!("{} [{}] seed {seed}: AUC {:.4} ({:.1}s)", cfg.dataset, cfg.variant, report.auc, run.wall_clock_secs);
        if let Some(out) = out {
            let dir = out.join(format!("seed{seed}"));
            run.checkpoint.save(&dir.join("model.ckpt"))?;
            atomic_write(&dir.join("scores.csv"), scores_csv(&report).as_bytes())?;
            atomic_write(&dir.join("split.json"), &serde_json::to_vec_pretty(split)?)?;
        }
        seeds.push(SeedRecord {
            seed,
            auc: report.auc,
            final_loss: run.final_loss(),
            wall_clock_secs: run.wall_clock_secs,
            epochs: cfg.epochs,
            train_graphs: split.train_ids.len(),
            test_graphs: split.test_ids.len(),
            diagnostics: Diagnostics {
                eval_shuffle_auc_std: objective::mean_std(&shuffle).1,
                eval_shuffle_aucs: shuffle,
                node_order_auc_std: objective::mean_std(&node_order).1,
                node_order_aucs: node_order,
            },
        });
    }
    let aucs: Vec<f64> = seeds.iter().map(|r| r.auc).collect();
    let (auc_mean, auc_std) = objective::mean_std(&aucs);
    let record = MetricsRecord {
        schema: METRICS_SCHEMA.into(),
        dataset: cfg.dataset.clone(),
        variant: cfg.variant,
        encoder: cfg.encoder.kind,
        anomaly_class: ds.anomaly_class.expect("labels assigned before training"),
        anomaly_ratio: ds.anomaly_ratio(),
        parameter_count,
        seeds,
        auc_mean,
        auc_std,
        total_wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    if let Some(out) = out {
        atomic_write(&out.join("metrics.json"), &serde_json::to_vec_pretty(&record)?)?;
        atomic_write(&out.join("metrics.csv"), record.to_csv().as_bytes())?;
    }
    Ok(record)
}

/// Re-scores the test split stored in a checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &GraphDataset) -> Result<ScoreReport> {
    let model = ckpt.model()?;
    let data = PreparedDataset::new(ds, &model.cfg)?;
    if data.dims() != ckpt.dims {
        return Err(Error::Shape(format!("dataset view widths {:?} do not match checkpoint {:?}", data.dims(), ckpt.dims)));
    }
    check_split(&ckpt.split, ds)?;
    let test = data.select(&ckpt.split.test_ids)?;
    evaluate(&model, &ckpt.normalizer, &test, ckpt.run.eval.batch_size)
}

fn check_split(split: &SplitSpec, ds: &GraphDataset) -> Result<()> {
    let known = ds.graphs.len();
    if split.train_ids.iter().chain(&split.test_ids).count() != known {
        return Err(Error::InvalidSplit(format!("checkpoint split covers {} graphs, dataset has {known}", split.train_ids.len() + split.test_ids.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_balanced() {
        assert_eq!(batch_ranges(5, 2), vec![0..3, 3..5]);
        assert_eq!(batch_ranges(4, 2), vec![0..2, 2..4]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
        assert_eq!(batch_ranges(0, 4), Vec::<Range<usize>>::new());
        assert_eq!(batch_ranges(130, 128), vec![0..65, 65..130]);
        assert_eq!(batch_ranges(7, 3), vec![0..3, 3..5, 5..7]);
    }
}
