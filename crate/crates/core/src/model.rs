//! The full detector: per-view encoders, the view-fused block over node
//! sequences, one spectrum-guided block per view over the graph sequence,
//! and the two contrastive scales.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewPair};
use crate::dataset::{Graph, GraphBatch, GraphDataset};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{Bound, ParamStore};
use crate::matrix::Matrix;
use crate::objective::{self, LossConfig};
use crate::sgm;
use crate::spectral::{self, LaplacianKind};
use crate::tape::{Tape, Var};
use crate::vfm::{self, BlockConfig};

/// Which parts of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    #[serde(alias = "full")]
    None,
    /// VFM replaced by the identity on node embeddings.
    NoVfm,
    /// SGM replaced by the identity on graph embeddings.
    NoSgm,
    /// Both blocks bypassed.
    NoMamba,
    /// VFM selects `(B, C, Δ)` from the same view.
    NoVfSsm,
    /// SGM selects `(B, C, Δ)` from the processed graph embedding.
    NoSgSsm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::None, Variant::NoVfm, Variant::NoSgm, Variant::NoMamba, Variant::NoVfSsm, Variant::NoSgSsm];

    pub fn uses_vfm(self) -> bool {
        !matches!(self, Variant::NoVfm | Variant::NoMamba)
    }

    pub fn uses_sgm(self) -> bool {
        !matches!(self, Variant::NoSgm | Variant::NoMamba)
    }

    pub fn cross_view(self) -> bool {
        self != Variant::NoVfSsm
    }

    pub fn spectral(self) -> bool {
        self != Variant::NoSgSsm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::NoVfm => "no-vfm",
            Variant::NoSgm => "no-sgm",
            Variant::NoMamba => "no-mamba",
            Variant::NoVfSsm => "no-vf-ssm",
            Variant::NoSgSsm => "no-sg-ssm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        // `--ablate vfm` style shorthands name the removed part.
        match s.as_str() {
            "none" | "full" => Ok(Variant::None),
            "no-vfm" | "vfm" => Ok(Variant::NoVfm),
            "no-sgm" | "sgm" => Ok(Variant::NoSgm),
            "no-mamba" | "mamba" => Ok(Variant::NoMamba),
            "no-vf-ssm" | "vf-ssm" => Ok(Variant::NoVfSsm),
            "no-sg-ssm" | "sg-ssm" => Ok(Variant::NoSgSsm),
            _ => Err(Error::Config(format!("unknown ablation variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub aug: AugmentConfig,
    pub encoder: EncoderConfig,
    pub vfm: BlockConfig,
    pub sgm: BlockConfig,
    pub loss: LossConfig,
    pub variant: Variant,
    /// Laplacian used for the Rayleigh vectors that steer the SGM.
    pub rayleigh_laplacian: LaplacianKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.layers == 0 || e.hidden_dim == 0 {
            return Err(Error::Config("encoder.layers and encoder.hidden_dim must be positive".into()));
        }
        for (name, b) in [("vfm", &self.vfm), ("sgm", &self.sgm)] {
            if b.state_size == 0 || b.conv_width == 0 || b.delta_rank == 0 {
                return Err(Error::Config(format!("{name}.state_size, conv_width and delta_rank must be positive")));
            }
        }
        if self.aug.walk_steps == 0 {
            return Err(Error::Config("aug.walk_steps must be at least 1".into()));
        }
        self.loss.validate()
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

/// A graph with both views and their Rayleigh vectors precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph: Graph,
    pub views: ViewPair,
    pub rq_o: Vec<f64>,
    pub rq_a: Vec<f64>,
    pub anomaly: bool,
}

impl PreparedGraph {
    pub fn new(graph: &Graph, anomaly: bool, cfg: &ModelConfig) -> Self {
        let views = ViewPair::build(graph, &cfg.aug);
        let rq_o = spectral::rayleigh_quotient_diag(graph, &views.features_o, cfg.rayleigh_laplacian);
        let rq_a = spectral::rayleigh_quotient_diag(graph, &views.features_a, cfg.rayleigh_laplacian);
        Self { graph: graph.clone(), views, rq_o, rq_a, anomaly }
    }
}

pub fn prepare_dataset(ds: &GraphDataset, cfg: &ModelConfig) -> Vec<PreparedGraph> {
    ds.graphs.iter().map(|g| PreparedGraph::new(g, ds.is_anomaly(g), cfg)).collect()
}

/// Input widths of the two views (and hence of their Rayleigh vectors).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub o: usize,
    pub a: usize,
}

impl InputDims {
    pub fn of(g: &PreparedGraph) -> Self {
        Self { o: g.views.features_o.cols(), a: g.views.features_a.cols() }
    }
}

/// Stacked inputs for one batch.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub batch: GraphBatch,
    pub features_o: Matrix,
    pub features_a: Matrix,
    pub rq_o: Matrix,
    pub rq_a: Matrix,
}

impl BatchInputs {
    pub fn new(graphs: &[&PreparedGraph]) -> Self {
        let structure: Vec<&Graph> = graphs.iter().map(|g| &g.graph).collect();
        let fo: Vec<&Matrix> = graphs.iter().map(|g| &g.views.features_o).collect();
        let fa: Vec<&Matrix> = graphs.iter().map(|g| &g.views.features_a).collect();
        Self {
            batch: GraphBatch::new(&structure),
            features_o: GraphBatch::stack(&fo),
            features_a: GraphBatch::stack(&fa),
            rq_o: Matrix::from_rows(&graphs.iter().map(|g| g.rq_o.clone()).collect::<Vec<_>>()),
            rq_a: Matrix::from_rows(&graphs.iter().map(|g| g.rq_a.clone()).collect::<Vec<_>>()),
        }
    }
}

/// Every intermediate the forward pass produces, for training, scoring
/// and ablation diffs.
pub struct ForwardTrace<'t> {
    pub h_o: Var<'t>,
    pub h_a: Var<'t>,
    pub hg_o: Var<'t>,
    pub hg_a: Var<'t>,
    pub z_o: Var<'t>,
    pub z_a: Var<'t>,
    pub zg_o: Var<'t>,
    pub zg_a: Var<'t>,
    pub node_losses: Var<'t>,
    pub graph_losses: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: InputDims,
    pub params: ParamStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, dims: InputDims, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let width = cfg.model_dim();
        encoder::init_encoder(&mut params, "enc.o", &cfg.encoder, dims.o, rng);
        encoder::init_encoder(&mut params, "enc.a", &cfg.encoder, dims.a, rng);
        if cfg.variant.uses_vfm() {
            vfm::init_vfm(&mut params, width, &cfg.vfm, rng);
        }
        if cfg.variant.uses_sgm() {
            let spectral = cfg.variant.spectral();
            sgm::init_sgm(&mut params, "sgm.o", width, dims.o, &cfg.sgm, spectral, rng);
            sgm::init_sgm(&mut params, "sgm.a", width, dims.a, &cfg.sgm, spectral, rng);
        }
        Ok(Self { cfg, dims, params })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &Bound<'t>, inputs: &BatchInputs) -> Result<ForwardTrace<'t>> {
        let cfg = &self.cfg;
        let (h_o, hg_o) = encoder::encode_var(tape, &inputs.batch, &inputs.features_o, &cfg.encoder, params, "enc.o");
        let (h_a, hg_a) = encoder::encode_var(tape, &inputs.batch, &inputs.features_a, &cfg.encoder, params, "enc.a");
        let (z_o, z_a) = if cfg.variant.uses_vfm() { vfm::vfm_forward_var(h_o, h_a, params, cfg.variant.cross_view())? } else { (h_o, h_a) };
        let (zg_o, zg_a) = if cfg.variant.uses_sgm() {
            let spectral = cfg.variant.spectral();
            (
                sgm::sgm_forward_var(hg_o, &inputs.rq_o, params, "sgm.o", spectral)?,
                sgm::sgm_forward_var(hg_a, &inputs.rq_a, params, "sgm.a", spectral)?,
            )
        } else {
            (hg_o, hg_a)
        };
        let node_losses = objective::node_infonce_var(z_o, z_a, &inputs.batch.offsets, cfg.loss.tau)?;
        let graph_losses = objective::graph_infonce_var(zg_o, zg_a, cfg.loss.tau)?;
        Ok(ForwardTrace { h_o, h_a, hg_o, hg_a, z_o, z_a, zg_o, zg_a, node_losses, graph_losses })
    }

    /// Per-graph `(node, graph)` losses without building gradients.
    pub fn batch_losses(&self, inputs: &BatchInputs) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let trace = self.forward(&tape, &bound, inputs)?;
        let out = (trace.node_losses.value().as_slice().to_vec(), trace.graph_losses.value().as_slice().to_vec());
        Ok(out)
    }

    /// Adaptive total loss and its gradient. The scale weights come from
    /// this batch's losses unless `weights` pins them.
    pub fn loss_and_gradients(&self, inputs: &BatchInputs, weights: Option<(f64, f64)>) -> Result<LossOutput> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let trace = self.forward(&tape, &bound, inputs)?;
        let node = trace.node_losses.value().as_slice().to_vec();
        let graph = trace.graph_losses.value().as_slice().to_vec();
        let weights = weights.unwrap_or_else(|| objective::adaptive_weights(&node, &graph, self.cfg.loss.alpha));
        let total = objective::weighted_total_var(trace.node_losses, trace.graph_losses, weights);
        let loss = total.value()[(0, 0)];
        let grads = bound.gradients(&tape.backward(total));
        Ok(LossOutput { loss, weights, node_losses: node, graph_losses: graph, grads })
    }

    /// Total loss under fixed weights; used by finite-difference checks.
    pub fn weighted_loss(&self, inputs: &BatchInputs, weights: (f64, f64)) -> Result<f64> {
        let (node, graph) = self.batch_losses(inputs)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(weights.0 * mean(&node) + weights.1 * mean(&graph))
    }
}

pub struct LossOutput {
    pub loss: f64,
    pub weights: (f64, f64),
    pub node_losses: Vec<f64>,
    pub graph_losses: Vec<f64>,
    pub grads: ParamStore,
}
