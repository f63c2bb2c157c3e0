//! Run configuration.
//!
//! A config file is flat TOML: dotted keys such as `encoder.kind = "gin"`
//! or `loss.tau = 0.5`. Values not set in the file fall back to the
//! defaults for the named dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::LossConfig;
use crate::optim::AdamConfig;
use crate::spectral::{LaplacianKind, DEFAULT_EIGEN_CAP};
use crate::vfm::BlockConfig;

pub const DATA_ROOT_ENV: &str = "GLADMAMBA_DATA_ROOT";

/// Datasets whose default encoder is GIN; every other dataset uses GCN.
pub const GIN_DATASETS: [&str; 4] = ["AIDS", "DHFR", "HSE", "MMP"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Re-scorings of the test set under shuffled batch composition.
    pub shuffle_trials: usize,
    /// Re-scorings with node order permuted inside every test graph.
    pub node_order_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 128, shuffle_trials: 5, node_order_trials: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub laplacian: LaplacianKind,
    /// Eigenvalue bins over `[0, λ_max]` for the per-class curves.
    pub bins: usize,
    pub eigen_cap: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { laplacian: LaplacianKind::SymmetricNormalized, bins: 20, eigen_cap: DEFAULT_EIGEN_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub aug: AugmentConfig,
    pub encoder: EncoderConfig,
    pub vfm: BlockConfig,
    pub sgm: BlockConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub spectral: SpectralConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub train_frac: f64,
    pub variant: Variant,
    /// Forces the anomaly class instead of taking the minority.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_class: Option<i64>,
    /// Laplacian behind the Rayleigh vectors fed to the SGM.
    pub rayleigh_laplacian: LaplacianKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            data_root: None,
            out_dir: PathBuf::from("runs"),
            aug: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            vfm: BlockConfig::default(),
            sgm: BlockConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            spectral: SpectralConfig::default(),
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seeds: (0..5).collect(),
            train_frac: 0.8,
            variant: Variant::None,
            anomaly_class: None,
            rayleigh_laplacian: LaplacianKind::Unnormalized,
        }
    }
}

pub fn default_encoder_kind(dataset: &str) -> EncoderKind {
    if GIN_DATASETS.iter().any(|d| d.eq_ignore_ascii_case(dataset)) {
        EncoderKind::Gin
    } else {
        EncoderKind::Gcn
    }
}

impl RunConfig {
    pub fn for_dataset(name: &str) -> Self {
        let mut cfg = Self { dataset: name.to_string(), ..Self::default() };
        cfg.encoder.kind = default_encoder_kind(name);
        cfg
    }

    /// Defaults for `dataset` overlaid with a config file (if any) and then
    /// with `key=value` overrides. A `dataset` given here wins over the file.
    pub fn resolve(dataset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut layer = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut layer, table);
        }
        for o in overrides {
            merge(&mut layer, parse_override(o)?);
        }
        let name = match dataset {
            Some(d) => d.to_string(),
            None => match layer.get("dataset") {
                Some(toml::Value::String(s)) => s.clone(),
                _ => String::new(),
            },
        };
        layer.insert("dataset".into(), toml::Value::String(name.clone()));
        let mut base = toml::Table::try_from(Self::for_dataset(&name)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, layer);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for graph-level contrast".into()));
        }
        if self.eval.batch_size < 2 {
            return Err(Error::Config("eval.batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac must lie in (0, 1), got {}", self.train_frac)));
        }
        if self.spectral.bins == 0 {
            return Err(Error::Config("spectral.bins must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            aug: self.aug,
            encoder: self.encoder,
            vfm: self.vfm,
            sgm: self.sgm,
            loss: self.loss,
            variant: self.variant,
            rayleigh_laplacian: self.rayleigh_laplacian,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }

    /// Flag, then `GLADMAMBA_DATA_ROOT`, then the config file, then `./data`.
    pub fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(DATA_ROOT_ENV).filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        self.data_root.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    /// `<root>/<dataset>`, the directory holding the TU text files.
    pub fn dataset_dir(&self, flag: Option<&Path>) -> PathBuf {
        self.data_root(flag).join(&self.dataset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `key=value` with a TOML value; bare words are taken as strings.
pub fn parse_override(s: &str) -> Result<toml::Table> {
    let (key, value) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let line = format!("{key} = {value}");
    line.parse::<toml::Table>()
        .or_else(|_| format!("{key} = {}", toml::Value::String(value.to_string())).parse::<toml::Table>())
        .map_err(|e| Error::Config(format!("override {s:?}: {e}")))
}

/// `"0..4"` (inclusive), `"3"` or `"0,2,5"`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list {s:?}"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn per_dataset_encoder_defaults() {
        assert_eq!(RunConfig::for_dataset("AIDS").encoder.kind, EncoderKind::Gin);
        assert_eq!(RunConfig::for_dataset("mmp").encoder.kind, EncoderKind::Gin);
        assert_eq!(RunConfig::for_dataset("BZR").encoder.kind, EncoderKind::Gcn);
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.eval.batch_size), (100, 64, 128));
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!((c.loss.tau, c.loss.alpha, c.learning_rate, c.train_frac), (0.2, 1.0, 1e-3, 0.8));
        assert_eq!((c.aug.walk_steps, c.aug.degree_cap), (16, 64));
        assert_eq!((c.vfm.conv_width, c.vfm.delta_rank), (4, 4));
    }

    #[test]
    fn file_and_overrides_layer_over_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "encoder.kind = \"gcn\"\nloss.tau = 0.5\nepochs = 3\nvariant = \"no-sgm\"").unwrap();
        let c = RunConfig::resolve(Some("AIDS"), Some(f.path()), &["epochs=7".into(), "vfm.state_size=4".into()]).unwrap();
        assert_eq!(c.encoder.kind, EncoderKind::Gcn);
        assert_eq!(c.loss.tau, 0.5);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.vfm.state_size, 4);
        assert_eq!(c.variant, Variant::NoSgm);
        assert_eq!(c.dataset, "AIDS");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(Some("X"), None, &["encoder.width=3".into()]).is_err());
        assert!(RunConfig::resolve(Some("X"), None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::resolve(Some("X"), None, &["loss.tau=0".into()]).is_err());
        assert!(RunConfig::resolve(Some("X"), None, &["batch_size=1".into()]).is_err());
        assert!(RunConfig::resolve(Some("X"), None, &["variant=sideways".into()]).is_err());
    }

    #[test]
    fn serialized_config_resolves_to_itself() {
        let mut c = RunConfig::for_dataset("BZR");
        c.anomaly_class = Some(1);
        c.epochs = 2;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(c.to_toml().as_bytes()).unwrap();
        assert_eq!(RunConfig::resolve(None, Some(f.path()), &[]).unwrap(), c);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seed_list("7").unwrap(), vec![7]);
        assert_eq!(parse_seed_list("1, 3").unwrap(), vec![1, 3]);
        assert!(parse_seed_list("4..1").is_err());
        assert!(parse_seed_list("x").is_err());
    }
}
