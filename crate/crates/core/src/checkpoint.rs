//! Flat named-tensor checkpoints and atomic file writes.
//!
//! Layout (little endian): magic `GLMBCKPT`, `u32` version, `u64` length
//! of a JSON header (run config, input dims, split), the four normalizer
//! constants as raw `f64`, a `u64` tensor count, then per tensor a `u32`
//! name length, UTF-8 name, `u64` rows, `u64` cols and `rows * cols` raw
//! `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::matrix::Matrix;
use crate::model::{InputDims, Model};
use crate::objective::ScoreNormalizer;

const MAGIC: &[u8; 8] = b"GLMBCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub dims: InputDims,
    pub split: SplitSpec,
    pub normalizer: ScoreNormalizer,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    dims: InputDims,
    split: SplitSpec,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let cfg = self.run.model_config();
        cfg.validate()?;
        Ok(Model { cfg, dims: self.dims, params: self.params.clone() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { run: self.run.clone(), dims: self.dims, split: self.split.clone() })?;
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let n = &self.normalizer;
        for v in [n.mu_node, n.sigma_node, n.mu_graph, n.sigma_graph] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, m) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let normalizer = ScoreNormalizer { mu_node: r.f64()?, sigma_node: r.f64()?, mu_graph: r.f64()?, sigma_graph: r.f64()? };
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if params.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { run: header.run, dims: header.dims, split: header.split, normalizer, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temp file, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
