//! Tensor container shared by checkpoints, latent files and embedding files.
//!
//! On disk a container is a safetensors file: an 8-byte little-endian header
//! length, a JSON header mapping tensor names to dtype/shape/byte offsets, and
//! a row-major payload. All tensors are stored as `F32`. The JSON header's
//! `__metadata__` map carries string key/values; checkpoints put their model
//! configuration there under the key `config` as JSON.
//!
//! Row identifiers (for embedding sets) live in a sidecar text file next to
//! the container, `<file>.ids`, one id per line in row order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn container_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| container_err(path, format!("missing tensor `{name}`")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f32_tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            f32_tensors.push((name.clone(), t.to_dtype(DType::F32)?.contiguous()?));
        }
        let metadata: HashMap<String, String> =
            self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let info = if metadata.is_empty() { None } else { Some(metadata) };
        safetensors::serialize_to_file(f32_tensors.iter().map(|(n, t)| (n.as_str(), t)), info, path)
            .map_err(|e| container_err(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| container_err(path, e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| container_err(path, e.to_string()))?;
        let mut out = Container::new();
        for (name, view) in st.tensors() {
            let t = candle_core::safetensors::Load::load(&view, device)?;
            out.tensors.insert(name, t);
        }
        if let Some(md) = header.metadata() {
            out.metadata = md.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        }
        Ok(out)
    }
}

pub fn ids_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let side = ids_sidecar(path);
    let mut text = ids.join("\n");
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let side = ids_sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// A named matrix of row vectors plus their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Save as tensor `name` in a container with an `.ids` sidecar.
    pub fn save(&self, path: impl AsRef<Path>, name: &str) -> Result<()> {
        let path = path.as_ref();
        let mut c = Container::new();
        let flat: Vec<f32> = self.rows.iter().flatten().map(|v| *v as f32).collect();
        c.insert(name, Tensor::from_vec(flat, (self.len(), self.dim()), &Device::Cpu)?);
        c.save(path)?;
        write_ids(path, &self.ids)
    }

    /// Load tensor `name`; ids default to row indices when no sidecar exists.
    pub fn load(path: impl AsRef<Path>, name: &str) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path, &Device::Cpu)?;
        Self::from_container(&c, path, name)
    }

    pub fn from_container(c: &Container, path: &Path, name: &str) -> Result<Self> {
        let t = c.require(name, path)?;
        if t.rank() != 2 {
            return Err(container_err(path, format!("tensor `{name}` must be 2-D")));
        }
        let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let ids = if ids_sidecar(path).exists() {
            read_ids(path)?
        } else {
            (0..rows.len()).map(|i| i.to_string()).collect()
        };
        if ids.len() != rows.len() {
            return Err(container_err(
                path,
                format!("{} ids for {} rows", ids.len(), rows.len()),
            ));
        }
        Ok(Self { ids, rows })
    }
}
