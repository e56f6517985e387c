//! Named parameter sets and their on-disk checkpoint format.
//!
//! A checkpoint is two files: a blob of little-endian `f64` values laid out
//! tensor after tensor, and a JSON manifest mapping each tensor name to its
//! shape and element offset inside the blob. The manifest also carries a
//! free-form `meta` object that callers use for architecture descriptors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "caforge-params";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements (not bytes) from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub total_elements: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(TensorError::invalid("params", format!("duplicate parameter {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on `g`, in insertion order. With `track` the
    /// leaves collect gradients; otherwise they are constants.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if track {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Gradients for bound leaves, flattened in the same order as
    /// [`ParamStore::flatten`].
    pub fn flatten_grads(&self, grads: &Gradients, bound: &[Var]) -> Vec<f64> {
        assert_eq!(bound.len(), self.entries.len());
        let mut out = Vec::with_capacity(self.num_scalars());
        for ((_, t), &v) in self.entries.iter().zip(bound) {
            match grads.get(v) {
                Some(gt) => out.extend_from_slice(gt.data()),
                None => out.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for (_, t) in &self.entries {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn manifest(&self, blob: &str, meta: serde_json::Value) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            dtype: "f64".into(),
            byte_order: "little".into(),
            blob: blob.into(),
            total_elements: offset,
            tensors,
            meta,
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let blob = format!("{stem}.bin");
        fs::write(dir.join(&blob), self.to_bytes())?;
        let manifest = self.manifest(&blob, meta);
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    pub fn from_bytes(manifest: &Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.dtype != "f64" || manifest.byte_order != "little" {
            return Err(TensorError::Checkpoint(format!(
                "unsupported encoding {}/{}",
                manifest.dtype, manifest.byte_order
            )));
        }
        if bytes.len() != manifest.total_elements * 8 {
            return Err(TensorError::Checkpoint(format!(
                "blob holds {} bytes, manifest expects {}",
                bytes.len(),
                manifest.total_elements * 8
            )));
        }
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > manifest.total_elements {
                return Err(TensorError::Checkpoint(format!("tensor {} overruns the blob", e.name)));
            }
            let data = bytes[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn load(manifest_path: &Path) -> Result<(Self, Manifest)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let bytes = fs::read(dir.join(&manifest.blob))?;
        let store = Self::from_bytes(&manifest, &bytes)?;
        Ok((store, manifest))
    }
}
