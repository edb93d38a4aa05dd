//! Checkpoint archive: named f64 tensors plus a JSON metadata document in a
//! single file. Loading a checkpoint into a matching module restores outputs
//! bit-exactly; digests identify parameter sets for compatibility checks and
//! stage caching.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KfError, Result};
use crate::nn::Parameterized;

const MAGIC: &[u8; 8] = b"KFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// An in-memory checkpoint: metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Snapshot every parameter of a module.
    pub fn from_params(module: &impl Parameterized, meta: serde_json::Value) -> Self {
        let mut tensors = BTreeMap::new();
        module.for_each_param("", &mut |name, view| {
            tensors.insert(name.to_string(), view.to_owned());
        });
        Self { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    /// Copy tensors back into a module. Names and shapes must match exactly.
    pub fn load_into(&self, module: &mut impl Parameterized) -> Result<()> {
        let mut missing = Vec::new();
        let mut seen = 0usize;
        let mut err = None;
        module.visit_params("", &mut |name, mut w, _| {
            match self.tensors.get(name) {
                Some(t) if t.shape() == w.shape() => {
                    w.assign(t);
                    seen += 1;
                }
                Some(t) => {
                    err = Some(KfError::shape(format!(
                        "tensor '{name}': checkpoint {:?} vs module {:?}",
                        t.shape(),
                        w.shape()
                    )));
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(KfError::Format(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )));
        }
        if seen != self.tensors.len() {
            return Err(KfError::Format(format!(
                "checkpoint has {} tensors, module consumed {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Content digest over (name, shape, little-endian data) in name order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &dim in tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for tensor in self.tensors.values() {
            for &v in tensor.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|_| KfError::NotFound(format!("checkpoint {}", path.display())))?,
        );
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(KfError::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        let mut tensors = BTreeMap::new();
        for info in header.tensors {
            let count: usize = info.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                file.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = ArrayD::from_shape_vec(info.shape.clone(), data)
                .map_err(|e| KfError::Format(format!("tensor '{}': {e}", info.name)))?;
            tensors.insert(info.name, tensor);
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

/// Digest of a module's current parameters (no metadata).
pub fn param_digest(module: &impl Parameterized) -> String {
    Checkpoint::from_params(module, serde_json::Value::Null).digest()
}

/// Digest of arbitrary bytes (stage caching, config provenance).
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Backbone, BackboneKind, BackboneSpec};
    use ndarray::Array4;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::Cnn3,
            input_shape: (1, 8, 8),
            channels: vec![3, 3, 4],
            feature_dim: 5,
        }
    }

    #[test]
    fn round_trip_restores_outputs_bit_exactly() {
        let bb = Backbone::init(&spec(), 21).unwrap();
        let ckpt = Checkpoint::from_params(&bb, serde_json::json!({"seed": 21}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.write(&path).unwrap();
        let loaded = Checkpoint::read(&path).unwrap();
        assert_eq!(loaded.digest(), ckpt.digest());
        let mut fresh = Backbone::init(&spec(), 999).unwrap();
        loaded.load_into(&mut fresh).unwrap();
        let x = Array4::from_elem((2, 1, 8, 8), 0.25);
        let a = bb.forward(&x).unwrap();
        let b = fresh.forward(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn digest_tracks_parameter_changes() {
        let mut bb = Backbone::init(&spec(), 22).unwrap();
        let before = param_digest(&bb);
        assert_eq!(before, param_digest(&bb));
        bb.fc.b[0] += 1e-9;
        assert_ne!(before, param_digest(&bb));
    }

    #[test]
    fn mismatched_module_rejected() {
        let bb = Backbone::init(&spec(), 23).unwrap();
        let ckpt = Checkpoint::from_params(&bb, serde_json::Value::Null);
        let mut other_spec = spec();
        other_spec.channels = vec![3, 3, 5];
        let mut other = Backbone::init(&other_spec, 23).unwrap();
        assert!(ckpt.load_into(&mut other).is_err());
    }
}
