//! Binary checkpoint container.
//!
//! Layout (all integers little-endian): magic `FBAG`, format version (u32),
//! tensor count (u32), then per tensor: name length (u32), UTF-8 name, rank
//! (u32), dims (u64 each), f32 payload row-major.
//!
//! Model tensors use the canonical names of [`crate::model::TENSOR_NAMES`].
//! When optimizer state is included, its tensors follow under the same
//! names suffixed `.m` / `.v`, plus the scalar step counter as a rank-0
//! tensor named `adam.t`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{Gradients, ModelDims, ModelWeights, TENSOR_NAMES};
use crate::optim::{AdamHyper, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBAG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: String, version: u32 },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("{path}: tensor name is not valid UTF-8")]
    BadName { path: String },
    #[error("{path}: missing tensor {name}")]
    MissingTensor { path: String, name: String },
    #[error("{path}: unexpected tensor {name}")]
    UnknownTensor { path: String, name: String },
    #[error("{path}: tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        path: String,
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{path}: non-finite value in tensor {name}")]
    NonFinite { path: String, name: String },
}

/// Optimizer moments read back from a checkpoint. Hyperparameters are not
/// stored; combine with an [`AdamHyper`] to rebuild an [`AdamState`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerTensors {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl OptimizerTensors {
    pub fn into_state(self, hyper: AdamHyper) -> AdamState {
        AdamState {
            hyper,
            t: self.t,
            m: self.m,
            v: self.v,
        }
    }
}

struct Writer<'a> {
    out: BufWriter<File>,
    path: &'a Path,
}

impl<'a> Writer<'a> {
    fn put(&mut self, bytes: &[u8]) -> Result<(), CheckpointError> {
        self.out.write_all(bytes).map_err(|e| CheckpointError::Io {
            path: self.path.display().to_string(),
            source: e,
        })
    }

    fn put_tensor(
        &mut self,
        name: &str,
        shape: &[usize],
        values: impl Iterator<Item = f64>,
    ) -> Result<(), CheckpointError> {
        self.put(&(name.len() as u32).to_le_bytes())?;
        self.put(name.as_bytes())?;
        self.put(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            self.put(&(d as u64).to_le_bytes())?;
        }
        for v in values {
            self.put(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Write weights (and optionally optimizer state) to `path`.
pub fn save_checkpoint(
    path: &Path,
    weights: &ModelWeights,
    optimizer: Option<&AdamState>,
) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut writer = Writer {
        out: BufWriter::new(file),
        path,
    };

    let tensor_count = 10 + if optimizer.is_some() { 21 } else { 0 };
    writer.put(CHECKPOINT_MAGIC)?;
    writer.put(&CHECKPOINT_VERSION.to_le_bytes())?;
    writer.put(&(tensor_count as u32).to_le_bytes())?;

    for (name, tensor) in weights.tensors() {
        writer.put_tensor(name, tensor.shape(), tensor.iter().cloned())?;
    }
    if let Some(state) = optimizer {
        for (name, tensor) in state.m.tensors() {
            writer.put_tensor(&format!("{name}.m"), tensor.shape(), tensor.iter().cloned())?;
        }
        for (name, tensor) in state.v.tensors() {
            writer.put_tensor(&format!("{name}.v"), tensor.shape(), tensor.iter().cloned())?;
        }
        writer.put_tensor("adam.t", &[], std::iter::once(state.t as f64))?;
    }
    writer
        .out
        .flush()
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Read a checkpoint back. Model dimensions are reconstructed from the
/// stored tensor shapes; the projection activation is the default.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelWeights, Option<OptimizerTensors>), CheckpointError> {
    let path_str = || path.display().to_string();
    let file = File::open(path).map_err(|e| CheckpointError::Io {
        path: path_str(),
        source: e,
    })?;
    let mut reader = BufReader::new(file);

    let truncated = || CheckpointError::Truncated { path: path_str() };
    let mut read_exact = |buf: &mut [u8]| -> Result<(), CheckpointError> {
        reader.read_exact(buf).map_err(|_| truncated())
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { path: path_str() });
    }
    let mut u32_buf = [0u8; 4];
    read_exact(&mut u32_buf)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path_str(),
            version,
        });
    }
    read_exact(&mut u32_buf)?;
    let tensor_count = u32::from_le_bytes(u32_buf) as usize;

    let mut tensors: HashMap<String, RawTensor> = HashMap::new();
    for _ in 0..tensor_count {
        read_exact(&mut u32_buf)?;
        let name_len = u32::from_le_bytes(u32_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::BadName { path: path_str() })?;

        read_exact(&mut u32_buf)?;
        let rank = u32::from_le_bytes(u32_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64_buf = [0u8; 8];
        for _ in 0..rank {
            read_exact(&mut u64_buf)?;
            shape.push(u64::from_le_bytes(u64_buf) as usize);
        }
        let len: usize = shape.iter().product::<usize>().max(1);
        let mut payload = vec![0u8; len * 4];
        read_exact(&mut payload)?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                path: path_str(),
                name,
            });
        }
        tensors.insert(name, RawTensor { shape, values });
    }
    let mut trailing = [0u8; 1];
    if reader
        .read(&mut trailing)
        .map_err(|e| CheckpointError::Io {
            path: path_str(),
            source: e,
        })?
        != 0
    {
        return Err(CheckpointError::Truncated { path: path_str() });
    }

    // Reconstruct dimensions from canonical tensor shapes.
    let shape_of = |name: &str| -> Result<&RawTensor, CheckpointError> {
        tensors.get(name).ok_or_else(|| CheckpointError::MissingTensor {
            path: path_str(),
            name: name.to_string(),
        })
    };
    let proj = shape_of("proj.weight")?;
    let attn = shape_of("attn_u.weight")?;
    let pred = shape_of("pred.weight")?;
    if proj.shape.len() != 2 || attn.shape.len() != 2 || pred.shape.len() != 2 {
        return Err(CheckpointError::ShapeMismatch {
            path: path_str(),
            name: "proj.weight".into(),
            expected: vec![2],
            got: vec![proj.shape.len()],
        });
    }
    let dims = ModelDims::new(proj.shape[1], proj.shape[0], attn.shape[0], pred.shape[0]);

    let has_optimizer = tensors.contains_key("adam.t");
    let expected: usize = 10 + if has_optimizer { 21 } else { 0 };
    if tensors.len() != expected {
        let known: std::collections::HashSet<String> = TENSOR_NAMES
            .iter()
            .flat_map(|n| {
                [
                    n.to_string(),
                    format!("{n}.m"),
                    format!("{n}.v"),
                ]
            })
            .chain(std::iter::once("adam.t".to_string()))
            .collect();
        for name in tensors.keys() {
            if !known.contains(name) {
                return Err(CheckpointError::UnknownTensor {
                    path: path_str(),
                    name: name.clone(),
                });
            }
        }
        return Err(CheckpointError::MissingTensor {
            path: path_str(),
            name: "(incomplete tensor set)".into(),
        });
    }

    let mut take = |name: &str, expected_shape: &[usize]| -> Result<Vec<f64>, CheckpointError> {
        let raw = tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingTensor {
                path: path_str(),
                name: name.to_string(),
            })?;
        if raw.shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch {
                path: path_str(),
                name: name.to_string(),
                expected: expected_shape.to_vec(),
                got: raw.shape,
            });
        }
        Ok(raw.values)
    };

    let mut weights = ModelWeights::zeros(dims);
    for (name, mut tensor) in weights.tensors_mut() {
        let shape = tensor.shape().to_vec();
        let values = take(name, &shape)?;
        for (slot, value) in tensor.iter_mut().zip(values) {
            *slot = value;
        }
    }

    let optimizer = if has_optimizer {
        let mut m = Gradients::zeros(dims);
        for (name, mut tensor) in m.tensors_mut() {
            let shape = tensor.shape().to_vec();
            let values = take(&format!("{name}.m"), &shape)?;
            for (slot, value) in tensor.iter_mut().zip(values) {
                *slot = value;
            }
        }
        let mut v = Gradients::zeros(dims);
        for (name, mut tensor) in v.tensors_mut() {
            let shape = tensor.shape().to_vec();
            let values = take(&format!("{name}.v"), &shape)?;
            for (slot, value) in tensor.iter_mut().zip(values) {
                *slot = value;
            }
        }
        let t = take("adam.t", &[])?[0] as u64;
        Some(OptimizerTensors { m, v, t })
    } else {
        None
    };

    Ok((weights, optimizer))
}
