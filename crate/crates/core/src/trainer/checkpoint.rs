//! Checkpoint file: `OSMSLCK1`, a little-endian u64 manifest length, the
//! JSON manifest, then every tensor as little-endian f64 in store order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{HeadKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::label_scheme::LabelScheme;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OSMSLCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    scheme_fingerprint: String,
    scheme: LabelScheme,
    head: HeadKind,
    dims: [usize; 2],
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0u64;
    let tensors = model
        .store
        .entries()
        .iter()
        .map(|e| {
            let t = TensorEntry {
                name: e.name.clone(),
                shape: [e.value.rows(), e.value.cols()],
                dtype: "f64".into(),
                offset,
                trainable: e.trainable,
            };
            offset += 8 * e.value.len() as u64;
            t
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        scheme_fingerprint: model.scheme.fingerprint(),
        scheme: model.scheme.clone(),
        head: model.kind,
        dims: [model.dims.0, model.dims.1],
        config: model.config.clone(),
        tensors,
    })?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    for e in model.store.entries() {
        for x in e.value.as_slice() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Loads a checkpoint, rebuilding the model structure from its manifest.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file truncated before manifest".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion {
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
    let scheme = manifest.scheme.validated()?;
    if scheme.fingerprint() != manifest.scheme_fingerprint {
        return Err(Error::Checkpoint("scheme fingerprint does not match stored scheme".into()));
    }
    let dims = (manifest.dims[0], manifest.dims[1]);
    let mut model = Model::new(manifest.head, &scheme, &manifest.config, dims, 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            model.store.len(),
            manifest.tensors.len()
        )));
    }
    let data = &bytes[body..];
    let ids: Vec<_> = model.store.ids().collect();
    let mut expected_offset = 0u64;
    for (id, t) in ids.into_iter().zip(&manifest.tensors) {
        let (name, shape) = (model.store.name(id).to_string(), model.store.get(id).shape());
        if t.name != name || (t.shape[0], t.shape[1]) != shape || t.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} {} does not match model tensor {name:?} {shape:?}",
                t.name, t.shape, t.dtype
            )));
        }
        if t.offset != expected_offset {
            return Err(Error::Checkpoint(format!("tensor {name:?} has offset {}", t.offset)));
        }
        let n = shape.0 * shape.1;
        let start = t.offset as usize;
        let chunk = data
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor data truncated at {name:?}")))?;
        for (dst, src) in model.store.get_mut(id).as_mut_slice().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
        expected_offset += 8 * n as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            data.len() as u64 - expected_offset
        )));
    }
    Ok(model)
}
