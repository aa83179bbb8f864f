//! Tensor bundles: a JSON sidecar holding metadata plus a manifest, and a
//! `.bin` file of concatenated FMAT blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the FMAT block inside the `.bin` file.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar<M> {
    meta: M,
    data_file: String,
    tensors: Vec<TensorEntry>,
}

/// Path of the tensor payload that accompanies `json_path`.
pub fn data_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

/// Writes `meta` and `tensors` to `json_path` and its `.bin` companion.
pub fn write_bundle<M: Serialize>(json_path: &Path, meta: &M, tensors: &[(String, &Matrix)]) -> Result<()> {
    let bin = data_path(json_path);
    let file = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut w = BufWriter::new(file);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in tensors {
        m.write_fmat(&mut w).map_err(|e| Error::io(&bin, e))?;
        let bytes = m.fmat_len() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;
    let sidecar = Sidecar {
        meta,
        data_file: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors: entries,
    };
    write_json(json_path, &sidecar)
}

/// Reads a bundle, returning its metadata and tensors in manifest order.
pub fn read_bundle<M: DeserializeOwned>(json_path: &Path) -> Result<(M, Vec<(String, Matrix)>)> {
    let sidecar: Sidecar<M> = read_json(json_path)?;
    let bin = json_path.with_file_name(&sidecar.data_file);
    let file = File::open(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::with_capacity(sidecar.tensors.len());
    for entry in sidecar.tensors {
        r.seek(SeekFrom::Start(entry.offset)).map_err(|e| Error::io(&bin, e))?;
        let m = Matrix::read_fmat(&mut (&mut r).take(entry.bytes)).map_err(|e| Error::Format {
            path: bin.clone(),
            reason: format!("tensor {}: {e}", entry.name),
        })?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(Error::Format {
                path: bin,
                reason: format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    m.shape(),
                    (entry.rows, entry.cols)
                ),
            });
        }
        out.push((entry.name, m));
    }
    Ok((sidecar.meta, out))
}

/// Copies loaded tensors into `targets`, matching names and shapes exactly.
pub(crate) fn assign_tensors(
    path: &Path,
    loaded: Vec<(String, Matrix)>,
    expected: Vec<(String, &mut Matrix)>,
) -> Result<()> {
    if loaded.len() != expected.len() {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("expected {} tensors, found {}", expected.len(), loaded.len()),
        });
    }
    for ((name, m), (want, slot)) in loaded.into_iter().zip(expected) {
        if name != want || m.shape() != slot.shape() {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("tensor {name} {:?} does not fit {want} {:?}", m.shape(), slot.shape()),
            });
        }
        *slot = m;
    }
    Ok(())
}
