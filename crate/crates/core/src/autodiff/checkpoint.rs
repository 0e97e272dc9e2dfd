//! Checkpoint container: a JSON header followed by raw little-endian f64
//! buffers.
//!
//! Layout: 8-byte magic `ORDCKPT1`, u64-LE header length, UTF-8 JSON header,
//! then the concatenated tensor buffers. The header lists every tensor's
//! name, shape, dtype and byte offset (relative to the start of the data
//! section) plus an arbitrary `meta` object for model metadata such as
//! normalizer statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ORDCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorRecord>,
    meta: serde_json::Value,
}

/// Write all store entries plus a metadata object.
pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for entry in store.entries() {
        records.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            trainable: entry.trainable,
        });
        offset += (entry.value.numel() * 8) as u64;
    }
    let header = Header {
        tensors: records,
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for entry in store.entries() {
        for x in entry.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into a fresh store (entries in file order) and return
/// the metadata object.
pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::CheckpointFormat(format!("header decode: {e}")))?;

    // Offsets are monotone by construction; validate before reading.
    let mut expected = 0u64;
    for rec in &header.tensors {
        if rec.dtype != "f64" {
            return Err(Error::CheckpointFormat(format!(
                "unsupported dtype {} for {}",
                rec.dtype, rec.name
            )));
        }
        if rec.offset != expected {
            return Err(Error::CheckpointFormat(format!(
                "non-contiguous offset for {}",
                rec.name
            )));
        }
        expected += (rec.shape.iter().product::<usize>() * 8) as u64;
    }

    let mut store = ParamStore::new();
    for rec in &header.tensors {
        let n: usize = rec.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(
            rec.name.clone(),
            Tensor::new(rec.shape.clone(), data),
            rec.trainable,
        );
    }
    Ok((store, header.meta))
}

/// Convenience: copy values from `src` into `dst` by name. Returns the
/// number of copied tensors; missing names are an error.
pub fn copy_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<usize> {
    let mut copied = 0;
    let names: BTreeMap<String, usize> = src
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.clone(), i))
        .collect();
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        match names.get(&name) {
            Some(&i) => {
                let value = src.entries()[i].value.clone();
                if value.shape() != dst.get(id).shape() {
                    return Err(Error::CheckpointFormat(format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        value.shape(),
                        dst.get(id).shape()
                    )));
                }
                *dst.get_mut(id) = value;
                copied += 1;
            }
            None => {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name} missing from source store"
                )))
            }
        }
    }
    Ok(copied)
}
