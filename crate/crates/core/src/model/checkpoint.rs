//! Binary model container: magic, version, a JSON header describing config,
//! schema and tensor shapes, then every tensor as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encode::FeatureSchema;
use super::{NptConfig, NptParams};
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"NPTADCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NptConfig,
    pub schema: FeatureSchema,
    pub params: NptParams,
    /// Free-form run metadata (training config, seed, dataset).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NptConfig,
    schema: FeatureSchema,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        config: ck.config.clone(),
        schema: ck.schema.clone(),
        meta: ck.meta.clone(),
        tensors: ck
            .params
            .names()
            .into_iter()
            .zip(ck.params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * ck.params.num_params() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in ck.params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    ensure!(bytes.len() >= n, Checkpoint, "truncated while reading {what}");
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut b = raw.as_slice();
    ensure!(
        take(&mut b, 8, "magic")? == MAGIC,
        Checkpoint,
        "not a model checkpoint"
    );
    let version = u32::from_le_bytes(take(&mut b, 4, "version")?.try_into().unwrap());
    ensure!(
        version == VERSION,
        Checkpoint,
        "unsupported checkpoint version {version}"
    );
    let hlen = u64::from_le_bytes(take(&mut b, 8, "header length")?.try_into().unwrap());
    let hlen = usize::try_from(hlen).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(&mut b, hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;

    let expected = 6 + 13 * header.config.depth;
    ensure!(
        header.tensors.len() == expected,
        Checkpoint,
        "{} tensors, expected {expected}",
        header.tensors.len()
    );
    let mut tensors = Vec::with_capacity(expected);
    for entry in &header.tensors {
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &s| a.checked_mul(s))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is too large", entry.name)))?;
        let bytes = take(&mut b, numel * 8, &entry.name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(
            Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?,
        );
    }
    ensure!(b.is_empty(), Checkpoint, "{} trailing bytes", b.len());
    let params = NptParams::from_flat(header.config.depth, tensors);
    for (have, want) in header.tensors.iter().zip(params.names()) {
        ensure!(
            have.name == want,
            Checkpoint,
            "tensor {:?} where {want:?} was expected",
            have.name
        );
    }
    params.validate(&header.schema, &header.config)?;
    Ok(Checkpoint {
        config: header.config,
        schema: header.schema,
        params,
        meta: header.meta,
    })
}
