//! Binary checkpoint container: a JSON manifest followed by raw
//! little-endian `f64` arrays.
//!
//! Layout: magic `ELREACK1`, manifest byte length as `u64` LE, the manifest
//! JSON, then every array's data in manifest order. The manifest carries an
//! `arrays` list of `{name, shape}` entries plus caller metadata.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{LmConfig, ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"ELREACK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(manifest: Value) -> Self {
        Checkpoint {
            manifest,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.into(), shape, data));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = self.manifest.clone();
        manifest["dtype"] = json!("f64-le");
        manifest["arrays"] = Value::Array(
            self.arrays
                .iter()
                .map(|(n, s, _)| json!({ "name": n, "shape": s }))
                .collect(),
        );
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let total: usize = self.arrays.iter().map(|(_, _, d)| d.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Value =
            serde_json::from_slice(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let entries = manifest["arrays"]
            .as_array()
            .ok_or_else(|| bad("manifest has no array list"))?;
        let mut off = 16 + hlen;
        let mut arrays = Vec::with_capacity(entries.len());
        for e in entries {
            let name = e["name"]
                .as_str()
                .ok_or_else(|| bad("array without name"))?;
            let shape: Vec<usize> = e["shape"]
                .as_array()
                .ok_or_else(|| bad("array without shape"))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("bad shape"))?;
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| bad("truncated array data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * n;
            arrays.push((name.to_string(), shape, data));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        Ok(Checkpoint { manifest, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.manifest["kind"].as_str() {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {other:?}"
        ))),
    }
}

pub(crate) fn get_u64(m: &Value, key: &str) -> Result<u64> {
    m[key]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint(format!("manifest field `{key}` missing")))
}

pub(crate) fn get_f64(m: &Value, key: &str) -> Result<f64> {
    m[key]
        .as_f64()
        .ok_or_else(|| Error::Checkpoint(format!("manifest field `{key}` missing")))
}

impl ParameterStore {
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let names: Vec<&str> = self.names().collect();
        let mut ck = Checkpoint::new(json!({
            "kind": "backbone",
            "config": self.config,
            "names": names,
            "seed": seed,
        }));
        for (name, t) in &self.tensors {
            ck.push(name.clone(), t.shape.clone(), t.data.clone());
        }
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<ParameterStore> {
        let ck = Checkpoint::read(path)?;
        expect_kind(&ck, "backbone")?;
        let config: LmConfig = serde_json::from_value(ck.manifest["config"].clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors = ck
            .arrays
            .into_iter()
            .map(|(n, shape, data)| (n, Tensor { shape, data }))
            .collect();
        Ok(ParameterStore { config, tensors })
    }
}
