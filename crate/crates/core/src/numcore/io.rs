//! MOVT binary tensor files and named parameter checkpoints.
//!
//! Layout: `b"MOVT"`, version byte, rank byte, `rank` little-endian `u32`
//! extents, then little-endian `f64` data in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{MovError, Result};

pub const MAGIC: &[u8; 4] = b"MOVT";
pub const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |r: &str| MovError::format(path, r.to_string());
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing MOVT magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let head = 6 + 4 * rank;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != head + 8 * n {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            8 * n,
            bytes.len() - head
        )));
    }
    let data = bytes[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| MovError::io(path, e))?;
    f.write_all(&encode_tensor(t)).map_err(|e| MovError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| MovError::io(path, e))?;
    decode_tensor(&buf, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Shapes and trainable flags written beside the tensor files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub params: BTreeMap<String, ParamEntry>,
}

pub const PARAM_MANIFEST: &str = "params.json";

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.movt")
}

/// Writes every parameter value (moments are not persisted) plus the manifest.
pub fn save_params(dir: &Path, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MovError::io(dir, e))?;
    let mut manifest = ParamManifest {
        params: BTreeMap::new(),
    };
    for (name, p) in params.iter() {
        let file = file_name_for(name);
        write_tensor(&dir.join(&file), &p.value)?;
        manifest.params.insert(
            name.clone(),
            ParamEntry {
                file,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            },
        );
    }
    let path = dir.join(PARAM_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| MovError::Serde(e.to_string()))?;
    fs::write(&path, json).map_err(|e| MovError::io(&path, e))
}

pub fn load_params(dir: &Path) -> Result<ParamSet> {
    let path = dir.join(PARAM_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| MovError::io(&path, e))?;
    let manifest: ParamManifest =
        serde_json::from_str(&text).map_err(|e| MovError::format(&path, e.to_string()))?;
    let mut ps = ParamSet::new();
    for (name, entry) in manifest.params {
        let tpath = dir.join(&entry.file);
        let t = read_tensor(&tpath)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(MovError::format(
                &tpath,
                format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape),
            ));
        }
        ps.insert(name, t, entry.trainable);
    }
    Ok(ps)
}
