//! Checkpoints: `params.bin` holds every parameter as little-endian f64 in
//! store order, `params.index` lists `name<TAB>shape<TAB>offset<TAB>len` per
//! line, and the manifest carries the model description.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelDims, ModelKind};
use crate::error::{Error, Result};
use crate::io::Manifest;

pub const STAGE: &str = "checkpoint";
pub const PARAMS_BIN: &str = "params.bin";
pub const PARAMS_INDEX: &str = "params.index";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub step: usize,
    pub vocab_hash: String,
}

/// Writes the parameters and seals them into the manifest together with
/// `extra_files`, which the caller has already written into `dir`.
pub fn save(
    dir: &Path,
    model: &Model,
    step: usize,
    vocab_hash: &str,
    mut manifest: Manifest,
    extra_files: &[&str],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.params.total_len() * 8);
    let mut index = String::new();
    for id in model.params.ids() {
        let t = model.params.get(id);
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            model.params.name(id),
            shape.join("x"),
            bytes.len() / 8,
            t.len()
        ));
        t.data().iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
    }
    std::fs::write(dir.join(PARAMS_BIN), &bytes).map_err(|e| Error::io(dir.join(PARAMS_BIN), e))?;
    std::fs::write(dir.join(PARAMS_INDEX), index).map_err(|e| Error::io(dir.join(PARAMS_INDEX), e))?;
    manifest.meta = serde_json::to_value(CheckpointMeta {
        kind: model.kind,
        config: model.config.clone(),
        dims: model.dims,
        step,
        vocab_hash: vocab_hash.into(),
    })?;
    let mut files = vec![PARAMS_BIN, PARAMS_INDEX];
    files.extend_from_slice(extra_files);
    manifest.seal(dir, &files)
}

pub fn load(dir: &Path) -> Result<(Model, CheckpointMeta, Manifest)> {
    let manifest = Manifest::load_verified(dir, STAGE)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta.clone())?;
    let mut model = Model::new(meta.kind, &meta.config, meta.dims, 0)?;
    let bytes = std::fs::read(dir.join(PARAMS_BIN)).map_err(|e| Error::io(dir.join(PARAMS_BIN), e))?;
    let index_path = dir.join(PARAMS_INDEX);
    let index = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let bad = |line: usize, msg: String| Error::Format {
        path: index_path.clone(),
        message: format!("line {}: {msg}", line + 1),
    };
    let mut seen = 0;
    for (n, line) in index.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset, len] = cols[..] else {
            return Err(bad(n, "expected 4 tab-separated columns".into()));
        };
        let id = model.params.id(name).ok_or_else(|| bad(n, format!("unknown parameter {name}")))?;
        let shape: Vec<usize> = shape
            .split('x')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(n, format!("shape: {e}")))?;
        let (offset, len): (usize, usize) = match (offset.parse(), len.parse()) {
            (Ok(o), Ok(l)) => (o, l),
            _ => return Err(bad(n, "offset and length must be integers".into())),
        };
        let t = model.params.get_mut(id);
        if t.shape() != shape.as_slice() || t.len() != len || (offset + len) * 8 > bytes.len() {
            return Err(bad(n, format!("{name} has shape {:?}, index says {shape:?}", t.shape())));
        }
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let at = (offset + i) * 8;
            *x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        }
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(bad(seen, format!("index lists {seen} of {} parameters", model.params.len())));
    }
    Ok((model, meta, manifest))
}
