//! Tokenized splits as `{train,validation,test}.jsonl` plus a manifest
//! carrying the fitted binner, vocabularies and split times.

use std::path::Path;

use super::{PipelineState, Preprocessed};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl, Manifest};

pub const STAGE: &str = "preprocess";
pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

fn split_file(name: &str) -> String {
    format!("{name}.jsonl")
}

pub fn write_preprocessed(dir: &Path, data: &Preprocessed, mut manifest: Manifest) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in SPLITS {
        write_jsonl(&dir.join(split_file(name)), data.split(name).unwrap_or_default())?;
    }
    manifest.meta = serde_json::to_value(&data.state)?;
    let files: Vec<String> = SPLITS.iter().map(|n| split_file(n)).collect();
    manifest.seal(dir, &files.iter().map(String::as_str).collect::<Vec<_>>())
}

pub fn read_preprocessed(dir: &Path) -> Result<(Preprocessed, Manifest)> {
    let manifest = Manifest::load_verified(dir, STAGE)?;
    let state: PipelineState = serde_json::from_value(manifest.meta.clone())?;
    let read = |name: &str| read_jsonl(&dir.join(split_file(name)));
    let data = Preprocessed {
        state,
        train: read("train")?,
        validation: read("validation")?,
        test: read("test")?,
    };
    Ok((data, manifest))
}
