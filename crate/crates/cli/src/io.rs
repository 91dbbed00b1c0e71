//! File plumbing: model/weight loading, sample directories and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use ptq_core::model_file::{encode_model, ModelFile};
use ptq_core::{GraphModel, Tensor, WeightBundle};

use crate::CliError;

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CALIB_DIR: &str = "calib";
pub const EVAL_DIR: &str = "eval";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn load_model(model: &Path, weights: &Path) -> Result<(GraphModel, WeightBundle), CliError> {
    let text = fs::read_to_string(model).map_err(|e| io_err(model, e))?;
    let blob = fs::read(weights).map_err(|e| io_err(weights, e))?;
    let file = ModelFile::from_json(&text).map_err(|e| io_err(model, e))?;
    let graph = file.graph().map_err(|e| io_err(model, e))?;
    let bundle = file.load_weights(&graph, &blob).map_err(|e| io_err(weights, e))?;
    Ok((graph, bundle))
}

pub fn sample_name(k: usize) -> String {
    format!("sample_{k:04}.qyt")
}

/// Reads every `sample_*.qyt` in `dir`, in lexicographic file-name order.
pub fn load_samples(dir: &Path) -> Result<Vec<Tensor>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".qyt"))
    });
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = fs::File::open(p).map_err(|e| io_err(p, e))?;
            Tensor::read_qyt(std::io::BufReader::new(f)).map_err(|e| io_err(p, e))
        })
        .collect()
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Writes through a temp file in the target directory, then renames over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Writes `model.json` and `weights.bin` into `dir`.
pub fn write_model(dir: &Path, model: &GraphModel, weights: &WeightBundle) -> Result<(), CliError> {
    let (file, blob) = encode_model(model, weights).map_err(|e| CliError::Calibration(e.to_string()))?;
    write_atomic(&dir.join(WEIGHTS_FILE), &blob)?;
    write_atomic(&dir.join(MODEL_FILE), file.to_json().as_bytes())
}

pub fn write_samples(dir: &Path, samples: &[Tensor]) -> Result<(), CliError> {
    for (k, t) in samples.iter().enumerate() {
        write_atomic(&dir.join(sample_name(k)), &t.to_qyt_bytes())?;
    }
    Ok(())
}
