//! `QYM1` model files: a JSON graph description plus a sidecar blob of
//! concatenated `QYT1` tensors addressed by byte offset.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::graph::{ConvWeights, GraphModel, NodeSpec, WeightBundle};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "QYM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub node_id: String,
    pub kernel_offset: u64,
    pub bias_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub format_version: u32,
    pub nodes: Vec<NodeSpec>,
    pub weight_manifest: Vec<ManifestEntry>,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.format_version != MODEL_FORMAT_VERSION {
            return Err(QuantError::Format(format!(
                "unsupported model format {} v{}",
                file.format, file.format_version
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model file serializes");
        s.push('\n');
        s
    }

    pub fn graph(&self) -> Result<GraphModel> {
        GraphModel::new(self.nodes.clone())
    }

    /// Resolves the manifest against `blob` and validates against the graph.
    pub fn load_weights(&self, model: &GraphModel, blob: &[u8]) -> Result<WeightBundle> {
        let mut bundle = WeightBundle::default();
        for e in &self.weight_manifest {
            let at = |off: u64| -> Result<Tensor> {
                let off = usize::try_from(off).map_err(|_| QuantError::Format(format!("offset {off} too large")))?;
                Tensor::from_qyt_slice(blob, off)
            };
            let w = ConvWeights { kernel: at(e.kernel_offset)?, bias: at(e.bias_offset)? };
            if bundle.convs.insert(e.node_id.clone(), w).is_some() {
                return Err(QuantError::Format(format!("duplicate manifest entry {:?}", e.node_id)));
            }
        }
        bundle.validate(model)?;
        Ok(bundle)
    }
}

/// Encodes a model and its weights; convs are laid out in evaluation order,
/// kernel then bias.
pub fn encode_model(model: &GraphModel, weights: &WeightBundle) -> Result<(ModelFile, Vec<u8>)> {
    weights.validate(model)?;
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    for id in model.conv_ids() {
        let w = weights.get(id)?;
        let kernel_offset = blob.len() as u64;
        w.kernel.write_qyt(&mut blob)?;
        let bias_offset = blob.len() as u64;
        w.bias.write_qyt(&mut blob)?;
        manifest.push(ManifestEntry { node_id: id.to_string(), kernel_offset, bias_offset });
    }
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        nodes: model.nodes().to_vec(),
        weight_manifest: manifest,
    };
    Ok((file, blob))
}

pub fn decode_model(json: &str, blob: &[u8]) -> Result<(GraphModel, WeightBundle)> {
    let file = ModelFile::from_json(json)?;
    let model = file.graph()?;
    let weights = file.load_weights(&model, blob)?;
    Ok((model, weights))
}
