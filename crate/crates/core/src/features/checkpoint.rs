//! Apprentice checkpoints as safetensors archives.
//!
//! Tensors are stored as little-endian f32; run identity lives in the
//! header metadata. Expert weights are never written.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::BackboneId;
use crate::error::{Error, Result};

const FORMAT: &str = "cdo-checkpoint-v1";
const HEADER_KEY: &str = "cdo";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    backbone: BackboneId,
    hierarchies: Vec<usize>,
    resolution: usize,
    epoch: usize,
    run_config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneId,
    pub hierarchies: Vec<usize>,
    pub resolution: usize,
    pub epoch: usize,
    pub run_config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let values = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
            let raw = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes.push((name.clone(), t.dims().to_vec(), raw));
        }
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            format: FORMAT.to_string(),
            backbone: self.backbone,
            hierarchies: self.hierarchies.clone(),
            resolution: self.resolution,
            epoch: self.epoch,
            run_config: self.run_config.clone(),
        };
        // a single entry keeps the header bytes independent of hash order
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(&e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("no metadata"))?;
        let header: Header = serde_json::from_str(meta.get(HEADER_KEY).ok_or_else(|| bad("missing header"))?)?;
        if header.format != FORMAT {
            return Err(bad("unknown format"));
        }
        let st = SafeTensors::deserialize(&buf).map_err(|e| bad(&e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(&format!("tensor {name} is not f32")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name.to_string(), Tensor::from_vec(values, view.shape(), device)?);
        }
        Ok(Checkpoint {
            backbone: header.backbone,
            hierarchies: header.hierarchies,
            resolution: header.resolution,
            epoch: header.epoch,
            run_config: header.run_config,
            params,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.elem_count()).sum()
    }
}
