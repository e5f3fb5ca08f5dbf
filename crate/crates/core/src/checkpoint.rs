//! Versioned JSON model checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchitectureConfig, Network, NetworkParams};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "trimetric-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamArrays {
    conv1_weight: Tensor,
    conv1_bias: Tensor,
    conv2_weight: Tensor,
    conv2_bias: Tensor,
    fc_weight: Tensor,
    fc_bias: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    config: ArchitectureConfig,
    /// Completed training iterations.
    iteration: usize,
    params: ParamArrays,
}

/// A network plus the number of training iterations already applied to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let [conv1_weight, conv1_bias, conv2_weight, conv2_bias, fc_weight, fc_bias] =
            self.network.params().clone().into_groups();
        let doc = Document {
            format: FORMAT_TAG.to_string(),
            config: self.network.config().clone(),
            iteration: self.iteration,
            params: ParamArrays {
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
                fc_weight,
                fc_bias,
            },
        };
        serde_json::to_string(&doc).map_err(|e| Error::contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: Document = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.format != FORMAT_TAG {
            return Err(format!("unsupported checkpoint format {:?}", doc.format));
        }
        let p = doc.params;
        let groups = [
            p.conv1_weight,
            p.conv1_bias,
            p.conv2_weight,
            p.conv2_bias,
            p.fc_weight,
            p.fc_bias,
        ];
        let params = NetworkParams::from_groups(&doc.config, groups).map_err(|e| e.to_string())?;
        if !params.is_finite() {
            return Err("checkpoint contains non-finite parameters".into());
        }
        let network = Network::new(doc.config, params).map_err(|e| e.to_string())?;
        Ok(Checkpoint {
            network,
            iteration: doc.iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}
