//! Self-describing JSON checkpoints for MLPs and the models built on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanflow::{MeanFlowModel, TimeSamplerConfig};
use crate::nn::{Activation, MlpModel};
use crate::rectflow::FlowModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Flow,
    Meanflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model_kind: ModelKind,
    pub d: usize,
    pub has_class: bool,
    pub num_classes: usize,
    #[serde(default)]
    pub time_cfg: Option<TimeSamplerConfig>,
    pub training_seed: u64,
    /// Digest of the coupling file trained on, empty for independent couplings.
    #[serde(default)]
    pub couplings_hash: String,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Row-major `(out, in)` weights, one array per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub metadata: Option<CheckpointMeta>,
}

impl Checkpoint {
    pub fn from_mlp(net: &MlpModel, metadata: Option<CheckpointMeta>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: net.layer_sizes().to_vec(),
            activation: net.activation(),
            weights: net.weights().iter().map(|w| w.values().to_vec()).collect(),
            biases: net.biases().iter().map(|b| b.values().to_vec()).collect(),
            metadata,
        }
    }

    pub fn to_mlp(&self) -> Result<MlpModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.format_version)));
        }
        let n = self.layer_sizes.len().saturating_sub(1);
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Format(format!(
                "{} layer sizes but {} weight arrays",
                self.layer_sizes.len(),
                self.weights.len()
            )));
        }
        let weights = (0..n)
            .map(|l| Tensor::new(vec![self.layer_sizes[l + 1], self.layer_sizes[l]], self.weights[l].clone()))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..n)
            .map(|l| Tensor::new(vec![self.layer_sizes[l + 1]], self.biases[l].clone()))
            .collect::<Result<Vec<_>>>()?;
        MlpModel::new(self.layer_sizes.clone(), self.activation, weights, biases)
    }

    pub fn flow(model: &FlowModel, metadata: Option<CheckpointMeta>) -> Self {
        Checkpoint::from_mlp(model.net(), metadata)
    }

    pub fn meanflow(model: &MeanFlowModel, metadata: Option<CheckpointMeta>) -> Self {
        Checkpoint::from_mlp(model.net(), metadata)
    }

    fn dims(&self, kind: ModelKind, scalars: usize) -> Result<(usize, usize)> {
        let out = *self.layer_sizes.last().ok_or_else(|| Error::Format("empty layer_sizes".into()))?;
        match &self.metadata {
            Some(m) if m.model_kind != kind => {
                Err(Error::Format(format!("checkpoint holds a {:?} model, expected {kind:?}", m.model_kind)))
            }
            Some(m) => Ok((m.d, m.num_classes)),
            None => Ok((out, self.layer_sizes[0].saturating_sub(out + scalars))),
        }
    }

    pub fn to_flow(&self) -> Result<FlowModel> {
        let (d, k) = self.dims(ModelKind::Flow, 1)?;
        FlowModel::new(self.to_mlp()?, d, k)
    }

    pub fn to_meanflow(&self) -> Result<MeanFlowModel> {
        let (d, k) = self.dims(ModelKind::Meanflow, 2)?;
        MeanFlowModel::new(self.to_mlp()?, d, k)
    }

    pub fn to_json(&self) -> Result<String> {
        if self.weights.iter().chain(&self.biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
