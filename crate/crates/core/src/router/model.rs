use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{featurize, SparseFeatures};
use super::{argmax_first, Decision, LabelSet};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MRAGRTR\0";
const FORMAT_VERSION: u32 = 1;
pub(crate) const MODEL_VERSION: &str = "hashed-softmax-1";

/// Softmax regression over hashed n-gram features.
///
/// `weights` is row-major `label_set.len() × feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub(crate) feature_dim: usize,
    pub(crate) label_set: LabelSet,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    pub(crate) featurizer_seed: u64,
    pub(crate) version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Routing {
    pub decision: Decision,
    /// Aligned with the model's label set.
    pub probabilities: Vec<(Decision, f64)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    label_set: LabelSet,
    feature_dim: usize,
    featurizer_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub version: String,
    pub label_set: LabelSet,
    pub feature_dim: usize,
    pub featurizer_seed: u64,
    pub nonzero_weights: usize,
    /// Per label: (label, L2 norm of its weight row, bias).
    pub classes: Vec<(Decision, f64, f64)>,
}

impl RouterModel {
    pub fn zeros(label_set: LabelSet, feature_dim: usize, featurizer_seed: u64) -> Result<Self> {
        if !feature_dim.is_power_of_two() || feature_dim > u32::MAX as usize {
            return Err(Error::Config(format!(
                "feature_dim must be a power of two, got {feature_dim}"
            )));
        }
        let c = label_set.len();
        Ok(RouterModel {
            feature_dim,
            label_set,
            weights: vec![0.0; c * feature_dim],
            bias: vec![0.0; c],
            featurizer_seed,
            version: MODEL_VERSION.to_string(),
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parameters(
        label_set: LabelSet,
        feature_dim: usize,
        featurizer_seed: u64,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut m = RouterModel::zeros(label_set, feature_dim, featurizer_seed)?;
        if weights.len() != m.weights.len() || bias.len() != m.bias.len() {
            return Err(Error::Invalid("parameter shapes do not match label set and feature_dim".into()));
        }
        if weights.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("router parameters"));
        }
        m.weights = weights;
        m.bias = bias;
        Ok(m)
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn featurizer_seed(&self) -> u64 {
        self.featurizer_seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn featurize(&self, question: &str) -> Result<SparseFeatures> {
        featurize(question, self.feature_dim, self.featurizer_seed)
    }

    pub fn logits(&self, x: &SparseFeatures) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| {
                let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
                self.bias[c] + x.iter().map(|(j, v)| row[j] * v).sum::<f64>()
            })
            .collect()
    }

    pub fn route(&self, question: &str) -> Result<Routing> {
        let logits = self.logits(&self.featurize(question)?);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("router logits"));
        }
        let probs = softmax(&logits);
        let best = argmax_first(&logits);
        Ok(Routing {
            decision: self.label_set.get(best),
            probabilities: self.label_set.labels().iter().copied().zip(probs).collect(),
        })
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            version: self.version.clone(),
            label_set: self.label_set.clone(),
            feature_dim: self.feature_dim,
            featurizer_seed: self.featurizer_seed,
            nonzero_weights: self.weights.iter().filter(|w| **w != 0.0).count(),
            classes: self
                .label_set
                .labels()
                .iter()
                .enumerate()
                .map(|(c, &d)| {
                    let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
                    (d, row.iter().map(|w| w * w).sum::<f64>().sqrt(), self.bias[c])
                })
                .collect(),
        }
    }

    /// Layout: magic, u32 format version, u32 header length, JSON header,
    /// then weights and bias as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            version: self.version.clone(),
            label_set: self.label_set.clone(),
            feature_dim: self.feature_dim,
            featurizer_seed: self.featurizer_seed,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("router model: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| bad(&e.to_string()))?;
        let mut model = RouterModel::zeros(header.label_set, header.feature_dim, header.featurizer_seed)?;
        model.version = header.version;
        let body = &bytes[header_end..];
        let n = model.weights.len() + model.bias.len();
        if body.len() != n * 8 {
            return Err(bad(&format!("expected {} parameter bytes, found {}", n * 8, body.len())));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for w in model.weights.iter_mut().chain(model.bias.iter_mut()) {
            *w = values.next().unwrap();
        }
        if model.weights.iter().chain(&model.bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("router parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        RouterModel::from_bytes(&bytes)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
