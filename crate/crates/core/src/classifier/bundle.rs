//! Model bundle: `u32` LE manifest length, JSON manifest, then every weight
//! tensor as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClusterClassifier, ClusterPrediction, Network, NetworkSpec, Scales};
use crate::error::{Error, Result};
use crate::hsdata::{normalize_into, NormStats};

pub const BUNDLE_FORMAT: &str = "ohslic-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub spec: NetworkSpec,
    pub norm: NormStats,
    pub scales: Scales,
    pub seed: u64,
    #[serde(default)]
    pub dataset_hash: String,
    #[serde(default)]
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed for standalone inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: ModelManifest,
    network: Network,
}

impl ModelBundle {
    pub fn new(network: Network, norm: NormStats, scales: Scales, seed: u64) -> Result<Self> {
        if norm.bands() != network.spec().bands {
            return Err(Error::Dimension(format!(
                "normalization has {} bands, network {}",
                norm.bands(),
                network.spec().bands
            )));
        }
        let tensors = network
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        let manifest = ModelManifest {
            format: BUNDLE_FORMAT.into(),
            spec: network.spec().clone(),
            norm,
            scales,
            seed,
            dataset_hash: String::new(),
            config_hash: String::new(),
            tensors,
        };
        Ok(Self { manifest, network })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(4 + json.len() + 4 * self.network.params().len());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.network.params() {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
            .ok_or_else(|| Error::Format("model bundle shorter than its length prefix".into()))?;
        let json = bytes
            .get(4..4 + len)
            .ok_or_else(|| Error::Format("model manifest truncated".into()))?;
        let manifest: ModelManifest = serde_json::from_slice(json)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported model format {:?}",
                manifest.format
            )));
        }
        manifest.spec.validate()?;
        let reference = Network::zeros(manifest.spec.clone())?;
        let expected: Vec<TensorEntry> = reference
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        if manifest.tensors != expected {
            return Err(Error::Format(
                "tensor list does not match the architecture".into(),
            ));
        }
        let body = &bytes[4 + len..];
        let count = manifest.spec.param_count();
        if body.len() != 4 * count {
            return Err(Error::Format(format!(
                "expected {} weight bytes, found {}",
                4 * count,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        let network = Network::from_params(manifest.spec.clone(), params)?;
        if manifest.norm.bands() != manifest.spec.bands {
            return Err(Error::Format(
                "normalization stats do not match the band count".into(),
            ));
        }
        Ok(Self { manifest, network })
    }
}

impl ClusterClassifier for ModelBundle {
    fn bands(&self) -> usize {
        self.manifest.spec.bands
    }

    fn predict(&self, spectrum: &[f64]) -> Result<ClusterPrediction> {
        let mut x = vec![0.0; spectrum.len()];
        normalize_into(spectrum, &self.manifest.norm, &mut x)?;
        self.predict_normalized(&x)
    }

    fn input_norm(&self) -> Option<&NormStats> {
        Some(&self.manifest.norm)
    }

    fn predict_normalized(&self, spectrum: &[f64]) -> Result<ClusterPrediction> {
        let out = self.network.forward(spectrum)?;
        Ok(ClusterPrediction::from_logits(
            out.logits,
            self.manifest.scales.unscale(out.reg),
        ))
    }
}

pub fn write_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::from_bytes(&fs::read(path)?)
}
