//! Cluster classifier: a small 1-D CNN that labels a mean spectrum as tree
//! or background and regresses three pigment contents.

mod bundle;
mod dataset;
mod network;
mod train;

pub use bundle::{read_bundle, write_bundle, ModelBundle, ModelManifest, BUNDLE_FORMAT};
pub use dataset::{build_training_set, build_training_set_from, GroupOptions, TrainingSample};
pub use network::{
    batch_loss, tree_probability, NetOutput, Network, NetworkSpec, Target, Trace, TrainingLoss,
    HEAD_NAMES, REG_HEADS,
};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsdata::NormStats;

/// Divisors applied to chlorophyll, carotenoid and anthocyanin targets.
pub const DEFAULT_SCALES: [f64; REG_HEADS] = [50.0, 14.0, 5.0];

/// Per-head regression scale constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Scales([f64; REG_HEADS]);

impl Scales {
    pub fn new(s: [f64; REG_HEADS]) -> Result<Self> {
        if s.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self(s))
        } else {
            Err(Error::Config(format!(
                "regression scales must be positive, got {s:?}"
            )))
        }
    }

    pub fn values(&self) -> [f64; REG_HEADS] {
        self.0
    }

    pub fn scale(&self, y: [f64; REG_HEADS]) -> [f64; REG_HEADS] {
        std::array::from_fn(|i| y[i] / self.0[i])
    }

    pub fn unscale(&self, v: [f64; REG_HEADS]) -> [f64; REG_HEADS] {
        std::array::from_fn(|i| v[i] * self.0[i])
    }
}

impl Default for Scales {
    fn default() -> Self {
        Self(DEFAULT_SCALES)
    }
}

impl TryFrom<[f64; 3]> for Scales {
    type Error = Error;
    fn try_from(s: [f64; 3]) -> Result<Self> {
        Self::new(s)
    }
}

impl From<Scales> for [f64; 3] {
    fn from(s: Scales) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterPrediction {
    pub is_tree: bool,
    /// Probability of the more likely class, in [0.5, 1].
    pub confidence: f64,
    pub p_tree: f64,
    pub ab: f64,
    pub ar: f64,
    pub ant: f64,
}

impl ClusterPrediction {
    /// Ties go to background.
    pub fn from_probability(p_tree: f64, contents: [f64; REG_HEADS]) -> Self {
        let p_tree = p_tree.clamp(0.0, 1.0);
        Self {
            is_tree: p_tree > 0.5,
            confidence: p_tree.max(1.0 - p_tree),
            p_tree,
            ab: contents[0],
            ar: contents[1],
            ant: contents[2],
        }
    }

    pub fn from_logits(logits: [f64; 2], contents: [f64; REG_HEADS]) -> Self {
        Self::from_probability(tree_probability(logits), contents)
    }

    pub fn regressions(&self) -> [f64; REG_HEADS] {
        [self.ab, self.ar, self.ant]
    }
}

/// Anything that can label a cluster mean spectrum.
pub trait ClusterClassifier {
    /// Expected spectrum length, or 0 when any length is accepted.
    fn bands(&self) -> usize;
    fn predict(&self, spectrum: &[f64]) -> Result<ClusterPrediction>;

    /// Per-band normalization applied by `predict`, if any.
    fn input_norm(&self) -> Option<&NormStats> {
        None
    }

    /// Prediction for a spectrum already passed through [`Self::input_norm`].
    fn predict_normalized(&self, spectrum: &[f64]) -> Result<ClusterPrediction> {
        self.predict(spectrum)
    }
}
