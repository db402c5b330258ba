use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{GroupOptions, TrainConfig};
use crate::control::ControllerConfig;
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::ohslic::OhslicConfig;
use crate::synthgen::{GridSpec, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    /// The last `test_count` cubes are held out for benchmarking.
    pub test_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 180,
            test_count: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Free,
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub budget: BudgetKind,
    /// Cluster count for the fixed budget and the controller's start.
    pub clusters: usize,
    /// Lines buffered between the reader and the processor.
    pub queue_depth: usize,
    /// Also write per-line cluster snapshots as JSON lines.
    pub snapshots: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            budget: BudgetKind::Adaptive,
            clusters: 40,
            queue_depth: 16,
            snapshots: false,
        }
    }
}

/// Everything a command needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub groups: GroupOptions,
    pub train: TrainConfig,
    pub ohslic: OhslicConfig,
    pub controller: ControllerConfig,
    pub bench: BenchConfig,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::desk(),
            dataset: DatasetConfig::default(),
            groups: GroupOptions::default(),
            train: TrainConfig::default(),
            ohslic: OhslicConfig::default(),
            controller: ControllerConfig::default(),
            bench: BenchConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-size dataset geometry: 180 scenes of 1024 x 1024 x 224.
    pub fn full_preset() -> Self {
        Self {
            scene: SceneConfig {
                grid: GridSpec::TwoCamera,
                ..SceneConfig::default()
            },
            dataset: DatasetConfig {
                count: 180,
                test_count: 20,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.dataset.count == 0 || self.dataset.test_count > self.dataset.count {
            return Err(Error::Config(
                "dataset: need 0 < count and test_count <= count".into(),
            ));
        }
        self.groups.validate()?;
        self.train.validate()?;
        self.ohslic.validate()?;
        self.controller.validate()?;
        self.bench.validate()?;
        if self.stream.queue_depth == 0 || self.stream.clusters < 2 {
            return Err(Error::Config(
                "stream: queue_depth must be >= 1 and clusters >= 2".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Scene seed of the `index`-th cube.
    pub fn cube_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub split: Split,
    /// CRC32 stored in the cube header; zero until the cube is written.
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub generator: String,
    pub scene: SceneConfig,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::InsufficientData(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Hash over file names, seeds, splits and cube checksums.
    pub fn dataset_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.file.as_bytes());
            h.update(e.seed.to_le_bytes());
            h.update([e.split as u8]);
            h.update(e.checksum.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn files(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| dir.join(&e.file))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sede = 3"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("[ohslic]\nk_int = 3").is_err());
    }

    #[test]
    fn sections_override_and_validate() {
        let cfg = RunConfig::from_toml(
            "seed = 5\n[scene]\nwidth = 128\nheight = 64\ngrid = { desk = { count = 32 } }\ntree_count = [2, 3]\n[ohslic]\nk_init = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.scene.width, 128);
        assert_eq!(cfg.scene.grid, GridSpec::Desk { count: 32 });
        assert_eq!(cfg.ohslic.k_init, 20);
        assert!(RunConfig::from_toml("[controller]\nt_lo = 20.0").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn cube_seeds_are_distinct() {
        let cfg = RunConfig::default();
        let mut seeds: Vec<u64> = (0..100).map(|i| cfg.cube_seed(i)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 100);
    }
}
