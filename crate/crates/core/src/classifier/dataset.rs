use std::borrow::Borrow;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::REG_HEADS;
use crate::error::{Error, Result};
use crate::hsdata::LabeledCube;

/// How pure-pixel groups are drawn from each cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupOptions {
    pub min_group: usize,
    pub max_group: usize,
    /// Tree groups drawn from each crown.
    pub groups_per_crown: usize,
}

impl Default for GroupOptions {
    fn default() -> Self {
        Self {
            min_group: 5,
            max_group: 50,
            groups_per_crown: 4,
        }
    }
}

impl GroupOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_group == 0 || self.min_group > self.max_group || self.groups_per_crown == 0 {
            return Err(Error::Config(format!("invalid group options {self:?}")));
        }
        Ok(())
    }
}

/// Mean spectrum of a label-pure pixel group.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub spectrum: Vec<f64>,
    pub is_tree: bool,
    /// Chlorophyll, carotenoid, anthocyanin; zero for background.
    pub contents: [f64; REG_HEADS],
}

fn mean_of(cube: &LabeledCube, idx: &[usize]) -> Vec<f64> {
    let b = cube.bands();
    let mut acc = vec![0.0; b];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(&cube.data[i * b..(i + 1) * b]) {
            *a += *v as f64;
        }
    }
    acc.iter().map(|a| a / idx.len() as f64).collect()
}

fn draw<R: Rng + ?Sized>(pool: &[usize], opts: &GroupOptions, rng: &mut R) -> Vec<usize> {
    let g = rng
        .gen_range(opts.min_group..=opts.max_group)
        .min(pool.len());
    sample(rng, pool.len(), g).iter().map(|i| pool[i]).collect()
}

/// Averages random label-pure pixel groups into training samples.
///
/// Tree groups never mix crowns, mixed-flagged pixels are never used, and
/// the larger class is downsampled so both classes are equally frequent.
pub fn build_training_set<R: Rng + ?Sized>(
    cubes: &[LabeledCube],
    opts: &GroupOptions,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    build_training_set_from(cubes.iter().map(Ok), opts, rng)
}

/// [`build_training_set`] over cubes produced one at a time, so a large
/// dataset never has to be held in memory.
pub fn build_training_set_from<C, I, R>(
    cubes: I,
    opts: &GroupOptions,
    rng: &mut R,
) -> Result<Vec<TrainingSample>>
where
    C: Borrow<LabeledCube>,
    I: IntoIterator<Item = Result<C>>,
    R: Rng + ?Sized,
{
    opts.validate()?;
    let mut trees = Vec::new();
    let mut background = Vec::new();
    for cube in cubes {
        let cube = cube?;
        let cube = cube.borrow();
        let truth = cube
            .truth
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("cube has no ground truth".into()))?;
        let labels = truth
            .labels
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("cube has no leaf labels".into()))?;
        let mut crowns: BTreeMap<[u64; 7], Vec<usize>> = BTreeMap::new();
        let mut soil = Vec::new();
        for i in 0..cube.pixels() {
            if truth.is_mixed(i) {
                continue;
            }
            if truth.is_tree(i) {
                crowns.entry(labels[i].key()).or_default().push(i);
            } else {
                soil.push(i);
            }
        }
        let mut drawn = 0;
        for pixels in crowns.values() {
            if pixels.len() < opts.min_group {
                continue;
            }
            let params = &labels[pixels[0]];
            for _ in 0..opts.groups_per_crown {
                let idx = draw(pixels, opts, rng);
                trees.push(TrainingSample {
                    spectrum: mean_of(cube, &idx),
                    is_tree: true,
                    contents: params.pigments(),
                });
                drawn += 1;
            }
        }
        if soil.len() >= opts.min_group {
            for _ in 0..drawn.max(opts.groups_per_crown) {
                let idx = draw(&soil, opts, rng);
                background.push(TrainingSample {
                    spectrum: mean_of(cube, &idx),
                    is_tree: false,
                    contents: [0.0; 3],
                });
            }
        }
    }
    if trees.is_empty() || background.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} tree and {} background groups; both classes are required",
            trees.len(),
            background.len()
        )));
    }
    let n = trees.len().min(background.len());
    for set in [&mut trees, &mut background] {
        if set.len() > n {
            set.shuffle(rng);
            set.truncate(n);
        }
    }
    let mut out: Vec<TrainingSample> = trees
        .into_iter()
        .zip(background)
        .flat_map(|(t, b)| [t, b])
        .collect();
    out.shuffle(rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::{BandGrid, GroundTruth, SpectralKind};
    use crate::synthgen::{
        generate_scene_with_rng, leaf_reflectance, solar_envelope, GridSpec, LeafParams,
        SceneConfig,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_scene(noise: f64, seed: u64) -> LabeledCube {
        let cfg = SceneConfig {
            width: 96,
            height: 96,
            grid: GridSpec::Desk { count: 16 },
            tree_count: (3, 4),
            tree_diameter_mean: 24.0,
            tree_diameter_std: 3.0,
            tree_diameter_min: 16.0,
            tree_diameter_max: 30.0,
            noise_sigma: noise,
            rng_seed: seed,
            ..SceneConfig::default()
        };
        generate_scene_with_rng(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .0
    }

    #[test]
    fn identical_pixels_average_to_themselves() {
        let grid = BandGrid::desk(3).unwrap();
        let mut data = Vec::new();
        let mut mask = Vec::new();
        let mut labels = Vec::new();
        let leaf = LeafParams {
            ab: 30.0,
            ar: 8.0,
            ant: 1.0,
            ..LeafParams::zero()
        };
        for i in 0..40 {
            let tree = i < 20;
            data.extend(if tree {
                [0.1f32, 0.2, 0.3]
            } else {
                [0.4f32, 0.4, 0.5]
            });
            mask.push(tree as u8);
            labels.push(if tree { leaf } else { LeafParams::zero() });
        }
        let truth = GroundTruth {
            mask,
            labels: Some(labels),
        };
        let mut cube = LabeledCube::new(40, 1, grid, SpectralKind::Reflectance, data).unwrap();
        cube.truth = Some(truth);
        let set = build_training_set(
            &[cube],
            &GroupOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(!set.is_empty());
        for s in &set {
            let expect = if s.is_tree {
                [0.1f32, 0.2, 0.3]
            } else {
                [0.4, 0.4, 0.5]
            };
            for (a, b) in s.spectrum.iter().zip(expect) {
                assert!((a - b as f64).abs() < 1e-7);
            }
            assert_eq!(
                s.contents,
                if s.is_tree {
                    [30.0, 8.0, 1.0]
                } else {
                    [0.0; 3]
                }
            );
        }
    }

    #[test]
    fn classes_are_balanced_and_deterministic() {
        let cubes = vec![small_scene(0.01, 1), small_scene(0.01, 2)];
        let opts = GroupOptions {
            groups_per_crown: 5,
            ..Default::default()
        };
        let a = build_training_set(&cubes, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_training_set(&cubes, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let trees = a.iter().filter(|s| s.is_tree).count();
        assert_eq!(2 * trees, a.len());
    }

    #[test]
    fn noiseless_tree_groups_equal_leaf_spectrum() {
        let cube = small_scene(0.0, 5);
        let labels = cube.truth.clone().unwrap().labels.unwrap();
        let env = solar_envelope(&cube.grid);
        let set = build_training_set(
            &[cube.clone()],
            &GroupOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for s in set.iter().filter(|s| s.is_tree) {
            let params = labels.iter().find(|p| p.pigments() == s.contents).unwrap();
            let expect = leaf_reflectance(params, &cube.grid);
            for b in 0..cube.bands() {
                let e = (expect[b] * env[b]) as f32 as f64;
                assert!(
                    (s.spectrum[b] - e).abs() < 1e-6,
                    "band {b}: {} vs {e}",
                    s.spectrum[b]
                );
            }
        }
    }

    #[test]
    fn rejects_single_class() {
        let grid = BandGrid::desk(2).unwrap();
        let truth = GroundTruth {
            mask: vec![0; 10],
            labels: Some(vec![LeafParams::zero(); 10]),
        };
        let mut cube =
            LabeledCube::new(10, 1, grid, SpectralKind::Reflectance, vec![0.3; 20]).unwrap();
        cube.truth = Some(truth);
        let r = build_training_set(
            &[cube],
            &GroupOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }
}
