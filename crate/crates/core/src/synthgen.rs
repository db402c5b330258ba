//! Labeled forest scene generator.
//!
//! Leaf spectra come from a parametric surrogate of a leaf radiative-transfer
//! model: a structure-dependent baseline attenuated by Beer-Lambert style
//! absorption, `R = baseline(n) * exp(-sum_p c_p * k_p)`. The specific
//! absorption shapes `k_p` live in [`ABSORPTION_TABLE`]. Crowns are 2-D
//! ellipses over a uniform soil, mixed with the soil on a one-pixel edge ring.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsdata::{BandGrid, CubeMeta, GroundTruth, LabeledCube, SpectralKind};
use crate::hsdata::{MASK_MIXED, MASK_TREE};

/// Version tag of the absorption table and scene recipe.
pub const GENERATOR_VERSION: &str = "forest-surrogate/1";

/// Leaf parameter vector (structure, pigments, water, dry matter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafParams {
    /// Structure parameter, >= 1.
    pub n: f64,
    /// Chlorophyll a+b, ug/cm^2.
    pub ab: f64,
    /// Carotenoids, ug/cm^2.
    pub ar: f64,
    /// Brown pigment, unitless.
    pub brown: f64,
    /// Equivalent water thickness, cm.
    pub w: f64,
    /// Dry matter, g/cm^2.
    pub m: f64,
    /// Anthocyanins, ug/cm^2.
    pub ant: f64,
}

impl LeafParams {
    pub const FIELDS: usize = 7;

    pub fn zero() -> Self {
        Self::from_array([0.0; 7])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.n, self.ab, self.ar, self.brown, self.w, self.m, self.ant,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            n: a[0],
            ab: a[1],
            ar: a[2],
            brown: a[3],
            w: a[4],
            m: a[5],
            ant: a[6],
        }
    }

    /// The three regression targets: chlorophyll, carotenoids, anthocyanins.
    pub fn pigments(&self) -> [f64; 3] {
        [self.ab, self.ar, self.ant]
    }

    pub fn content(&self, p: Pigment) -> f64 {
        match p {
            Pigment::Chlorophyll => self.ab,
            Pigment::Carotenoid => self.ar,
            Pigment::Anthocyanin => self.ant,
            Pigment::Brown => self.brown,
            Pigment::Water => self.w,
            Pigment::DryMatter => self.m,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0) && self.n >= 1.0
    }

    /// Bit pattern key; pixels of one crown share it exactly.
    pub fn key(&self) -> [u64; 7] {
        self.to_array().map(f64::to_bits)
    }
}

fn q32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Draws one leaf. Values are rounded to `f32` precision so they survive the
/// cube format unchanged.
pub fn sample_leaf_params<R: Rng + ?Sized>(rng: &mut R) -> LeafParams {
    let ant = LogNormal::new(0.0, 0.5).unwrap();
    LeafParams {
        n: q32(rng.gen_range(1.0..=2.5)),
        ab: q32(rng.gen_range(10.0..=50.0)),
        ar: q32(rng.gen_range(4.0..=14.0)),
        brown: q32(rng.gen_range(0.0..=1.0)),
        w: q32(rng.gen_range(0.001..=0.03)),
        m: q32(rng.gen_range(0.002..=0.02)),
        ant: q32(ant.sample(rng)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pigment {
    Chlorophyll,
    Carotenoid,
    Anthocyanin,
    Brown,
    Water,
    DryMatter,
}

impl Pigment {
    pub const ALL: [Pigment; 6] = [
        Pigment::Chlorophyll,
        Pigment::Carotenoid,
        Pigment::Anthocyanin,
        Pigment::Brown,
        Pigment::Water,
        Pigment::DryMatter,
    ];

    /// Wavelength (nm) where this content absorbs most strongly.
    pub fn peak_nm(self) -> f64 {
        match self {
            Pigment::Chlorophyll => 665.0,
            Pigment::Carotenoid => 475.0,
            Pigment::Anthocyanin => 550.0,
            Pigment::Brown => 400.0,
            Pigment::Water => 1450.0,
            Pigment::DryMatter => 1700.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Gaussian {
        center: f64,
        width: f64,
    },
    /// Logistic step rising around `center`.
    Step {
        center: f64,
        scale: f64,
    },
    /// Exponential fall-off from `start`, zero beyond `cutoff`.
    Decay {
        start: f64,
        scale: f64,
        cutoff: f64,
    },
}

impl Shape {
    fn eval(self, nm: f64) -> f64 {
        match self {
            Shape::Gaussian { center, width } => (-0.5 * ((nm - center) / width).powi(2)).exp(),
            Shape::Step { center, scale } => 1.0 / (1.0 + (-(nm - center) / scale).exp()),
            Shape::Decay {
                start,
                scale,
                cutoff,
            } => {
                if nm > cutoff {
                    0.0
                } else {
                    (-(nm - start).max(0.0) / scale).exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionTerm {
    pub pigment: Pigment,
    /// Specific absorption at the shape maximum, per unit of content.
    pub amplitude: f64,
    pub shape: Shape,
}

const fn gauss(pigment: Pigment, amplitude: f64, center: f64, width: f64) -> AbsorptionTerm {
    AbsorptionTerm {
        pigment,
        amplitude,
        shape: Shape::Gaussian { center, width },
    }
}

/// Specific absorption coefficients of the leaf surrogate.
///
/// Pigment amplitudes are small on purpose: the full chlorophyll range moves
/// red reflectance by a few percent, comparable to per-pixel sensor noise.
pub const ABSORPTION_TABLE: &[AbsorptionTerm] = &[
    gauss(Pigment::Chlorophyll, 0.0045, 435.0, 22.0),
    gauss(Pigment::Chlorophyll, 0.0039, 665.0, 22.0),
    gauss(Pigment::Chlorophyll, 0.0009, 600.0, 60.0),
    gauss(Pigment::Carotenoid, 0.0120, 475.0, 22.0),
    gauss(Pigment::Anthocyanin, 0.0450, 550.0, 28.0),
    AbsorptionTerm {
        pigment: Pigment::Brown,
        amplitude: 0.25,
        shape: Shape::Decay {
            start: 400.0,
            scale: 300.0,
            cutoff: 1100.0,
        },
    },
    gauss(Pigment::Water, 40.0, 1450.0, 55.0),
    gauss(Pigment::Water, 6.0, 970.0, 30.0),
    gauss(Pigment::Water, 15.0, 1200.0, 45.0),
    AbsorptionTerm {
        pigment: Pigment::DryMatter,
        amplitude: 8.0,
        shape: Shape::Step {
            center: 1300.0,
            scale: 70.0,
        },
    },
];

/// Specific absorption of one content at `nm`.
pub fn specific_absorption(p: Pigment, nm: f64) -> f64 {
    ABSORPTION_TABLE
        .iter()
        .filter(|t| t.pigment == p)
        .map(|t| t.amplitude * t.shape.eval(nm))
        .sum()
}

/// Content-free leaf shape: visible plateau with a green bump, red edge near
/// 718 nm, NIR plateau raised by the structure parameter.
pub fn leaf_baseline(nm: f64, n: f64) -> f64 {
    let vis = 0.09 + 0.06 * (-0.5 * ((nm - 550.0) / 35.0).powi(2)).exp();
    let nir = 0.42 + 0.10 * (n - 1.0);
    let edge = 1.0 / (1.0 + (-(nm - 718.0) / 14.0).exp());
    vis + (nir - vis) * edge
}

pub fn leaf_reflectance(params: &LeafParams, grid: &BandGrid) -> Vec<f64> {
    grid.wavelengths()
        .iter()
        .map(|&nm| {
            let absorbance: f64 = ABSORPTION_TABLE
                .iter()
                .map(|t| params.content(t.pigment) * t.amplitude * t.shape.eval(nm))
                .sum();
            leaf_baseline(nm, params.n) * (-absorbance).exp()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoilArchetype {
    BrightSand,
    DarkLoam,
    Gravel,
}

impl SoilArchetype {
    pub const ALL: [SoilArchetype; 3] = [
        SoilArchetype::BrightSand,
        SoilArchetype::DarkLoam,
        SoilArchetype::Gravel,
    ];

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown soil archetype {id}")))
    }
}

pub fn soil_reflectance(archetype: SoilArchetype, grid: &BandGrid) -> Vec<f64> {
    grid.wavelengths()
        .iter()
        .map(|&nm| {
            let x = (nm - 400.0) / 1300.0;
            match archetype {
                SoilArchetype::BrightSand => 0.28 + 0.24 * x - 0.04 * x * x,
                SoilArchetype::DarkLoam => 0.07 + 0.13 * x,
                SoilArchetype::Gravel => 0.16 + 0.09 * (1.0 - (-(nm - 400.0) / 350.0).exp()),
            }
        })
        .collect()
}

/// Transmission of the incoming sunlight: water-vapour troughs near 940,
/// 1130 and 1400 nm, the last one almost opaque.
pub fn solar_envelope(grid: &BandGrid) -> Vec<f64> {
    const TROUGHS: [(f64, f64, f64); 3] = [
        (940.0, 18.0, 0.35),
        (1130.0, 22.0, 0.5),
        (1400.0, 45.0, 0.97),
    ];
    grid.wavelengths()
        .iter()
        .map(|&nm| {
            TROUGHS
                .iter()
                .map(|&(c, w, depth)| 1.0 - depth * (-0.5 * ((nm - c) / w).powi(2)).exp())
                .product()
        })
        .collect()
}

/// Band layout of generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    /// Evenly spaced over 400-1700 nm.
    Desk {
        count: usize,
    },
    /// 224 bands from two cameras.
    TwoCamera,
    Custom {
        wavelengths: Vec<f64>,
    },
}

impl GridSpec {
    pub fn build(&self) -> Result<BandGrid> {
        match self {
            GridSpec::Desk { count } => BandGrid::desk(*count),
            GridSpec::TwoCamera => Ok(BandGrid::two_camera()),
            GridSpec::Custom { wavelengths } => BandGrid::new(wavelengths.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub grid: GridSpec,
    /// Inclusive range of crowns per scene.
    pub tree_count: (usize, usize),
    pub tree_diameter_mean: f64,
    pub tree_diameter_std: f64,
    pub tree_diameter_min: f64,
    pub tree_diameter_max: f64,
    /// Fixed soil; drawn per scene when absent.
    pub soil_archetype: Option<SoilArchetype>,
    /// Standard deviation of the multiplicative per-band noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            grid: GridSpec::TwoCamera,
            tree_count: (150, 210),
            tree_diameter_mean: 50.0,
            tree_diameter_std: 10.0,
            tree_diameter_min: 20.0,
            tree_diameter_max: 80.0,
            soil_archetype: None,
            noise_sigma: 0.05,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    /// 256 x 256 scenes over 64 bands.
    pub fn desk() -> Self {
        Self {
            width: 256,
            height: 256,
            grid: GridSpec::Desk { count: 64 },
            tree_count: (10, 14),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if self.tree_count.0 > self.tree_count.1 {
            return bad("tree_count range is empty");
        }
        if !(self.tree_diameter_min > 0.0 && self.tree_diameter_min <= self.tree_diameter_max) {
            return bad("tree diameter bounds invalid");
        }
        if !(self.tree_diameter_std >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("negative spread");
        }
        self.grid
            .build()
            .map_err(|e| Error::Config(format!("scene grid: {e}")))?;
        Ok(())
    }
}

/// A placed crown.
#[derive(Debug, Clone, PartialEq)]
pub struct Crown {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
    pub params: LeafParams,
}

impl Crown {
    pub fn area(&self) -> f64 {
        PI * self.semi_a * self.semi_b
    }

    pub fn bounding_radius(&self) -> f64 {
        self.semi_a.max(self.semi_b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_a).powi(2) + (v / self.semi_b).powi(2) <= 1.0
    }
}

const SUBSAMPLES: usize = 4;
const PLACEMENT_RETRIES: usize = 2000;
const LAYOUT_RESTARTS: usize = 50;

/// Random sequential placement of non-overlapping crowns, largest first.
/// A layout that jams is discarded and restarted with the same shapes.
fn place_crowns<R: Rng>(config: &SceneConfig, rng: &mut R) -> Result<Vec<Crown>> {
    let target = rng.gen_range(config.tree_count.0..=config.tree_count.1);
    let diameter = Normal::new(config.tree_diameter_mean, config.tree_diameter_std)
        .map_err(|e| Error::Config(e.to_string()))?;
    let (w, h) = (config.width as f64, config.height as f64);
    let mut shapes: Vec<Crown> = Vec::with_capacity(target);
    for _ in 0..target {
        let d = diameter
            .sample(rng)
            .clamp(config.tree_diameter_min, config.tree_diameter_max);
        let aspect: f64 = rng.gen_range(0.8..1.25);
        let semi_a = 0.5 * d * aspect.sqrt();
        let semi_b = 0.5 * d / aspect.sqrt();
        let angle = rng.gen_range(0.0..PI);
        let crown = Crown {
            cx: 0.0,
            cy: 0.0,
            semi_a,
            semi_b,
            angle,
            params: LeafParams::zero(),
        };
        let r = crown.bounding_radius();
        if 2.0 * r > w || 2.0 * r > h {
            return Err(Error::Scene(format!(
                "crown of diameter {d:.1} does not fit a {w}x{h} scene"
            )));
        }
        shapes.push(crown);
    }
    shapes.sort_by(|a, b| b.bounding_radius().total_cmp(&a.bounding_radius()));

    let mut best = 0;
    for _ in 0..LAYOUT_RESTARTS {
        let mut crowns: Vec<Crown> = Vec::with_capacity(target);
        for shape in &shapes {
            let r = shape.bounding_radius();
            let before = crowns.len();
            for _ in 0..PLACEMENT_RETRIES {
                let cx = rng.gen_range(r..=w - r);
                let cy = rng.gen_range(r..=h - r);
                let clear = crowns.iter().all(|c| {
                    let min = c.bounding_radius() + r;
                    (c.cx - cx).powi(2) + (c.cy - cy).powi(2) >= min * min
                });
                if clear {
                    crowns.push(Crown {
                        cx,
                        cy,
                        ..shape.clone()
                    });
                    break;
                }
            }
            if crowns.len() == before {
                break;
            }
        }
        if crowns.len() == target {
            for c in &mut crowns {
                c.params = sample_leaf_params(rng);
            }
            return Ok(crowns);
        }
        best = best.max(crowns.len());
    }
    Err(Error::Scene(format!(
        "could not place {target} crowns; best of {LAYOUT_RESTARTS} layouts held {best}"
    )))
}

/// Fraction of each pixel covered by each crown, from a 4x4 supersample.
fn coverage(config: &SceneConfig, crowns: &[Crown]) -> Vec<Vec<(u32, f64)>> {
    let (w, h) = (config.width, config.height);
    let mut cover: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];
    let step = 1.0 / SUBSAMPLES as f64;
    for (ci, c) in crowns.iter().enumerate() {
        let r = c.bounding_radius();
        let x0 = (c.cx - r).floor().max(0.0) as usize;
        let x1 = ((c.cx + r).ceil() as usize).min(w);
        let y0 = (c.cy - r).floor().max(0.0) as usize;
        let y1 = ((c.cy + r).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += usize::from(c.contains(px, py));
                    }
                }
                if hits > 0 {
                    cover[y * w + x]
                        .push((ci as u32, hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64));
                }
            }
        }
    }
    cover
}

/// Generates a scene from `config.rng_seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<LabeledCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    generate_scene_with_rng(config, &mut rng).map(|(cube, _)| cube)
}

/// Generates a scene and returns the placed crowns alongside it.
pub fn generate_scene_with_rng<R: Rng>(
    config: &SceneConfig,
    rng: &mut R,
) -> Result<(LabeledCube, Vec<Crown>)> {
    config.validate()?;
    let grid = config.grid.build()?;
    let bands = grid.count();
    let crowns = place_crowns(config, rng)?;
    let soil_kind = match config.soil_archetype {
        Some(s) => s,
        None => SoilArchetype::ALL[rng.gen_range(0..SoilArchetype::ALL.len())],
    };
    let soil_gain: f64 = rng.gen_range(0.9..1.1);
    let soil: Vec<f64> = soil_reflectance(soil_kind, &grid)
        .iter()
        .map(|v| v * soil_gain)
        .collect();
    let leaves: Vec<Vec<f64>> = crowns
        .iter()
        .map(|c| leaf_reflectance(&c.params, &grid))
        .collect();
    let envelope = solar_envelope(&grid);
    let cover = coverage(config, &crowns);

    let npx = config.width * config.height;
    let mut data = vec![0f32; npx * bands];
    let mut mask = vec![0u8; npx];
    let mut labels = vec![LeafParams::zero(); npx];
    let mut spectrum = vec![0.0f64; bands];
    for (idx, parts) in cover.iter().enumerate() {
        let total: f64 = parts.iter().map(|(_, a)| a).sum();
        for b in 0..bands {
            let mut v = (1.0 - total) * soil[b];
            for &(ci, a) in parts {
                v += a * leaves[ci as usize][b];
            }
            spectrum[b] = v * envelope[b];
        }
        if config.noise_sigma > 0.0 {
            for v in spectrum.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = (*v * (1.0 + config.noise_sigma * e)).max(0.0);
            }
        }
        for (d, s) in data[idx * bands..(idx + 1) * bands]
            .iter_mut()
            .zip(&spectrum)
        {
            *d = *s as f32;
        }
        if total > 0.0 && total < 1.0 {
            mask[idx] |= MASK_MIXED;
        }
        if total >= 0.5 {
            let (ci, _) =
                parts
                    .iter()
                    .copied()
                    .fold((0, -1.0), |best, p| if p.1 > best.1 { p } else { best });
            mask[idx] |= MASK_TREE;
            labels[idx] = crowns[ci as usize].params;
        }
    }

    let mut cube = LabeledCube::new(
        config.width,
        config.height,
        grid,
        SpectralKind::Reflectance,
        data,
    )?;
    cube.truth = Some(GroundTruth {
        mask,
        labels: Some(labels),
    });
    cube.meta = CubeMeta {
        seed: Some(config.rng_seed),
        scene: Some(config.clone()),
        generator: Some(GENERATOR_VERSION.to_string()),
    };
    Ok((cube, crowns))
}

/// False-color preview from the bands nearest 660/550/450 nm, scaled by the
/// brightest of the three channels and gamma-encoded.
pub fn render_fake_rgb(cube: &LabeledCube) -> Result<RgbImage> {
    if !cube.grid.covers(450.0, 660.0) {
        return Err(Error::InvalidArgument(
            "band grid does not cover 450-660 nm".into(),
        ));
    }
    let idx = [
        cube.grid.nearest(660.0),
        cube.grid.nearest(550.0),
        cube.grid.nearest(450.0),
    ];
    let mut peak = 0.0f32;
    for px in cube.data.chunks_exact(cube.bands()) {
        for &i in &idx {
            peak = peak.max(px[i]);
        }
    }
    let mut img = RgbImage::new(cube.width as u32, cube.height as u32);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let px = cube.pixel(row, col);
            let rgb = idx.map(|i| {
                if peak <= 0.0 {
                    0
                } else {
                    let v = (px[i] / peak).clamp(0.0, 1.0);
                    (v.powf(1.0 / 2.2) * 255.0).round() as u8
                }
            });
            img.put_pixel(col as u32, row as u32, Rgb(rgb));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BandGrid {
        BandGrid::desk(64).unwrap()
    }

    fn typical_leaf() -> LeafParams {
        LeafParams {
            n: 1.5,
            ab: 30.0,
            ar: 9.0,
            brown: 0.3,
            w: 0.012,
            m: 0.008,
            ant: 1.0,
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_leaf_params(&mut a), sample_leaf_params(&mut b));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ant: Vec<f64> = Vec::new();
        for _ in 0..10_000 {
            let p = sample_leaf_params(&mut rng);
            assert!((10.0..=50.0).contains(&p.ab), "ab {}", p.ab);
            assert!((4.0..=14.0).contains(&p.ar), "ar {}", p.ar);
            assert!(p.is_valid());
            ant.push(p.ant);
        }
        ant.sort_by(f64::total_cmp);
        let median = ant[ant.len() / 2];
        assert!((0.8..=1.2).contains(&median), "median ant {median}");
    }

    #[test]
    fn zero_content_leaf_is_baseline() {
        let p = LeafParams {
            n: 1.0,
            ..LeafParams::zero()
        };
        let r = leaf_reflectance(&p, &grid());
        for (v, nm) in r.iter().zip(grid().wavelengths()) {
            assert_eq!(*v, leaf_baseline(*nm, 1.0));
        }
    }

    #[test]
    fn more_chlorophyll_is_darker_at_660() {
        let g = BandGrid::new(vec![660.0]).unwrap();
        let lo = leaf_reflectance(
            &LeafParams {
                ab: 10.0,
                ..typical_leaf()
            },
            &g,
        );
        let hi = leaf_reflectance(
            &LeafParams {
                ab: 50.0,
                ..typical_leaf()
            },
            &g,
        );
        assert!(hi[0] < lo[0]);
    }

    #[test]
    fn reflectance_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r = leaf_reflectance(&sample_leaf_params(&mut rng), &BandGrid::two_camera());
            assert!(r.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn distinct_leaves_distinct_spectra() {
        let a = leaf_reflectance(&typical_leaf(), &grid());
        let b = leaf_reflectance(
            &LeafParams {
                ab: 42.0,
                ar: 5.0,
                ..typical_leaf()
            },
            &grid(),
        );
        assert_ne!(a, b);
    }

    #[test]
    fn soils_distinct_and_far_from_leaf() {
        let g = grid();
        let leaf = leaf_reflectance(&typical_leaf(), &g);
        let soils: Vec<_> = SoilArchetype::ALL
            .iter()
            .map(|s| soil_reflectance(*s, &g))
            .collect();
        for (i, s) in soils.iter().enumerate() {
            assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
            let d: f64 = s
                .iter()
                .zip(&leaf)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d > 0.1 * (g.count() as f64).sqrt(), "soil {i} distance {d}");
            for t in &soils[i + 1..] {
                assert_ne!(s, t);
            }
        }
        assert_eq!(soil_reflectance(SoilArchetype::Gravel, &g), soils[2]);
        assert!(SoilArchetype::from_id(3).is_err());
    }

    #[test]
    fn soil_has_no_red_dip() {
        let g = BandGrid::linspace(600.0, 720.0, 13).unwrap();
        for s in SoilArchetype::ALL {
            let r = soil_reflectance(s, &g);
            assert!(r.windows(2).all(|w| w[1] >= w[0]), "{s:?}");
        }
    }

    #[test]
    fn envelope_has_deep_water_trough() {
        let g = grid();
        let env = solar_envelope(&g);
        assert!(env[g.nearest(1400.0)] < 0.1);
        assert!(env[g.nearest(550.0)] > 0.99);
    }

    fn one_tree_config() -> SceneConfig {
        SceneConfig {
            width: 96,
            height: 96,
            grid: GridSpec::Desk { count: 16 },
            tree_count: (1, 1),
            noise_sigma: 0.0,
            rng_seed: 3,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn noiseless_crown_interior_is_uniform() {
        let cube = generate_scene(&one_tree_config()).unwrap();
        let truth = cube.truth.as_ref().unwrap();
        let interior: Vec<usize> = (0..cube.pixels())
            .filter(|&i| truth.is_tree(i) && !truth.is_mixed(i))
            .collect();
        assert!(interior.len() > 300);
        let b = cube.bands();
        let first = &cube.data[interior[0] * b..(interior[0] + 1) * b];
        for &i in &interior {
            assert_eq!(&cube.data[i * b..(i + 1) * b], first);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            width: 192,
            height: 192,
            tree_count: (3, 5),
            noise_sigma: 0.05,
            ..one_tree_config()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    }

    #[test]
    fn mask_area_matches_ellipses() {
        let cfg = SceneConfig {
            width: 256,
            height: 256,
            tree_count: (6, 6),
            ..one_tree_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cube, crowns) = generate_scene_with_rng(&cfg, &mut rng).unwrap();
        let truth = cube.truth.unwrap();
        let mask_area = (0..cube.width * cube.height)
            .filter(|&i| truth.is_tree(i))
            .count() as f64;
        let ellipse_area: f64 = crowns.iter().map(Crown::area).sum();
        assert!(
            (mask_area - ellipse_area).abs() / ellipse_area < 0.05,
            "{mask_area} vs {ellipse_area}"
        );
    }

    #[test]
    fn labels_defined_exactly_on_mask_and_pure_per_crown() {
        let cfg = SceneConfig {
            width: 192,
            height: 192,
            tree_count: (4, 4),
            ..one_tree_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cube, crowns) = generate_scene_with_rng(&cfg, &mut rng).unwrap();
        let truth = cube.truth.unwrap();
        let labels = truth.labels.as_ref().unwrap();
        for row in 0..cube.height {
            for col in 0..cube.width {
                let i = row * cube.width + col;
                if truth.is_tree(i) {
                    assert!(crowns.iter().any(|c| c.params == labels[i]));
                    if !truth.is_mixed(i) {
                        let owner = crowns
                            .iter()
                            .find(|c| c.contains(col as f64 + 0.5, row as f64 + 0.5))
                            .unwrap();
                        assert_eq!(owner.params, labels[i]);
                    }
                } else {
                    assert_eq!(labels[i], LeafParams::zero());
                }
            }
        }
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let cfg = SceneConfig {
            width: 100,
            height: 100,
            tree_count: (40, 40),
            ..one_tree_config()
        };
        assert!(matches!(generate_scene(&cfg), Err(Error::Scene(_))));
    }

    #[test]
    fn fake_rgb_green_over_crowns() {
        let cube = generate_scene(&one_tree_config()).unwrap();
        let img = render_fake_rgb(&cube).unwrap();
        assert_eq!(
            (img.width() as usize, img.height() as usize),
            (cube.width, cube.height)
        );
        let truth = cube.truth.as_ref().unwrap();
        let mut checked = 0;
        for i in (0..cube.pixels()).filter(|&i| truth.is_tree(i) && !truth.is_mixed(i)) {
            let p = img.get_pixel((i % cube.width) as u32, (i / cube.width) as u32);
            assert!(p[1] > p[0]);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn fake_rgb_black_for_zero_cube() {
        let g = grid();
        let cube = LabeledCube::new(
            3,
            2,
            g.clone(),
            SpectralKind::Reflectance,
            vec![0.0; 6 * g.count()],
        )
        .unwrap();
        let img = render_fake_rgb(&cube).unwrap();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
        let nir = BandGrid::desk(4)
            .unwrap()
            .wavelengths()
            .iter()
            .map(|w| w + 400.0)
            .collect();
        let cube = LabeledCube::new(
            1,
            1,
            BandGrid::new(nir).unwrap(),
            SpectralKind::Reflectance,
            vec![0.0; 4],
        )
        .unwrap();
        assert!(render_fake_rgb(&cube).is_err());
    }
}
