//! Spectral data model: band grids, push-broom lines, reflectance
//! calibration, per-band normalization and the on-disk cube format.

mod cube;

pub use cube::{
    decode_cube, read_cube, read_cube_header, write_cube, write_cube_to, CubeHeader, CubeMeta,
    GroundTruth, LabeledCube, CUBE_MAGIC, MASK_MIXED, MASK_TREE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to the per-band standard deviation during normalization.
pub const NORM_EPSILON: f64 = 1e-8;

/// Center wavelengths (nm) of the sensor bands, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BandGrid {
    wavelengths: Vec<f64>,
}

impl BandGrid {
    pub fn new(wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::InvalidArgument(
                "band grid needs at least one band".into(),
            ));
        }
        if wavelengths.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "band grid has a non-finite wavelength".into(),
            ));
        }
        if let Some(i) = wavelengths.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "wavelengths not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { wavelengths })
    }

    /// `count` evenly spaced bands from `start` to `end` inclusive.
    pub fn linspace(start: f64, end: f64, count: usize) -> Result<Self> {
        match count {
            0 => Err(Error::InvalidArgument("band count must be >= 1".into())),
            1 => Self::new(vec![start]),
            _ => {
                let step = (end - start) / (count - 1) as f64;
                Self::new((0..count).map(|i| start + step * i as f64).collect())
            }
        }
    }

    /// Desk-scale grid: `count` bands spanning 400-1700 nm.
    pub fn desk(count: usize) -> Result<Self> {
        Self::linspace(400.0, 1700.0, count)
    }

    /// Two-camera layout: 112 VNIR bands over 400-1000 nm plus 112 SWIR bands
    /// over 900-1700 nm, merged into one increasing grid.
    pub fn two_camera() -> Self {
        let mut w: Vec<f64> = (0..112)
            .map(|i| 400.0 + 600.0 * i as f64 / 111.0)
            .chain((0..112).map(|i| 900.0 + 800.0 * i as f64 / 111.0))
            .collect();
        w.sort_by(f64::total_cmp);
        Self::new(w).expect("two-camera grid has no duplicate wavelengths")
    }

    pub fn count(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Index of the band whose center is closest to `nm`.
    pub fn nearest(&self, nm: f64) -> usize {
        let mut best = 0;
        for (i, w) in self.wavelengths.iter().enumerate() {
            if (w - nm).abs() < (self.wavelengths[best] - nm).abs() {
                best = i;
            }
        }
        best
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        self.wavelengths[0] <= lo && *self.wavelengths.last().unwrap() >= hi
    }
}

impl TryFrom<Vec<f64>> for BandGrid {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<BandGrid> for Vec<f64> {
    fn from(g: BandGrid) -> Self {
        g.wavelengths
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralKind {
    Raw,
    Reflectance,
    /// Per-pixel model outputs rather than a spectrum.
    Features,
}

/// One push-broom line: `width` pixels, each with `bands` values, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLine {
    width: usize,
    bands: usize,
    values: Vec<f64>,
    kind: SpectralKind,
    row_index: usize,
}

impl SpectralLine {
    pub fn new(
        width: usize,
        bands: usize,
        values: Vec<f64>,
        kind: SpectralKind,
        row_index: usize,
    ) -> Result<Self> {
        if width == 0 || bands == 0 {
            return Err(Error::Dimension(
                "line width and band count must be positive".into(),
            ));
        }
        if values.len() != width * bands {
            return Err(Error::Dimension(format!(
                "line has {} values, expected {width} x {bands}",
                values.len()
            )));
        }
        if kind == SpectralKind::Reflectance && values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "reflectance must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            bands,
            values,
            kind,
            row_index,
        })
    }

    pub fn from_pixels(pixels: &[Vec<f64>], kind: SpectralKind, row_index: usize) -> Result<Self> {
        let bands = pixels.first().map_or(0, Vec::len);
        if pixels.iter().any(|p| p.len() != bands) {
            return Err(Error::Dimension("pixels have differing band counts".into()));
        }
        Self::new(pixels.len(), bands, pixels.concat(), kind, row_index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn kind(&self) -> SpectralKind {
        self.kind
    }

    pub fn row_index(&self) -> usize {
        self.row_index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, col: usize) -> &[f64] {
        &self.values[col * self.bands..(col + 1) * self.bands]
    }

    /// Number of reflectance values above 1 (specular outliers).
    pub fn outlier_count(&self) -> usize {
        if self.kind != SpectralKind::Reflectance {
            return 0;
        }
        self.values.iter().filter(|v| **v > 1.0).count()
    }
}

/// White and dark reference spectra, shared by every pixel of the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRefs {
    white: Vec<f64>,
    dark: Vec<f64>,
}

impl CalibrationRefs {
    pub fn new(white: Vec<f64>, dark: Vec<f64>) -> Result<Self> {
        if white.len() != dark.len() {
            return Err(Error::Dimension(format!(
                "white has {} bands, dark has {}",
                white.len(),
                dark.len()
            )));
        }
        for (band, (&w, &d)) in white.iter().zip(&dark).enumerate() {
            if !(w > d) {
                return Err(Error::Calibration {
                    band,
                    white: w,
                    dark: d,
                });
            }
        }
        Ok(Self { white, dark })
    }

    /// Dark reference of zero in every band.
    pub fn with_zero_dark(white: Vec<f64>) -> Result<Self> {
        let dark = vec![0.0; white.len()];
        Self::new(white, dark)
    }

    pub fn white(&self) -> &[f64] {
        &self.white
    }

    pub fn dark(&self) -> &[f64] {
        &self.dark
    }

    pub fn bands(&self) -> usize {
        self.white.len()
    }
}

/// Converts raw intensities to reflectance: `(I - D) / (W - D)` per band.
pub fn calibrate_reflectance(line: &SpectralLine, refs: &CalibrationRefs) -> Result<SpectralLine> {
    if line.kind != SpectralKind::Raw {
        return Err(Error::InvalidArgument(
            "calibration expects a raw line".into(),
        ));
    }
    if line.bands != refs.bands() {
        return Err(Error::Dimension(format!(
            "line has {} bands, references have {}",
            line.bands,
            refs.bands()
        )));
    }
    let values = line
        .values
        .chunks_exact(line.bands)
        .flat_map(|px| {
            px.iter()
                .zip(refs.white.iter().zip(&refs.dark))
                .map(|(i, (w, d))| (i - d) / (w - d))
        })
        .collect();
    SpectralLine::new(
        line.width,
        line.bands,
        values,
        SpectralKind::Reflectance,
        line.row_index,
    )
}

/// Inverse of [`calibrate_reflectance`]: `R * (W - D) + D`.
pub fn uncalibrate(line: &SpectralLine, refs: &CalibrationRefs) -> Result<SpectralLine> {
    if line.bands != refs.bands() {
        return Err(Error::Dimension(
            "band count differs from references".into(),
        ));
    }
    let values = line
        .values
        .chunks_exact(line.bands)
        .flat_map(|px| {
            px.iter()
                .zip(refs.white.iter().zip(&refs.dark))
                .map(|(r, (w, d))| r * (w - d) + d)
        })
        .collect();
    SpectralLine::new(
        line.width,
        line.bands,
        values,
        SpectralKind::Raw,
        line.row_index,
    )
}

/// Per-band mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over `samples`; all must share one length.
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for s in samples {
            if n == 0 {
                sum = vec![0.0; s.len()];
                sum_sq = vec![0.0; s.len()];
            } else if s.len() != sum.len() {
                return Err(Error::Dimension("samples have differing lengths".into()));
            }
            for (b, v) in s.iter().enumerate() {
                sum[b] += v;
                sum_sq[b] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InsufficientData(
                "no samples for normalization".into(),
            ));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / nf - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }
}

/// Per-band z-score: `(x - mean) / (std + 1e-8)`.
pub fn normalize_spectrum(spectrum: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spectrum.len()];
    normalize_into(spectrum, stats, &mut out)?;
    Ok(out)
}

pub fn normalize_into(spectrum: &[f64], stats: &NormStats, out: &mut [f64]) -> Result<()> {
    if spectrum.len() != stats.bands() || out.len() != spectrum.len() {
        return Err(Error::Dimension(format!(
            "spectrum has {} bands, normalization stats have {}",
            spectrum.len(),
            stats.bands()
        )));
    }
    for (b, o) in out.iter_mut().enumerate() {
        *o = (spectrum[b] - stats.mean[b]) / (stats.std[b] + NORM_EPSILON);
    }
    Ok(())
}
