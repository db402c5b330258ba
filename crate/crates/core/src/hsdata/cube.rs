//! Binary cube container.
//!
//! Layout:
//!
//! ```text
//! "OHSLICUB"                      8-byte magic
//! u32 LE header length            followed by that many bytes of UTF-8 JSON
//! f32 LE payload                  band-interleaved-by-line: row, band, column
//! [ "MASK" + 1 byte per pixel ]   bit 0 = tree, bit 1 = mixed edge pixel
//! [ "LABL" + 7 f32 per pixel ]    leaf parameters, zero where not tree
//! ```
//!
//! The header carries a CRC-32 of every byte after it.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BandGrid, SpectralKind, SpectralLine};
use crate::error::{Error, Result};
use crate::synthgen::{LeafParams, SceneConfig};

pub const CUBE_MAGIC: &[u8; 8] = b"OHSLICUB";
const MASK_TAG: &[u8; 4] = b"MASK";
const LABELS_TAG: &[u8; 4] = b"LABL";

pub const MASK_TREE: u8 = 1;
pub const MASK_MIXED: u8 = 2;

/// Provenance stored in the cube header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

/// Per-pixel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// [`MASK_TREE`] / [`MASK_MIXED`] bit flags.
    pub mask: Vec<u8>,
    /// Leaf parameters; meaningful only where the tree bit is set.
    pub labels: Option<Vec<LeafParams>>,
}

impl GroundTruth {
    pub fn is_tree(&self, idx: usize) -> bool {
        self.mask[idx] & MASK_TREE != 0
    }

    pub fn is_mixed(&self, idx: usize) -> bool {
        self.mask[idx] & MASK_MIXED != 0
    }
}

/// A full image: `height` lines of `width` pixels over a band grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCube {
    pub width: usize,
    pub height: usize,
    pub grid: BandGrid,
    pub kind: SpectralKind,
    /// Row-major, pixel-interleaved: `data[(row * width + col) * bands + band]`.
    pub data: Vec<f32>,
    pub truth: Option<GroundTruth>,
    pub meta: CubeMeta,
}

impl LabeledCube {
    pub fn new(
        width: usize,
        height: usize,
        grid: BandGrid,
        kind: SpectralKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        let cube = Self {
            width,
            height,
            grid,
            kind,
            data,
            truth: None,
            meta: CubeMeta::default(),
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn bands(&self) -> usize {
        self.grid.count()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dimension(
                "cube needs positive width and height".into(),
            ));
        }
        if self.data.len() != self.pixels() * self.bands() {
            return Err(Error::Dimension(format!(
                "cube data has {} values, expected {} x {} x {}",
                self.data.len(),
                self.height,
                self.width,
                self.bands()
            )));
        }
        if let Some(t) = &self.truth {
            if t.mask.len() != self.pixels() {
                return Err(Error::Dimension("mask size differs from cube".into()));
            }
            if let Some(l) = &t.labels {
                if l.len() != self.pixels() {
                    return Err(Error::Dimension("label count differs from cube".into()));
                }
            }
        }
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let b = self.bands();
        let start = (row * self.width + col) * b;
        &self.data[start..start + b]
    }

    /// One line as an `f64` [`SpectralLine`].
    pub fn line(&self, row: usize) -> Result<SpectralLine> {
        let b = self.bands();
        let start = row * self.width * b;
        let values = self.data[start..start + self.width * b]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        SpectralLine::new(self.width, b, values, self.kind, row)
    }

    pub fn header(&self) -> CubeHeader {
        CubeHeader {
            width: self.width,
            height: self.height,
            bands: self.bands(),
            wavelengths: self.grid.clone(),
            kind: self.kind,
            has_mask: self.truth.is_some(),
            has_labels: self.truth.as_ref().is_some_and(|t| t.labels.is_some()),
            seed: self.meta.seed,
            checksum: 0,
            scene: self.meta.scene.clone(),
            generator: self.meta.generator.clone(),
        }
    }
}

/// JSON header written after the magic bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub wavelengths: BandGrid,
    pub kind: SpectralKind,
    pub has_mask: bool,
    pub has_labels: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    pub checksum: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

impl CubeHeader {
    /// Size in bytes of the spectral payload.
    pub fn payload_len(&self) -> usize {
        self.width * self.height * self.bands * 4
    }

    fn body_len(&self) -> usize {
        let px = self.width * self.height;
        let mut n = self.payload_len();
        if self.has_mask {
            n += 4 + px;
        }
        if self.has_labels {
            n += 4 + px * LeafParams::FIELDS * 4;
        }
        n
    }
}

fn encode_body(cube: &LabeledCube) -> Vec<u8> {
    let (w, h, b) = (cube.width, cube.height, cube.bands());
    let header = cube.header();
    let mut body = Vec::with_capacity(header.body_len());
    for row in 0..h {
        for band in 0..b {
            for col in 0..w {
                body.extend_from_slice(&cube.data[(row * w + col) * b + band].to_le_bytes());
            }
        }
    }
    if let Some(t) = &cube.truth {
        body.extend_from_slice(MASK_TAG);
        body.extend_from_slice(&t.mask);
        if let Some(labels) = &t.labels {
            body.extend_from_slice(LABELS_TAG);
            for p in labels {
                for v in p.to_array() {
                    body.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    body
}

/// Serializes `cube` into `writer`.
pub fn write_cube_to<W: Write>(cube: &LabeledCube, mut writer: W) -> Result<()> {
    cube.validate()?;
    let body = encode_body(cube);
    let mut header = cube.header();
    header.checksum = crc32fast::hash(&body);
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    writer.write_all(CUBE_MAGIC)?;
    writer.write_all(&len.to_le_bytes())?;
    writer.write_all(&json)?;
    writer.write_all(&body)?;
    writer.flush()?;
    Ok(())
}

pub fn write_cube(cube: &LabeledCube, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_cube_to(cube, BufWriter::new(file))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<LabeledCube> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_cube(&bytes)
}

/// Reads only the magic and header of a cube file.
pub fn read_cube_header(path: impl AsRef<Path>) -> Result<CubeHeader> {
    let mut file = File::open(path)?;
    let mut prefix = [0u8; 12];
    file.read_exact(&mut prefix)
        .map_err(|_| Error::Format("file shorter than preamble".into()))?;
    let len = check_preamble(&prefix)?;
    let mut json = vec![0u8; len];
    file.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated header".into()))?;
    parse_header(&json)
}

fn check_preamble(prefix: &[u8]) -> Result<usize> {
    if prefix.len() < 12 {
        return Err(Error::Format("file shorter than preamble".into()));
    }
    if &prefix[..8] != CUBE_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    Ok(u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as usize)
}

fn parse_header(json: &[u8]) -> Result<CubeHeader> {
    let header: CubeHeader = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    if header.bands != header.wavelengths.count() {
        return Err(Error::Format(
            "band count disagrees with wavelength list".into(),
        ));
    }
    if header.has_labels && !header.has_mask {
        return Err(Error::Format("labels present without mask".into()));
    }
    Ok(header)
}

pub fn decode_cube(bytes: &[u8]) -> Result<LabeledCube> {
    let len = check_preamble(bytes)?;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header = parse_header(json)?;
    let body = &bytes[12 + len..];
    let expected_len = header.body_len();
    if body.len() < expected_len {
        return Err(Error::Format(format!(
            "truncated payload: {} of {expected_len} bytes",
            body.len()
        )));
    }
    if body.len() > expected_len {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    let actual = crc32fast::hash(body);
    if actual != header.checksum {
        return Err(Error::Checksum {
            expected: header.checksum,
            actual,
        });
    }

    let (w, h, b) = (header.width, header.height, header.bands);
    let mut data = vec![0f32; w * h * b];
    let mut floats = body[..header.payload_len()].chunks_exact(4);
    for row in 0..h {
        for band in 0..b {
            for col in 0..w {
                let c = floats.next().unwrap();
                data[(row * w + col) * b + band] = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
    }

    let mut rest = &body[header.payload_len()..];
    let truth = if header.has_mask {
        let (tag, tail) = rest.split_at(4);
        if tag != MASK_TAG {
            return Err(Error::Format("missing MASK section tag".into()));
        }
        let (mask, tail) = tail.split_at(w * h);
        rest = tail;
        let labels = if header.has_labels {
            let (tag, tail) = rest.split_at(4);
            if tag != LABELS_TAG {
                return Err(Error::Format("missing LABL section tag".into()));
            }
            let labels = tail
                .chunks_exact(4 * LeafParams::FIELDS)
                .map(|rec| {
                    let mut a = [0.0f64; LeafParams::FIELDS];
                    for (i, c) in rec.chunks_exact(4).enumerate() {
                        a[i] = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
                    }
                    LeafParams::from_array(a)
                })
                .collect();
            Some(labels)
        } else {
            None
        };
        Some(GroundTruth {
            mask: mask.to_vec(),
            labels,
        })
    } else {
        None
    };

    let cube = LabeledCube {
        width: w,
        height: h,
        grid: header.wavelengths,
        kind: header.kind,
        data,
        truth,
        meta: CubeMeta {
            seed: header.seed,
            scene: header.scene,
            generator: header.generator,
        },
    };
    cube.validate()?;
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cube(w: usize, h: usize, b: usize, seed: u32) -> LabeledCube {
        let grid = BandGrid::linspace(400.0, 1000.0, b).unwrap();
        let data = (0..w * h * b)
            .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 4e9)
            .collect();
        let mut cube = LabeledCube::new(w, h, grid, SpectralKind::Reflectance, data).unwrap();
        let mask: Vec<u8> = (0..w * h)
            .map(|i| (i % 3 == 0) as u8 | if i % 5 == 0 { MASK_MIXED } else { 0 })
            .collect();
        let labels = mask
            .iter()
            .map(|m| {
                if m & MASK_TREE != 0 {
                    LeafParams {
                        n: 1.5,
                        ab: 31.25,
                        ar: 7.0,
                        brown: 0.125,
                        w: 0.0125f32 as f64,
                        m: 0.005f32 as f64,
                        ant: 1.0,
                    }
                } else {
                    LeafParams::zero()
                }
            })
            .collect();
        cube.truth = Some(GroundTruth {
            mask,
            labels: Some(labels),
        });
        cube.meta.seed = Some(seed as u64);
        cube
    }

    fn encode(cube: &LabeledCube) -> Vec<u8> {
        let mut buf = Vec::new();
        write_cube_to(cube, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_small() {
        let cube = small_cube(4, 4, 8, 1);
        let back = decode_cube(&encode(&cube)).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut buf = encode(&small_cube(4, 4, 8, 1));
        buf[0] = b'X';
        assert!(matches!(decode_cube(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let buf = encode(&small_cube(4, 4, 8, 1));
        assert!(matches!(
            decode_cube(&buf[..buf.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut buf = encode(&small_cube(4, 4, 8, 1));
        let n = buf.len();
        buf[n - 40] ^= 0x55;
        assert!(matches!(decode_cube(&buf), Err(Error::Checksum { .. })));
    }

    #[test]
    fn payload_is_band_interleaved_by_line() {
        let grid = BandGrid::linspace(400.0, 500.0, 2).unwrap();
        // pixel-interleaved in memory: (c0b0, c0b1, c1b0, c1b1)
        let cube =
            LabeledCube::new(2, 1, grid, SpectralKind::Raw, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let buf = encode(&cube);
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let floats: Vec<f32> = buf[12 + len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn full_geometry_payload_size() {
        let header = CubeHeader {
            width: 1024,
            height: 1024,
            bands: 224,
            wavelengths: BandGrid::two_camera(),
            kind: SpectralKind::Reflectance,
            has_mask: false,
            has_labels: false,
            seed: None,
            checksum: 0,
            scene: None,
            generator: None,
        };
        assert_eq!(header.payload_len(), 1024 * 1024 * 224 * 4);
    }

    proptest! {
        #[test]
        fn read_write_identity(w in 1usize..6, h in 1usize..6, b in 1usize..9, seed in any::<u32>(), labelled in any::<bool>()) {
            let mut cube = small_cube(w, h, b, seed);
            if !labelled {
                cube.truth = None;
            }
            let back = decode_cube(&encode(&cube)).unwrap();
            prop_assert_eq!(back, cube);
        }
    }
}
