//! Tiles, validity masks, coverage and datasets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tile edge length used throughout the experiments.
pub const TILE_SIZE: usize = 32;

/// Value stored in missing pixels by the generators. Any value is allowed
/// there; imputation overwrites it before a tile reaches a model.
pub const MISSING_PLACEHOLDER: f32 = -9999.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TileError {
    #[error("tile `{id}`: dimensions must be positive (got {channels}x{height}x{width})")]
    EmptyShape {
        id: String,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("tile `{id}`: expected {expected} pixel values, got {actual}")]
    PixelCount {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("tile `{id}`: expected {expected} mask entries, got {actual}")]
    MaskCount {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("tile `{id}`: non-finite pixel value at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("tile `{id}`: latitude {lat} outside [-90, 90]")]
    Latitude { id: String, lat: f64 },
    #[error("tile `{id}`: longitude {lon} outside [-180, 180)")]
    Longitude { id: String, lon: f64 },
    #[error("tile `{id}` has shape {found:?}, dataset declares {declared:?}")]
    ShapeMismatch {
        id: String,
        found: (usize, usize, usize),
        declared: (usize, usize, usize),
    },
    #[error("duplicate tile id `{0}`")]
    DuplicateId(String),
    #[error("unknown split tag `{0}`")]
    UnknownSplit(String),
}

/// Everything needed to build a [`Tile`]. Pixels are row-major `C×H×W`,
/// the mask row-major `H×W` with `true` meaning valid.
#[derive(Debug, Clone, PartialEq)]
pub struct TileParts {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
    pub label: Option<bool>,
    pub lat: f64,
    pub lon: f64,
}

/// One multi-channel raster patch. The mask is shared by all channels.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    id: String,
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    mask: Vec<bool>,
    valid_count: usize,
    label: Option<bool>,
    lat: f64,
    lon: f64,
}

impl Tile {
    pub fn from_parts(parts: TileParts) -> Result<Self, TileError> {
        let TileParts {
            id,
            channels,
            height,
            width,
            pixels,
            mask,
            label,
            lat,
            lon,
        } = parts;
        if channels == 0 || height == 0 || width == 0 {
            return Err(TileError::EmptyShape {
                id,
                channels,
                height,
                width,
            });
        }
        let plane = height * width;
        if pixels.len() != channels * plane {
            return Err(TileError::PixelCount {
                id,
                expected: channels * plane,
                actual: pixels.len(),
            });
        }
        if mask.len() != plane {
            return Err(TileError::MaskCount {
                id,
                expected: plane,
                actual: mask.len(),
            });
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(TileError::NonFinite { id, index });
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(TileError::Latitude { id, lat });
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(TileError::Longitude { id, lon });
        }
        let valid_count = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            id,
            channels,
            height,
            width,
            pixels,
            mask,
            valid_count,
            label,
            lat,
            lon,
        })
    }

    pub fn into_parts(self) -> TileParts {
        TileParts {
            id: self.id,
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels,
            mask: self.mask,
            label: self.label,
            lat: self.lat,
            lon: self.lon,
        }
    }

    /// Same tile with replaced pixel values (mask, id, label, location kept).
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Result<Self, TileError> {
        Self::from_parts(TileParts {
            id: self.id.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            mask: self.mask.clone(),
            label: self.label,
            lat: self.lat,
            lon: self.lon,
        })
    }

    /// Same tile with a different label.
    pub fn with_label(&self, label: Option<bool>) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixels of one channel, row-major `H×W`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.pixels[c * plane..(c + 1) * plane]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn label(&self) -> Option<bool> {
        self.label
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn coverage(&self) -> Coverage {
        compute_coverage(self)
    }
}

/// Fraction of valid pixels in a tile, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Coverage(f64);

impl Coverage {
    /// `None` unless `value` lies in `[0, 1]`.
    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub fn compute_coverage(tile: &Tile) -> Coverage {
    Coverage(tile.valid_count as f64 / (tile.height * tile.width) as f64)
}

/// Coverage group used by the fairness metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoverageGroup {
    Low,
    High,
}

/// Low iff `coverage < threshold`; a tile exactly at the threshold is high.
pub fn coverage_group(coverage: f64, threshold: f64) -> CoverageGroup {
    if coverage < threshold {
        CoverageGroup::Low
    } else {
        CoverageGroup::High
    }
}

/// Partition tiles into (low, high) coverage groups, preserving order.
pub fn split_groups(tiles: &[Tile], threshold: f64) -> (Vec<&Tile>, Vec<&Tile>) {
    tiles
        .iter()
        .partition(|t| coverage_group(t.coverage().value(), threshold) == CoverageGroup::Low)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Deploy,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Deploy => "deploy",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = TileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            "deploy" => Ok(SplitTag::Deploy),
            other => Err(TileError::UnknownSplit(other.to_string())),
        }
    }
}

/// Ordered tiles sharing one `C×H×W` shape, with unique ids.
///
/// `attrs` carries free-form metadata (generator config, scene extent) and
/// is stored in the manifest alongside the tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: SplitTag,
    channels: usize,
    height: usize,
    width: usize,
    tiles: Vec<Tile>,
    attrs: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        split: SplitTag,
        (channels, height, width): (usize, usize, usize),
        tiles: Vec<Tile>,
    ) -> Result<Self, TileError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TileError::EmptyShape {
                id: "<dataset>".into(),
                channels,
                height,
                width,
            });
        }
        let mut seen = HashSet::with_capacity(tiles.len());
        for t in &tiles {
            if t.shape() != (channels, height, width) {
                return Err(TileError::ShapeMismatch {
                    id: t.id.clone(),
                    found: t.shape(),
                    declared: (channels, height, width),
                });
            }
            if !seen.insert(t.id.as_str()) {
                return Err(TileError::DuplicateId(t.id.clone()));
            }
        }
        Ok(Self {
            split,
            channels,
            height,
            width,
            tiles,
            attrs: BTreeMap::new(),
        })
    }

    pub fn with_attrs(mut self, attrs: BTreeMap<String, String>) -> Self {
        self.attrs = attrs;
        self
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn into_tiles(self) -> Vec<Tile> {
        self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn attrs(&self) -> &BTreeMap<String, String> {
        &self.attrs
    }

    pub fn coverages(&self) -> Vec<f64> {
        self.tiles.iter().map(|t| t.coverage().value()).collect()
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    /// Single-channel tile with the given valid values followed by
    /// `missing` placeholder pixels, laid out on a `1×n` strip.
    pub fn strip(values: &[f32], missing: usize) -> Tile {
        let mut pixels = values.to_vec();
        pixels.extend(std::iter::repeat_n(MISSING_PLACEHOLDER, missing));
        let mut mask = vec![true; values.len()];
        mask.extend(std::iter::repeat_n(false, missing));
        Tile::from_parts(TileParts {
            id: "strip".into(),
            channels: 1,
            height: 1,
            width: pixels.len(),
            pixels,
            mask,
            label: Some(true),
            lat: 0.0,
            lon: 0.0,
        })
        .unwrap()
    }

    pub fn square(id: &str, valid: usize) -> Tile {
        let plane = TILE_SIZE * TILE_SIZE;
        let mask: Vec<bool> = (0..plane).map(|i| i < valid).collect();
        Tile::from_parts(TileParts {
            id: id.into(),
            channels: 1,
            height: TILE_SIZE,
            width: TILE_SIZE,
            pixels: vec![1.0; plane],
            mask,
            label: None,
            lat: 0.0,
            lon: 0.0,
        })
        .unwrap()
    }
}
