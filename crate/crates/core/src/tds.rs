//! The `.tds` on-disk dataset format.
//!
//! A dataset is two files. The manifest (`name.tds`) is TOML:
//!
//! ```toml
//! format = "tds"
//! version = 1
//! tile_count = 2
//! channels = 3
//! height = 32
//! width = 32
//! split_tag = "train"
//! payload = "name.bin"
//!
//! [attrs]            # optional free-form string metadata
//!
//! [[tiles]]
//! id = "train_000000"
//! label = 1          # omitted for unlabeled tiles
//! lat = 12.5
//! lon = -3.25
//! offset = 0         # byte offset of this tile in the payload
//! ```
//!
//! The payload holds, per tile and in manifest order, `C·H·W` little-endian
//! `f32` values (row-major `C×H×W`) followed by `H·W` mask bytes that are
//! strictly 0 (missing) or 1 (valid).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tiles::{Dataset, SplitTag, Tile, TileError, TileParts};

const FORMAT: &str = "tds";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TdsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate tile id `{0}`")]
    DuplicateId(String),
    #[error("invalid mask byte {value} in tile `{id}`")]
    MaskByte { id: String, value: u8 },
    #[error(transparent)]
    Tile(TileError),
}

impl From<TileError> for TdsError {
    fn from(e: TileError) -> Self {
        match e {
            TileError::DuplicateId(id) => TdsError::DuplicateId(id),
            TileError::ShapeMismatch { .. } => TdsError::ShapeMismatch(e.to_string()),
            other => TdsError::Tile(other),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    tile_count: usize,
    channels: usize,
    height: usize,
    width: usize,
    split_tag: SplitTag,
    payload: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
    #[serde(default)]
    tiles: Vec<TileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileEntry {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    lat: f64,
    lon: f64,
    offset: u64,
}

/// Payload file that accompanies a manifest path (`foo.tds` -> `foo.bin`).
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TdsError + '_ {
    move |source| TdsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `ds` as a manifest at `path` plus its payload next to it.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), TdsError> {
    let (c, h, w) = ds.shape();
    let stride = tile_bytes(c, h, w);
    let payload = payload_path(path);
    let payload_name = payload
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| TdsError::Manifest {
            path: path.to_path_buf(),
            reason: "manifest path has no file name".into(),
        })?;

    let tiles = ds
        .tiles()
        .iter()
        .enumerate()
        .map(|(i, t)| TileEntry {
            id: t.id().to_string(),
            label: t.label().map(u8::from),
            lat: t.lat(),
            lon: t.lon(),
            offset: (i * stride) as u64,
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        tile_count: ds.len(),
        channels: c,
        height: h,
        width: w,
        split_tag: ds.split(),
        payload: payload_name,
        attrs: ds.attrs().clone(),
        tiles,
    };
    let text = toml::to_string(&manifest).map_err(|e| TdsError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let mut buf = Vec::with_capacity(stride * ds.len());
    for t in ds.tiles() {
        for v in t.pixels() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(t.mask().iter().map(|&m| u8::from(m)));
    }
    let mut f = fs::File::create(&payload).map_err(io_err(&payload))?;
    f.write_all(&buf).map_err(io_err(&payload))?;
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, TdsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |reason: String| TdsError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let m: Manifest = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if m.format != FORMAT {
        return Err(malformed(format!("unexpected format `{}`", m.format)));
    }
    if m.version != VERSION {
        return Err(malformed(format!("unsupported version {}", m.version)));
    }
    if m.channels == 0 || m.height == 0 || m.width == 0 {
        return Err(malformed("channels, height and width must be positive".into()));
    }
    if m.tiles.len() != m.tile_count {
        return Err(malformed(format!(
            "tile_count = {} but {} tile entries",
            m.tile_count,
            m.tiles.len()
        )));
    }

    let payload_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.payload);
    let payload = fs::read(&payload_file).map_err(io_err(&payload_file))?;
    let stride = tile_bytes(m.channels, m.height, m.width);
    let expected = stride * m.tile_count;
    if payload.len() != expected {
        return Err(TdsError::ShapeMismatch(format!(
            "manifest declares {} tiles of {}x{}x{} ({} bytes), payload has {} bytes",
            m.tile_count,
            m.channels,
            m.height,
            m.width,
            expected,
            payload.len()
        )));
    }

    let plane = m.height * m.width;
    let value_bytes = 4 * m.channels * plane;
    let mut tiles = Vec::with_capacity(m.tile_count);
    for (i, entry) in m.tiles.into_iter().enumerate() {
        if entry.offset != (i * stride) as u64 {
            return Err(TdsError::ShapeMismatch(format!(
                "tile `{}` at offset {}, expected {}",
                entry.id,
                entry.offset,
                i * stride
            )));
        }
        let label = match entry.label {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(other) => {
                return Err(malformed(format!(
                    "tile `{}` has label {other}, expected 0 or 1",
                    entry.id
                )))
            }
        };
        let raw = &payload[i * stride..(i + 1) * stride];
        let pixels = raw[..value_bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut mask = Vec::with_capacity(plane);
        for &b in &raw[value_bytes..] {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                value => {
                    return Err(TdsError::MaskByte {
                        id: entry.id,
                        value,
                    })
                }
            }
        }
        tiles.push(Tile::from_parts(TileParts {
            id: entry.id,
            channels: m.channels,
            height: m.height,
            width: m.width,
            pixels,
            mask,
            label,
            lat: entry.lat,
            lon: entry.lon,
        })?);
    }
    Ok(Dataset::new(m.split_tag, (m.channels, m.height, m.width), tiles)?.with_attrs(m.attrs))
}

fn tile_bytes(c: usize, h: usize, w: usize) -> usize {
    4 * c * h * w + h * w
}
