//! Deployment sweep: sliding-window tiling of a scene, scoring and
//! flagging, and aggregation of flags onto a regular lat/lon grid.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impute::{impute, ImputationStrategy};
use crate::model::{forward, ModelError, ModelInput, ModelParams};
use crate::tds::{self, TdsError};
use crate::tiles::{Dataset, SplitTag, Tile, TileError, TileParts, TILE_SIZE};

pub const DEFAULT_STRIDE: usize = 16;
pub const DEFAULT_CELL_DEG: f64 = 3.0;
const EMPTY_CELL_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("scene {height}x{width} is smaller than the {size}-pixel window")]
    SceneTooSmall {
        height: usize,
        width: usize,
        size: usize,
    },
    #[error("window size and stride must be positive")]
    Window,
    #[error("coordinates ({lat}, {lon}) of `{id}` are off the globe")]
    Coordinates { id: String, lat: f64, lon: f64 },
    #[error("grid cell sizes differ ({0} vs {1} degrees)")]
    GridMismatch(f64, f64),
    #[error("cell size must be a positive divisor-friendly number of degrees, got {0}")]
    CellSize(f64),
    #[error("scene file {path}: {reason}")]
    Scene { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tds(#[from] TdsError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Geographic placement of a scene: north-west corner and square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoExtent {
    pub lon_min: f64,
    pub lat_max: f64,
    pub deg_per_px: f64,
}

impl GeoExtent {
    /// Coordinates of a point given in fractional pixel units from the
    /// north-west corner (row down, column right).
    pub fn at(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.lat_max - row * self.deg_per_px,
            self.lon_min + col * self.deg_per_px,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlumeTruth {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// A deployment raster with its extent and ground-truth plume locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub raster: Tile,
    pub extent: GeoExtent,
    pub plumes: Vec<PlumeTruth>,
}

/// Ground-truth file written next to a scene manifest.
pub fn truth_path(scene: &Path) -> PathBuf {
    scene.with_extension("truth.csv")
}

/// Store the raster as a one-tile `.tds` dataset (extent in its attrs) and
/// the plume list as `id,lat,lon` CSV.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SweepError> {
    let r = &scene.raster;
    let mut attrs = BTreeMap::new();
    attrs.insert("lon_min".into(), scene.extent.lon_min.to_string());
    attrs.insert("lat_max".into(), scene.extent.lat_max.to_string());
    attrs.insert("deg_per_px".into(), scene.extent.deg_per_px.to_string());
    let ds = Dataset::new(SplitTag::Deploy, r.shape(), vec![r.clone()])?.with_attrs(attrs);
    tds::save_dataset(&ds, path)?;

    let mut w = csv::Writer::from_path(truth_path(path))?;
    w.write_record(["id", "lat", "lon"])?;
    for p in &scene.plumes {
        w.write_record([p.id.clone(), p.lat.to_string(), p.lon.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, SweepError> {
    let err = |reason: String| SweepError::Scene {
        path: path.to_path_buf(),
        reason,
    };
    let ds = tds::load_dataset(path)?;
    let attr = |key: &str| -> Result<f64, SweepError> {
        ds.attrs()
            .get(key)
            .ok_or_else(|| err(format!("missing attr `{key}`")))?
            .parse()
            .map_err(|e| err(format!("attr `{key}`: {e}")))
    };
    let extent = GeoExtent {
        lon_min: attr("lon_min")?,
        lat_max: attr("lat_max")?,
        deg_per_px: attr("deg_per_px")?,
    };
    if ds.len() != 1 {
        return Err(err(format!("expected one raster, found {}", ds.len())));
    }
    let raster = ds.into_tiles().pop().expect("one tile");

    let mut plumes = Vec::new();
    let truth = truth_path(path);
    if truth.exists() {
        let mut rdr = csv::Reader::from_path(&truth)?;
        for row in rdr.deserialize() {
            plumes.push(row?);
        }
    }
    Ok(Scene {
        raster,
        extent,
        plumes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            size: TILE_SIZE,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl WindowSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self, SweepError> {
        if size == 0 || stride == 0 {
            return Err(SweepError::Window);
        }
        Ok(Self { size, stride })
    }

    /// `floor((dim − size) / stride) + 1`, or 0 when the window does not fit.
    pub fn count(&self, dim: usize) -> usize {
        if dim < self.size {
            0
        } else {
            (dim - self.size) / self.stride + 1
        }
    }
}

/// Cut the scene into `size × size` windows at multiples of `stride`.
///
/// Windows are emitted row-major. Each inherits the geolocation of its
/// centre and the scene's validity mask over its footprint.
pub fn tile_scene(scene: &Scene, spec: WindowSpec) -> Result<Vec<Tile>, SweepError> {
    if spec.size == 0 || spec.stride == 0 {
        return Err(SweepError::Window);
    }
    let r = &scene.raster;
    let (c, h, w) = r.shape();
    if h < spec.size || w < spec.size {
        return Err(SweepError::SceneTooSmall {
            height: h,
            width: w,
            size: spec.size,
        });
    }
    let s = spec.size;
    let mut tiles = Vec::with_capacity(spec.count(h) * spec.count(w));
    for row in (0..=h - s).step_by(spec.stride) {
        for col in (0..=w - s).step_by(spec.stride) {
            let mut pixels = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                let plane = r.channel(ch);
                for y in row..row + s {
                    pixels.extend_from_slice(&plane[y * w + col..y * w + col + s]);
                }
            }
            let mut mask = Vec::with_capacity(s * s);
            for y in row..row + s {
                mask.extend_from_slice(&r.mask()[y * w + col..y * w + col + s]);
            }
            let half = s as f64 / 2.0;
            let (lat, lon) = scene.extent.at(row as f64 + half, col as f64 + half);
            tiles.push(Tile::from_parts(TileParts {
                id: format!("{}_r{row:05}_c{col:05}", r.id()),
                channels: c,
                height: s,
                width: s,
                pixels,
                mask,
                label: None,
                lat: lat.clamp(-90.0, 90.0),
                lon,
            })?);
        }
    }
    Ok(tiles)
}

/// One scored deployment tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub score: f64,
    pub flagged: bool,
    pub coverage: f64,
}

/// Impute, score and threshold every tile (flagged iff score ≥ threshold).
///
/// Tiles are scored in parallel; the output order follows the input and
/// does not depend on the number of worker threads.
pub fn score_and_flag(
    tiles: &[Tile],
    params: &ModelParams,
    strategy: ImputationStrategy,
    threshold: f64,
    seed: u64,
) -> Result<Vec<FlagRecord>, SweepError> {
    tiles
        .par_iter()
        .map(|t| {
            let filled = impute(t, strategy, seed).tile;
            let score = forward(params, &ModelInput::from_tile(&filled))?;
            Ok(FlagRecord {
                id: t.id().to_string(),
                lat: t.lat(),
                lon: t.lon(),
                score,
                flagged: score >= threshold,
                coverage: t.coverage().value(),
            })
        })
        .collect()
}

/// `(lat_index, lon_index)` of the cell holding a point. Cells are
/// lower-inclusive and anchored at (−90°, −180°); latitude 90° falls in
/// the northernmost row.
pub fn cell_index(lat: f64, lon: f64, cell_deg: f64) -> Option<(i64, i64)> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
        return None;
    }
    let rows = (180.0 / cell_deg).ceil() as i64;
    let i = (((lat + 90.0) / cell_deg).floor() as i64).min(rows - 1);
    let j = ((lon + 180.0) / cell_deg).floor() as i64;
    Some((i, j))
}

/// Mean flag count per grid cell over one or more runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCounts {
    pub cell_deg: f64,
    pub cells: BTreeMap<(i64, i64), f64>,
}

impl GridCounts {
    pub fn total(&self) -> f64 {
        self.cells.values().sum()
    }
}

/// Count flagged records per cell in each run and average over runs.
/// Cells without any flag are omitted.
pub fn aggregate_grid(runs: &[&[FlagRecord]], cell_deg: f64) -> Result<GridCounts, SweepError> {
    if !(cell_deg > 0.0 && cell_deg <= 180.0) {
        return Err(SweepError::CellSize(cell_deg));
    }
    let mut sums: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for run in runs {
        for r in run.iter() {
            let idx = cell_index(r.lat, r.lon, cell_deg).ok_or_else(|| SweepError::Coordinates {
                id: r.id.clone(),
                lat: r.lat,
                lon: r.lon,
            })?;
            if r.flagged {
                *sums.entry(idx).or_default() += 1;
            }
        }
    }
    let n = runs.len().max(1) as f64;
    Ok(GridCounts {
        cell_deg,
        cells: sums.into_iter().map(|(k, v)| (k, v as f64 / n)).collect(),
    })
}

/// One row of the disagreement map between configurations `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCellStats {
    pub lat_index: i64,
    pub lon_index: i64,
    /// South-west corner of the cell.
    pub cell_lat: f64,
    pub cell_lon: f64,
    pub count_a: f64,
    pub count_b: f64,
    pub mean_count: f64,
    pub abs_pct_diff: f64,
}

/// `|a − b| / max(mean(a, b), ε) · 100` per cell; 0 where both are 0.
pub fn abs_pct_diff(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    (a - b).abs() / ((a + b) / 2.0).max(EMPTY_CELL_GUARD) * 100.0
}

/// Per-cell comparison over the union of cells present in either map,
/// ordered by cell index.
pub fn disagreement_map(a: &GridCounts, b: &GridCounts) -> Result<Vec<GridCellStats>, SweepError> {
    if a.cell_deg != b.cell_deg {
        return Err(SweepError::GridMismatch(a.cell_deg, b.cell_deg));
    }
    let mut keys: Vec<(i64, i64)> = a.cells.keys().chain(b.cells.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|(i, j)| {
            let ca = a.cells.get(&(i, j)).copied().unwrap_or(0.0);
            let cb = b.cells.get(&(i, j)).copied().unwrap_or(0.0);
            GridCellStats {
                lat_index: i,
                lon_index: j,
                cell_lat: -90.0 + i as f64 * a.cell_deg,
                cell_lon: -180.0 + j as f64 * a.cell_deg,
                count_a: ca,
                count_b: cb,
                mean_count: (ca + cb) / 2.0,
                abs_pct_diff: abs_pct_diff(ca, cb),
            }
        })
        .collect())
}

/// Flags CSV: `id,lat,lon,score,flagged,coverage,config`.
pub fn write_flags_csv(
    records: &[FlagRecord],
    config: &str,
    out: impl io::Write,
) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "lat", "lon", "score", "flagged", "coverage", "config"])?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            r.score.to_string(),
            u8::from(r.flagged).to_string(),
            r.coverage.to_string(),
            config.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid CSV: `cell_lat,cell_lon,count_a,count_b,abs_pct_diff`.
pub fn write_grid_csv(stats: &[GridCellStats], out: impl io::Write) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell_lat", "cell_lon", "count_a", "count_b", "abs_pct_diff"])?;
    for s in stats {
        w.write_record([
            s.cell_lat.to_string(),
            s.cell_lon.to_string(),
            s.count_a.to_string(),
            s.count_b.to_string(),
            s.abs_pct_diff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), SweepError>) -> Result<(), SweepError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impute::ImputationKind;
    use crate::model::{init_params, ModelKind};
    use crate::synthgen::{generate_scene, SceneConfig};

    fn flag(id: &str, lat: f64, lon: f64, flagged: bool) -> FlagRecord {
        FlagRecord {
            id: id.into(),
            lat,
            lon,
            score: if flagged { 0.9 } else { 0.1 },
            flagged,
            coverage: 1.0,
        }
    }

    fn scene(h: usize, w: usize) -> Scene {
        generate_scene(&SceneConfig {
            width_px: w,
            height_px: h,
            plume_count: 3,
            seed: 1,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::default();
        assert_eq!(tile_scene(&scene(32, 32), spec).unwrap().len(), 1);
        assert_eq!(tile_scene(&scene(96, 96), spec).unwrap().len(), 25);
        // offsets 0,16 down and 0,16,32 across
        let tiles = tile_scene(&scene(48, 64), spec).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles.len(), spec.count(48) * spec.count(64));
        assert!(matches!(
            tile_scene(&scene(31, 64), spec),
            Err(SweepError::SceneTooSmall { .. })
        ));
    }

    #[test]
    fn windows_copy_pixels_and_mask() {
        let sc = scene(64, 64);
        let tiles = tile_scene(&sc, WindowSpec::default()).unwrap();
        let t = &tiles[4]; // row 16, col 16
        assert!(t.id().ends_with("_r00016_c00016"));
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(
                        t.channel(ch)[y * 32 + x],
                        sc.raster.channel(ch)[(y + 16) * 64 + x + 16]
                    );
                }
            }
        }
        assert_eq!(t.mask()[0], sc.raster.mask()[16 * 64 + 16]);
        let (lat, lon) = sc.extent.at(32.0, 32.0);
        assert_eq!((t.lat(), t.lon()), (lat, lon));
    }

    #[test]
    fn zero_model_flags_everything() {
        let tiles = tile_scene(&scene(64, 64), WindowSpec::default()).unwrap();
        let p = crate::model::ModelParams::zeros(ModelKind::Vanilla, 3);
        let recs = score_and_flag(
            &tiles,
            &p,
            ImputationStrategy::new(ImputationKind::Zero),
            0.5,
            0,
        )
        .unwrap();
        assert!(recs.iter().all(|r| r.score == 0.5 && r.flagged));
        let none = score_and_flag(&[], &p, ImputationStrategy::new(ImputationKind::Zero), 0.5, 0)
            .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn batch_scoring_matches_single_tile_calls() {
        let tiles = tile_scene(&scene(96, 96), WindowSpec::default()).unwrap();
        let p = init_params(ModelKind::MultiBranch, 3, 5);
        let strategy = ImputationStrategy::new(ImputationKind::PixelSample);
        let all = score_and_flag(&tiles, &p, strategy, 0.5, 8).unwrap();
        for (t, r) in tiles.iter().zip(&all) {
            let one = score_and_flag(std::slice::from_ref(t), &p, strategy, 0.5, 8).unwrap();
            assert_eq!(&one[0], r);
        }
    }

    #[test]
    fn grid_cells() {
        assert_eq!(cell_index(1.5, 1.5, 3.0), Some((30, 60)));
        assert_eq!(cell_index(3.0, 1.5, 3.0), Some((31, 60)));
        assert_eq!(cell_index(90.0, 0.0, 3.0), Some((59, 60)));
        assert_eq!(cell_index(-90.0, -180.0, 3.0), Some((0, 0)));
        assert_eq!(cell_index(0.0, 180.0, 3.0), None);

        let recs = [flag("a", 1.5, 1.5, true)];
        let g = aggregate_grid(&[&recs], 3.0).unwrap();
        let cell = disagreement_map(&g, &g).unwrap();
        assert_eq!(cell.len(), 1);
        assert_eq!((cell[0].cell_lat, cell[0].cell_lon, cell[0].count_a), (0.0, 0.0, 1.0));

        let recs = [flag("b", 3.0, 1.5, true)];
        let g = aggregate_grid(&[&recs], 3.0).unwrap();
        assert_eq!(g.cells.keys().next(), Some(&(31, 60)));

        let bad = [flag("c", 95.0, 0.0, true)];
        assert!(matches!(
            aggregate_grid(&[&bad], 3.0),
            Err(SweepError::Coordinates { .. })
        ));
    }

    #[test]
    fn grid_averages_over_runs() {
        let a = [flag("a", 10.0, 10.0, true), flag("b", 10.5, 10.5, true)];
        let b = [flag("a", 10.0, 10.0, true), flag("b", 10.5, 10.5, false)];
        let g = aggregate_grid(&[&a, &b], 3.0).unwrap();
        assert_eq!(g.cells.values().copied().collect::<Vec<_>>(), [1.5]);
    }

    #[test]
    fn disagreement_values() {
        let g = |cells: &[((i64, i64), f64)]| GridCounts {
            cell_deg: 3.0,
            cells: cells.iter().copied().collect(),
        };
        let a = g(&[((1, 1), 2.0), ((2, 2), 4.0)]);
        let same = disagreement_map(&a, &a).unwrap();
        assert!(same.iter().all(|s| s.abs_pct_diff == 0.0));
        let b = g(&[((2, 2), 4.0)]);
        let d = disagreement_map(&a, &b).unwrap();
        assert_eq!(d[0].abs_pct_diff, 200.0);
        assert_eq!(abs_pct_diff(0.0, 0.0), 0.0);
        assert!(disagreement_map(&g(&[]), &g(&[])).unwrap().is_empty());
        let coarse = GridCounts {
            cell_deg: 5.0,
            ..g(&[])
        };
        assert!(matches!(
            disagreement_map(&a, &coarse),
            Err(SweepError::GridMismatch(..))
        ));
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.tds");
        let sc = scene(48, 64);
        save_scene(&sc, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_flags_csv(&[flag("a", 1.0, 2.0, true)], "cfg", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,lat,lon,score,flagged,coverage,config\n"));
        let mut buf = Vec::new();
        write_grid_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "cell_lat,cell_lon,count_a,count_b,abs_pct_diff\n");
    }
}
