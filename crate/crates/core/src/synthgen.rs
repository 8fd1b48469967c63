//! Synthetic tiles with missing pixels that are not missing at random.
//!
//! Each tile is per-channel Gaussian background noise. Channel 0 is the
//! target channel and may carry an additive 2-D Gaussian plume; the other
//! channels carry label-free textures. A cloud field built from random
//! ellipses removes pixels until a drawn target coverage is met. With
//! `bias > 0` the plume probability grows linearly with that coverage:
//!
//! `p(plume | cov) = plume_rate · (1 − bias + 2·bias·cov)`, clamped to `[0, 1]`.
//!
//! [`generate_scene`] builds a large deployment raster in which plume
//! locations are independent of the cloud field.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::sweep::{GeoExtent, PlumeTruth, Scene};
use crate::tiles::{Dataset, SplitTag, Tile, TileParts, MISSING_PLACEHOLDER, TILE_SIZE};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
}

/// Appearance of tiles and scenes: background, plumes, textures and clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub channels: usize,
    /// Background level of channel 0.
    pub target_level: f64,
    /// Background level of auxiliary channels.
    pub aux_level: f64,
    /// Amplitude of the auxiliary sinusoidal texture.
    pub aux_texture: f64,
    /// Standard deviation of per-pixel background noise.
    pub noise_sigma: f64,
    /// Peak plume enhancement, drawn uniformly from `[min, max]`.
    pub plume_amplitude: (f64, f64),
    /// Plume Gaussian width (standard deviation, pixels), drawn uniformly.
    pub plume_width: (f64, f64),
    /// Cloud ellipse semi-axes in pixels, drawn uniformly.
    pub cloud_radius: (f64, f64),
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            channels: 3,
            target_level: 0.3,
            aux_level: 0.3,
            aux_texture: 0.2,
            noise_sigma: 0.5,
            plume_amplitude: (0.5, 2.0),
            plume_width: (3.0, 6.0),
            cloud_radius: (3.0, 12.0),
        }
    }
}

impl Appearance {
    fn validate(&self, min_dim: usize) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if !range_ok(self.plume_amplitude) {
            return bad("plume_amplitude must be an ordered finite range");
        }
        if !range_ok(self.plume_width) || self.plume_width.0 <= 0.0 {
            return bad("plume_width must be a positive ordered range");
        }
        if self.plume_width.1 > min_dim as f64 {
            return Err(GenError::Config(format!(
                "plume width {} exceeds the {min_dim}-pixel raster",
                self.plume_width.1
            )));
        }
        if !range_ok(self.cloud_radius) || self.cloud_radius.0 <= 0.0 {
            return bad("cloud_radius must be a positive ordered range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_tiles: usize,
    /// Tile edge length in pixels.
    pub size: usize,
    pub plume_rate: f64,
    /// 0 makes label and coverage independent; 1 couples them maximally.
    pub bias: f64,
    /// Probability that a tile is cloud free.
    pub clear_fraction: f64,
    /// Lower end of the uniform coverage component.
    pub coverage_min: f64,
    /// Number of cloud ellipses per cloudy tile, drawn uniformly.
    pub cloud_blobs: (usize, usize),
    pub appearance: Appearance,
    pub split: SplitTag,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_tiles: 1000,
            size: TILE_SIZE,
            plume_rate: 0.5,
            bias: 0.0,
            clear_fraction: 0.15,
            coverage_min: 0.05,
            cloud_blobs: (2, 6),
            appearance: Appearance::default(),
            split: SplitTag::Train,
            id_prefix: "tile".into(),
            seed: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.size < 3 {
            return bad("size must be at least 3");
        }
        if !(0.0..=1.0).contains(&self.plume_rate) {
            return bad("plume_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return bad("bias must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.clear_fraction) {
            return bad("clear_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.coverage_min) {
            return bad("coverage_min must lie in [0, 1]");
        }
        if self.cloud_blobs.0 == 0 || self.cloud_blobs.0 > self.cloud_blobs.1 {
            return bad("cloud_blobs must be a positive ordered range");
        }
        self.appearance.validate(self.size)
    }
}

/// `plume_rate · (1 − bias + 2·bias·cov)`, clamped to `[0, 1]`.
pub fn plume_probability(plume_rate: f64, bias: f64, coverage: f64) -> f64 {
    (plume_rate * (1.0 - bias + 2.0 * bias * coverage)).clamp(0.0, 1.0)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: (f64, f64)) -> Self {
        let theta = rng.gen_range(0.0..PI);
        Self {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            ry: uniform(rng, radius),
            rx: uniform(rng, radius),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Squared normalized elliptical distance from the centre.
    fn distance2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v
    }
}

/// Validity mask with exactly `valid` true entries.
///
/// All ellipses are inflated by a common factor until the union covers
/// `h·w − valid` pixels; those pixels are missing.
fn cloud_mask(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    valid: usize,
    blobs: usize,
    radius: (f64, f64),
) -> Vec<bool> {
    let n = h * w;
    if valid >= n {
        return vec![true; n];
    }
    let ellipses: Vec<Ellipse> = (0..blobs.max(1)).map(|_| Ellipse::random(rng, h, w, radius)).collect();
    let field: Vec<f64> = (0..n)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let nearest = ellipses
                .iter()
                .map(|e| e.distance2(y, x))
                .fold(f64::INFINITY, f64::min);
            // tie-break for equidistant pixels
            -nearest + 1e-9 * rng.gen::<f64>()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![true; n];
    for &i in &order[..n - valid] {
        mask[i] = false;
    }
    mask
}

/// Background, auxiliary textures and noise for an `h×w` raster.
fn background(rng: &mut ChaCha8Rng, app: &Appearance, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let noise = Normal::new(0.0, app.noise_sigma).expect("validated sigma");
    let mut px = vec![0.0; app.channels * plane];
    for c in 0..app.channels {
        let (level, ky, kx, phase) = if c == 0 {
            (app.target_level, 0.0, 0.0, 0.0)
        } else {
            (
                app.aux_level,
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.0..2.0 * PI),
            )
        };
        for i in 0..plane {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let texture = if c == 0 {
                0.0
            } else {
                app.aux_texture * (ky * y + kx * x + phase).sin()
            };
            px[c * plane + i] = level + texture + noise.sample(rng);
        }
    }
    px
}

/// Add a plume centred at `(cy, cx)` to channel 0.
fn add_plume(px: &mut [f64], w: usize, (cy, cx): (f64, f64), amplitude: f64, width: f64) {
    let h = px.len() / w;
    let reach = (4.0 * width).ceil() as isize;
    let (y0, x0) = (cy.round() as isize, cx.round() as isize);
    for y in (y0 - reach).max(0)..(y0 + reach + 1).min(h as isize) {
        for x in (x0 - reach).max(0)..(x0 + reach + 1).min(w as isize) {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            px[y as usize * w + x as usize] += amplitude * (-r2 / (2.0 * width * width)).exp();
        }
    }
}

fn finish_pixels(px: Vec<f64>, mask: &[bool]) -> Vec<f32> {
    let plane = mask.len();
    px.into_iter()
        .enumerate()
        .map(|(i, v)| if mask[i % plane] { v as f32 } else { MISSING_PLACEHOLDER })
        .collect()
}

fn generate_tile(cfg: &GenConfig, index: usize) -> Tile {
    let mut rng = rng::stream(cfg.seed, "tile", &index.to_string());
    let size = cfg.size;
    let plane = size * size;
    let target = if rng.gen::<f64>() < cfg.clear_fraction {
        1.0
    } else {
        uniform(&mut rng, (cfg.coverage_min, 1.0))
    };
    let label = rng.gen::<f64>() < plume_probability(cfg.plume_rate, cfg.bias, target);
    let lat = rng.gen_range(-60.0..70.0);
    let lon = rng.gen_range(-180.0..180.0);

    let app = &cfg.appearance;
    let mut px = background(&mut rng, app, size, size);
    let valid = (target * plane as f64).round() as usize;
    let blobs = rng.gen_range(cfg.cloud_blobs.0..=cfg.cloud_blobs.1);
    let mask = cloud_mask(&mut rng, size, size, valid, blobs, app.cloud_radius);
    if label {
        let width = uniform(&mut rng, app.plume_width);
        let amplitude = uniform(&mut rng, app.plume_amplitude);
        // a labeled plume is centred on an observed pixel, away from the edge if possible
        let margin = width.min(size as f64 / 2.0 - 1.0).ceil() as usize;
        let inner = |i: usize| {
            let (y, x) = (i / size, i % size);
            y >= margin && x >= margin && y + margin < size && x + margin < size
        };
        let mut centres: Vec<usize> = (0..plane).filter(|&i| mask[i] && inner(i)).collect();
        if centres.is_empty() {
            centres = (0..plane).filter(|&i| mask[i]).collect();
        }
        if centres.is_empty() {
            centres = (0..plane).collect();
        }
        let c = centres[rng.gen_range(0..centres.len())];
        let cy = (c / size) as f64 + rng.gen_range(-0.5..0.5);
        let cx = (c % size) as f64 + rng.gen_range(-0.5..0.5);
        add_plume(&mut px, size, (cy, cx), amplitude, width);
    }

    Tile::from_parts(TileParts {
        id: format!("{}_{index:06}", cfg.id_prefix),
        channels: app.channels,
        height: size,
        width: size,
        pixels: finish_pixels(px, &mask),
        mask,
        label: Some(label),
        lat,
        lon,
    })
    .expect("generated tiles are well formed")
}

/// Generate `cfg.n_tiles` labeled tiles. The config is stored in the
/// dataset attrs under `gen_config` (JSON).
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset, GenError> {
    cfg.validate()?;
    let tiles: Vec<Tile> = (0..cfg.n_tiles)
        .into_par_iter()
        .map(|i| generate_tile(cfg, i))
        .collect();
    let mut attrs = BTreeMap::new();
    attrs.insert(
        "gen_config".to_string(),
        serde_json::to_string(cfg).expect("config serializes"),
    );
    Ok(Dataset::new(cfg.split, (cfg.appearance.channels, cfg.size, cfg.size), tiles)
        .expect("generated ids are unique")
        .with_attrs(attrs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub id: String,
    pub width_px: usize,
    pub height_px: usize,
    pub extent: GeoExtent,
    pub plume_count: usize,
    /// Fraction of scene pixels removed by clouds.
    pub cloud_fraction: f64,
    /// Cloud ellipses per 32×32 pixels of scene area.
    pub cloud_density: f64,
    pub appearance: Appearance,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            id: "scene".into(),
            width_px: 512,
            height_px: 512,
            extent: GeoExtent {
                lon_min: -30.0,
                lat_max: 30.0,
                deg_per_px: 60.0 / 512.0,
            },
            plume_count: 60,
            cloud_fraction: 0.45,
            cloud_density: 1.0,
            appearance: Appearance {
                cloud_radius: (4.0, 24.0),
                ..Appearance::default()
            },
            seed: 0,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Config(m));
        if self.width_px == 0 || self.height_px == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return bad("cloud_fraction must lie in [0, 1]".into());
        }
        if !(self.cloud_density >= 0.0 && self.cloud_density.is_finite()) {
            return bad("cloud_density must be non-negative".into());
        }
        let e = &self.extent;
        if !(e.deg_per_px > 0.0 && e.deg_per_px.is_finite()) {
            return bad("deg_per_px must be positive".into());
        }
        let lat_min = e.lat_max - self.height_px as f64 * e.deg_per_px;
        let lon_max = e.lon_min + self.width_px as f64 * e.deg_per_px;
        if e.lat_max > 90.0 || lat_min < -90.0 || e.lon_min < -180.0 || lon_max > 180.0 {
            return bad(format!(
                "scene extent lat [{lat_min}, {}] lon [{}, {lon_max}] leaves the globe",
                e.lat_max, e.lon_min
            ));
        }
        self.appearance
            .validate(self.width_px.min(self.height_px))
    }
}

/// A large deployment raster plus the ground-truth plume list.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene, GenError> {
    cfg.validate()?;
    let (h, w) = (cfg.height_px, cfg.width_px);
    let app = &cfg.appearance;
    let mut rng = rng::stream(cfg.seed, "scene", &cfg.id);
    let mut px = background(&mut rng, app, h, w);

    let mut plume_rng = rng::stream(cfg.seed, "scene-plumes", &cfg.id);
    let mut plumes = Vec::with_capacity(cfg.plume_count);
    for k in 0..cfg.plume_count {
        let width = uniform(&mut plume_rng, app.plume_width);
        let amplitude = uniform(&mut plume_rng, app.plume_amplitude);
        let cy = plume_rng.gen_range(0.0..h as f64 - 1.0);
        let cx = plume_rng.gen_range(0.0..w as f64 - 1.0);
        add_plume(&mut px, w, (cy, cx), amplitude, width);
        let (lat, lon) = cfg.extent.at(cy + 0.5, cx + 0.5);
        plumes.push(PlumeTruth {
            id: format!("{}_plume_{k:04}", cfg.id),
            lat,
            lon,
        });
    }

    let mut cloud_rng = rng::stream(cfg.seed, "scene-clouds", &cfg.id);
    let blobs = (cfg.cloud_density * (h * w) as f64 / 1024.0).round() as usize;
    let valid = ((1.0 - cfg.cloud_fraction) * (h * w) as f64).round() as usize;
    let mask = if blobs == 0 {
        vec![true; h * w]
    } else {
        cloud_mask(&mut cloud_rng, h, w, valid, blobs, app.cloud_radius)
    };

    let (lat, lon) = cfg.extent.at(h as f64 / 2.0, w as f64 / 2.0);
    let tile = Tile::from_parts(TileParts {
        id: cfg.id.clone(),
        channels: app.channels,
        height: h,
        width: w,
        pixels: finish_pixels(px, &mask),
        mask,
        label: None,
        lat,
        lon: lon.min(180.0 - 1e-9),
    })
    .expect("generated scene is well formed");
    Ok(Scene {
        raster: tile,
        extent: cfg.extent,
        plumes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    fn label_coverage_corr(ds: &Dataset) -> f64 {
        let labels: Vec<f64> = ds
            .tiles()
            .iter()
            .map(|t| if t.label().unwrap() { 1.0 } else { 0.0 })
            .collect();
        pearson(&labels, &ds.coverages())
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = GenConfig {
            n_tiles: 20,
            seed: 4,
            ..GenConfig::default()
        };
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = GenConfig { seed: 5, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn zero_plume_rate_means_no_positives() {
        let cfg = GenConfig {
            n_tiles: 200,
            plume_rate: 0.0,
            bias: 1.0,
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.tiles().iter().all(|t| t.label() == Some(false)));
    }

    #[test]
    fn missing_pixels_carry_the_placeholder() {
        let ds = generate_dataset(&GenConfig {
            n_tiles: 30,
            ..GenConfig::default()
        })
        .unwrap();
        for t in ds.tiles() {
            for c in 0..t.channels() {
                for (v, m) in t.channel(c).iter().zip(t.mask()) {
                    assert_eq!(*m, *v != MISSING_PLACEHOLDER);
                }
            }
        }
    }

    #[test]
    fn coverage_hits_the_drawn_target() {
        let cfg = GenConfig {
            n_tiles: 300,
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let cov = ds.coverages();
        assert!(cov.iter().all(|&c| (0.04..=1.0).contains(&c)));
        // every decile of [0.1, 1.0] is populated
        for d in 1..10 {
            let lo = d as f64 / 10.0;
            assert!(cov.iter().any(|&c| c >= lo && c < lo + 0.1), "decile {lo}");
        }
        assert!(cov.contains(&1.0));
    }

    #[test]
    fn correlation_rises_with_bias() {
        let corr: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&bias| {
                label_coverage_corr(
                    &generate_dataset(&GenConfig {
                        n_tiles: 3000,
                        bias,
                        seed: 1,
                        ..GenConfig::default()
                    })
                    .unwrap(),
                )
            })
            .collect();
        assert!(corr[0].abs() < 0.05, "{corr:?}");
        assert!(corr[0] < corr[1] && corr[1] < corr[2], "{corr:?}");
        assert!(corr[2] > 0.3, "{corr:?}");
    }

    #[test]
    fn probability_law() {
        assert_eq!(plume_probability(0.5, 0.0, 0.1), 0.5);
        assert_eq!(plume_probability(0.5, 1.0, 0.25), 0.25);
        assert_eq!(plume_probability(0.9, 1.0, 1.0), 1.0);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut cfg = GenConfig::default();
        cfg.appearance.plume_width = (1.0, 40.0);
        assert!(generate_dataset(&cfg).is_err());
        let cfg = GenConfig {
            bias: 1.5,
            ..GenConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
        let cfg = SceneConfig {
            width_px: 0,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg).is_err());
        let mut cfg = SceneConfig::default();
        cfg.extent.lon_min = 170.0;
        assert!(generate_scene(&cfg).is_err());
    }

    #[test]
    fn scene_basics() {
        let cfg = SceneConfig {
            width_px: 96,
            height_px: 96,
            plume_count: 0,
            seed: 3,
            ..SceneConfig::default()
        };
        let a = generate_scene(&cfg).unwrap();
        assert!(a.plumes.is_empty());
        assert_eq!(a.raster.shape(), (3, 96, 96));
        assert_eq!(a, generate_scene(&cfg).unwrap());
        let with = generate_scene(&SceneConfig {
            plume_count: 5,
            ..cfg
        })
        .unwrap();
        assert_eq!(with.plumes.len(), 5);
        // plumes do not move the cloud field
        assert_eq!(with.raster.mask(), a.raster.mask());
    }
}
