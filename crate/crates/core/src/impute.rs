//! Filling missing pixels before a tile is scored.
//!
//! All statistics are per tile and per channel, computed from that
//! channel's valid pixels only. Valid pixels are never modified.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tiles::Tile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputationKind {
    Zero,
    Median,
    #[serde(rename = "sample")]
    PixelSample,
    #[serde(rename = "noise")]
    NoiseAugmented,
}

impl ImputationKind {
    pub const ALL: [ImputationKind; 4] = [
        ImputationKind::Zero,
        ImputationKind::Median,
        ImputationKind::PixelSample,
        ImputationKind::NoiseAugmented,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImputationKind::Zero => "zero",
            ImputationKind::Median => "median",
            ImputationKind::PixelSample => "sample",
            ImputationKind::NoiseAugmented => "noise",
        }
    }
}

impl fmt::Display for ImputationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown imputation `{0}` (expected zero, median, sample or noise)")]
pub struct UnknownImputation(pub String);

impl FromStr for ImputationKind {
    type Err = UnknownImputation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ImputationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownImputation(s.to_string()))
    }
}

/// Imputation method plus its noise scale. `noise_scale` multiplies the
/// channel standard deviation and only matters for `NoiseAugmented`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationStrategy {
    pub kind: ImputationKind,
    pub noise_scale: f64,
}

impl ImputationStrategy {
    pub const DEFAULT_NOISE_SCALE: f64 = 1.0;

    pub fn new(kind: ImputationKind) -> Self {
        Self {
            kind,
            noise_scale: Self::DEFAULT_NOISE_SCALE,
        }
    }

    pub fn noise(noise_scale: f64) -> Self {
        Self {
            kind: ImputationKind::NoiseAugmented,
            noise_scale,
        }
    }

    /// Whether the output depends on the seed.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self.kind,
            ImputationKind::PixelSample | ImputationKind::NoiseAugmented
        )
    }
}

/// Imputed tile plus the channels that had no valid pixel to draw
/// statistics from. Those channels were zero-filled instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputed {
    pub tile: Tile,
    pub fallback_channels: Vec<usize>,
}

impl Imputed {
    pub fn has_warning(&self) -> bool {
        !self.fallback_channels.is_empty()
    }
}

/// Median of a non-empty slice; even counts average the central pair.
pub(crate) fn median(values: &mut [f32]) -> f32 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        ((f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0) as f32
    }
}

fn population_std(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Fill the missing pixels of `tile` according to `strategy`.
///
/// Random draws come from the stream keyed by the tile id under `seed`, so
/// the result does not depend on which other tiles are imputed or in what
/// order.
pub fn impute(tile: &Tile, strategy: ImputationStrategy, seed: u64) -> Imputed {
    let mask = tile.mask();
    if tile.valid_count() == mask.len() {
        return Imputed {
            tile: tile.clone(),
            fallback_channels: Vec::new(),
        };
    }

    let plane = mask.len();
    let mut pixels = tile.pixels().to_vec();
    let mut fallback_channels = Vec::new();
    let mut rng = rng::stream(seed, "impute", tile.id());

    for c in 0..tile.channels() {
        let channel = &mut pixels[c * plane..(c + 1) * plane];
        let valid: Vec<f32> = channel
            .iter()
            .zip(mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect();
        let missing = channel.iter_mut().zip(mask).filter_map(|(v, &m)| (!m).then_some(v));

        if strategy.kind == ImputationKind::Zero || valid.is_empty() {
            if strategy.kind != ImputationKind::Zero {
                fallback_channels.push(c);
            }
            missing.for_each(|v| *v = 0.0);
            continue;
        }

        match strategy.kind {
            ImputationKind::Zero => unreachable!(),
            ImputationKind::Median => {
                let med = median(&mut valid.clone());
                missing.for_each(|v| *v = med);
            }
            ImputationKind::PixelSample => {
                for v in missing {
                    *v = valid[rng.gen_range(0..valid.len())];
                }
            }
            ImputationKind::NoiseAugmented => {
                let med = median(&mut valid.clone());
                let sd = strategy.noise_scale * population_std(&valid);
                if sd > 0.0 {
                    let noise = Normal::new(0.0, sd).expect("finite positive std");
                    for v in missing {
                        *v = (f64::from(med) + noise.sample(&mut rng)) as f32;
                    }
                } else {
                    missing.for_each(|v| *v = med);
                }
            }
        }
    }

    let tile = tile
        .with_pixels(pixels)
        .expect("imputed values are finite and shape is unchanged");
    Imputed {
        tile,
        fallback_channels,
    }
}
