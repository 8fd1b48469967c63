//! Coverage-binned, class-balanced resampling.
//!
//! Coverage is cut into equal-width bins. Inside every bin that holds both
//! classes, the two classes get equal sampling mass; across bins the mass
//! stays proportional to the bin's tile count. A bin holding a single class
//! keeps its mass and spreads it uniformly over its tiles.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tiles::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("bin count must be positive")]
    NoBins,
    #[error("cannot build a sampling plan for an empty dataset")]
    Empty,
    #[error("tile `{0}` has no label; resampling needs labeled tiles")]
    Unlabeled(String),
    #[error("coverage {0} outside [0, 1]")]
    Coverage(f64),
    #[error("{coverages} coverages but {labels} labels")]
    LengthMismatch { coverages: usize, labels: usize },
}

/// Equal-width partition of `[0, 1]` into `bin_count` bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    bin_count: usize,
}

impl BinSpec {
    pub const DEFAULT_BINS: usize = 10;

    pub fn new(bin_count: usize) -> Result<Self, ResampleError> {
        if bin_count == 0 {
            return Err(ResampleError::NoBins);
        }
        Ok(Self { bin_count })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            bin_count: Self::DEFAULT_BINS,
        }
    }
}

/// `min(floor(coverage · bins), bins − 1)`; coverage 1.0 lands in the last bin.
pub fn assign_bin(coverage: f64, spec: BinSpec) -> usize {
    let b = (coverage * spec.bin_count as f64).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(spec.bin_count - 1)
    }
}

/// Per-tile sampling weights (summing to one) and bin assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    weights: Vec<f64>,
    bin_of: Vec<usize>,
}

impl SamplerPlan {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bin_of(&self) -> &[usize] {
        &self.bin_of
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn build_plan(ds: &Dataset, spec: BinSpec) -> Result<SamplerPlan, ResampleError> {
    let labels = ds
        .tiles()
        .iter()
        .map(|t| t.label().ok_or_else(|| ResampleError::Unlabeled(t.id().to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    plan_from_parts(&ds.coverages(), &labels, spec)
}

/// Same as [`build_plan`] on bare coverage/label columns.
pub fn plan_from_parts(
    coverages: &[f64],
    labels: &[bool],
    spec: BinSpec,
) -> Result<SamplerPlan, ResampleError> {
    if coverages.len() != labels.len() {
        return Err(ResampleError::LengthMismatch {
            coverages: coverages.len(),
            labels: labels.len(),
        });
    }
    if coverages.is_empty() {
        return Err(ResampleError::Empty);
    }
    if let Some(&c) = coverages.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(ResampleError::Coverage(c));
    }

    let bin_of: Vec<usize> = coverages.iter().map(|&c| assign_bin(c, spec)).collect();
    // counts[b][y]
    let mut counts = vec![[0usize; 2]; spec.bin_count];
    for (&b, &y) in bin_of.iter().zip(labels) {
        counts[b][usize::from(y)] += 1;
    }

    let raw: Vec<f64> = bin_of
        .iter()
        .zip(labels)
        .map(|(&b, &y)| {
            let [neg, pos] = counts[b];
            let in_bin = (neg + pos) as f64;
            let same_class = counts[b][usize::from(y)] as f64;
            let classes_present = usize::from(neg > 0) + usize::from(pos > 0);
            in_bin / (classes_present as f64 * same_class)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.into_iter().map(|w| w / total).collect();
    Ok(SamplerPlan { weights, bin_of })
}

/// `n` indices drawn i.i.d. with replacement from the plan's weights.
pub fn draw_epoch(plan: &SamplerPlan, n: usize, seed: u64) -> Vec<usize> {
    if n == 0 || plan.is_empty() {
        return Vec::new();
    }
    let dist = WeightedIndex::new(&plan.weights).expect("plan weights are positive and finite");
    let mut rng = rng::stream(seed, "epoch", "");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Probability of each class under the plan, by explicit enumeration.
    fn class_mass(plan: &SamplerPlan, labels: &[bool], bin: usize) -> [f64; 2] {
        let mut m = [0.0; 2];
        for i in 0..labels.len() {
            if plan.bin_of()[i] == bin {
                m[usize::from(labels[i])] += plan.weights()[i];
            }
        }
        m
    }

    #[test]
    fn bin_assignment() {
        let spec = BinSpec::new(10).unwrap();
        assert_eq!(assign_bin(0.0, spec), 0);
        assert_eq!(assign_bin(1.0, spec), 9);
        assert_eq!(assign_bin(0.25, spec), 2);
        assert_eq!(assign_bin(0.999, spec), 9);
    }

    #[test]
    fn one_positive_three_negatives() {
        let labels = [true, false, false, false];
        let plan = plan_from_parts(&[0.5; 4], &labels, BinSpec::default()).unwrap();
        let w = plan.weights();
        assert!((w[0] / w[1] - 3.0).abs() < 1e-12);
        assert_eq!(w[1], w[2]);
        assert_eq!(w[2], w[3]);
        let [neg, pos] = class_mass(&plan, &labels, 5);
        assert!((pos - 0.5).abs() < 1e-12);
        assert!((neg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn balanced_bins_give_uniform_weights() {
        let cov = [0.05, 0.05, 0.55, 0.55, 0.95, 0.95];
        let labels = [true, false, false, true, true, false];
        let plan = plan_from_parts(&cov, &labels, BinSpec::default()).unwrap();
        for &w in plan.weights() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_bin_keeps_its_share() {
        // Bin 1: three negatives only. Bin 8: one positive, one negative.
        let cov = [0.1, 0.15, 0.12, 0.85, 0.82];
        let labels = [false, false, false, true, false];
        let plan = plan_from_parts(&cov, &labels, BinSpec::default()).unwrap();
        let only_neg = class_mass(&plan, &labels, 1);
        assert!((only_neg[0] - 3.0 / 5.0).abs() < 1e-12);
        assert_eq!(only_neg[1], 0.0);
        assert_eq!(plan.weights()[0], plan.weights()[1]);
        let mixed = class_mass(&plan, &labels, 8);
        assert!((mixed[0] - 1.0 / 5.0).abs() < 1e-12);
        assert!((mixed[1] - 1.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(BinSpec::new(0), Err(ResampleError::NoBins));
        let spec = BinSpec::default();
        assert_eq!(plan_from_parts(&[], &[], spec), Err(ResampleError::Empty));
        assert_eq!(
            plan_from_parts(&[1.5], &[true], spec),
            Err(ResampleError::Coverage(1.5))
        );
    }

    #[test]
    fn unlabeled_tile_is_rejected() {
        use crate::tiles::test_util::square;
        use crate::tiles::SplitTag;
        let ds = Dataset::new(SplitTag::Train, (1, 32, 32), vec![square("u", 3)]).unwrap();
        assert_eq!(
            build_plan(&ds, BinSpec::default()),
            Err(ResampleError::Unlabeled("u".into()))
        );
    }

    #[test]
    fn degenerate_and_empty_draws() {
        let plan = plan_from_parts(&[0.3], &[true], BinSpec::default()).unwrap();
        assert_eq!(draw_epoch(&plan, 5, 11), vec![0; 5]);
        assert!(draw_epoch(&plan, 0, 11).is_empty());
    }

    #[test]
    fn draws_are_deterministic_and_balanced() {
        let labels = [true, false, false, false];
        let plan = plan_from_parts(&[0.5; 4], &labels, BinSpec::default()).unwrap();
        let a = draw_epoch(&plan, 10_000, 5);
        assert_eq!(a, draw_epoch(&plan, 10_000, 5));
        let pos = a.iter().filter(|&&i| labels[i]).count() as f64 / 1e4;
        assert!((pos - 0.5).abs() <= 0.02, "positive fraction {pos}");
    }

    #[test]
    fn empirical_frequencies_match_plan() {
        let cov: Vec<f64> = (0..400).map(|i| (i as f64 * 0.618_034).fract()).collect();
        let labels: Vec<bool> = cov.iter().enumerate().map(|(i, &c)| (i * 7 % 10) as f64 / 10.0 < c).collect();
        let spec = BinSpec::default();
        let plan = plan_from_parts(&cov, &labels, spec).unwrap();
        let n = 100_000;
        let mut seen = vec![[0usize; 2]; spec.bin_count()];
        for i in draw_epoch(&plan, n, 3) {
            seen[plan.bin_of()[i]][usize::from(labels[i])] += 1;
        }
        for (b, counts) in seen.iter().enumerate() {
            let mass = class_mass(&plan, &labels, b);
            for (y, (&count, p)) in counts.iter().zip(mass).enumerate() {
                let expected = p * n as f64;
                let sigma = (n as f64 * p * (1.0 - p)).sqrt();
                let dev = (count as f64 - expected).abs();
                assert!(dev <= 3.0 * sigma.max(1.0), "bin {b} class {y}: {count} vs {expected:.1}");
            }
        }
    }

    proptest! {
        #[test]
        fn class_balance_and_mass_conservation(
            items in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
            bins in 1usize..20,
        ) {
            let (cov, labels): (Vec<f64>, Vec<bool>) = items.into_iter().unzip();
            let spec = BinSpec::new(bins).unwrap();
            let plan = plan_from_parts(&cov, &labels, spec).unwrap();
            let total: f64 = plan.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(plan.weights().iter().all(|&w| w > 0.0));
            let n = cov.len() as f64;
            for b in 0..bins {
                let in_bin = plan.bin_of().iter().filter(|&&x| x == b).count() as f64;
                let [neg, pos] = class_mass(&plan, &labels, b);
                prop_assert!((neg + pos - in_bin / n).abs() < 1e-12);
                if neg > 0.0 && pos > 0.0 {
                    prop_assert!((neg - pos).abs() < 1e-12);
                }
            }
        }
    }
}
