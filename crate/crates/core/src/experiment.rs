//! Experiment grid: every (model, imputation, resampling) configuration is
//! trained over several seeds, scored on a labeled test set and swept over
//! a deployment scene; per-seed metrics are aggregated into mean ± std
//! rows and configurations can be compared with a Welch t-test.

use std::fmt;
use std::io;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::impute::{ImputationKind, ImputationStrategy};
use crate::metrics::{
    aggregate_measures, balanced_accuracy, confusion, count_flags, delta_rates, parity,
    precision, recall, Measure, MeasureSummary, MetricsError, DEFAULT_COVERAGE_SPLIT,
};
use crate::model::{self, forward, prepare_inputs, ModelError, ModelKind, TrainConfig};
use crate::rng;
use crate::sweep::{
    aggregate_grid, disagreement_map, score_and_flag, tile_scene, FlagRecord, GridCellStats,
    Scene, SweepError, WindowSpec, DEFAULT_CELL_DEG,
};
use crate::synthgen::{generate_dataset, generate_scene, GenConfig, GenError, SceneConfig};
use crate::tiles::{Dataset, SplitTag};

pub const DEFAULT_SEEDS: usize = 5;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment grid has an empty {0} dimension")]
    EmptyGrid(&'static str),
    #[error("need at least 2 seeds per side, got {0} and {1}")]
    InsufficientSeeds(usize, usize),
    #[error("no row for {0}")]
    MissingRow(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("test dataset has unlabeled tile `{0}`")]
    Unlabeled(String),
    #[error("could not build thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub imputation: ImputationKind,
    pub resample: bool,
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.model,
            self.imputation,
            if self.resample { "resampled" } else { "standard" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub models: Vec<ModelKind>,
    pub imputations: Vec<ImputationKind>,
    pub resampling: Vec<bool>,
    /// Training seed of each repetition.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            imputations: ImputationKind::ALL.to_vec(),
            resampling: vec![false, true],
            seeds: expand_seeds(0, DEFAULT_SEEDS),
        }
    }
}

/// `count` repetition seeds split from one top-level seed.
pub fn expand_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| rng::derive_seed(seed, "seed", k)).collect()
}

impl ExperimentGrid {
    /// Sorted, de-duplicated Cartesian product.
    pub fn configs(&self) -> Result<Vec<RunConfig>, ExperimentError> {
        if self.models.is_empty() {
            return Err(ExperimentError::EmptyGrid("model"));
        }
        if self.imputations.is_empty() {
            return Err(ExperimentError::EmptyGrid("imputation"));
        }
        if self.resampling.is_empty() {
            return Err(ExperimentError::EmptyGrid("resampling"));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::EmptyGrid("seed"));
        }
        let mut out = Vec::new();
        for &model in &self.models {
            for &imputation in &self.imputations {
                for &resample in &self.resampling {
                    out.push(RunConfig {
                        model,
                        imputation,
                        resample,
                    });
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Everything besides the grid itself that shapes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Template for training. Its seed, imputation kind and resample flag
    /// are overwritten per run.
    pub train: TrainConfig,
    pub coverage_split: f64,
    pub window: WindowSpec,
    pub cell_deg: f64,
    /// Worker threads. Results do not depend on it, so reports omit it.
    #[serde(skip, default = "one_job")]
    pub jobs: usize,
}

fn one_job() -> usize {
    1
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            coverage_split: DEFAULT_COVERAGE_SPLIT,
            window: WindowSpec::default(),
            cell_deg: DEFAULT_CELL_DEG,
            jobs: 1,
        }
    }
}

impl RunSettings {
    pub fn train_config(&self, cfg: RunConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            imputation: ImputationStrategy {
                kind: cfg.imputation,
                noise_scale: self.train.imputation.noise_scale,
            },
            resample: cfg.resample,
            ..self.train.clone()
        }
    }
}

/// Metrics of one configuration under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub bacc: Measure,
    pub precision: Measure,
    pub recall: Measure,
    pub delta_fpr: Measure,
    pub delta_tpr: Measure,
    pub parity: Measure,
    pub flags: usize,
}

/// Mean ± std over seeds of every reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub bacc: MeasureSummary,
    pub precision: MeasureSummary,
    pub recall: MeasureSummary,
    pub delta_fpr: MeasureSummary,
    pub delta_tpr: MeasureSummary,
    pub parity: MeasureSummary,
    /// Mean flag count over seeds, rounded to the nearest integer.
    pub flags: u64,
    /// Only one seed ran, so every std is a placeholder 0.
    pub single_seed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub config: RunConfig,
    pub seeds: Vec<SeedMetrics>,
    pub summary: Option<RowSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub settings: RunSettings,
    pub grid: ExperimentGrid,
    pub rows: Vec<ReportRow>,
    /// Flags per grid cell for resampled (`a`) vs standard (`b`) training,
    /// averaged over architectures, imputations and seeds.
    pub grid_cells: Vec<GridCellStats>,
}

impl Report {
    pub fn row(&self, cfg: RunConfig) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.config == cfg)
    }

    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }
}

/// Train, evaluate and sweep one configuration under one seed.
pub fn run_single(
    train_ds: &Dataset,
    test_ds: &Dataset,
    deploy_tiles: &[crate::tiles::Tile],
    cfg: RunConfig,
    train_cfg: &TrainConfig,
    coverage_split: f64,
) -> Result<(SeedMetrics, Vec<FlagRecord>), ExperimentError> {
    let params = model::train(train_ds, cfg.model, train_cfg)?;
    let threshold = train_cfg.threshold;

    let labels = test_ds
        .tiles()
        .iter()
        .map(|t| t.label().ok_or_else(|| ExperimentError::Unlabeled(t.id().to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = prepare_inputs(test_ds.tiles(), train_cfg.imputation, train_cfg.seed);
    let scores = inputs
        .iter()
        .map(|x| forward(&params, x))
        .collect::<Result<Vec<_>, _>>()?;
    let cm = confusion(&scores, &labels, threshold)?;
    let (delta_fpr, delta_tpr) =
        delta_rates(&scores, &labels, &test_ds.coverages(), threshold, coverage_split)?;

    let flags = score_and_flag(
        deploy_tiles,
        &params,
        train_cfg.imputation,
        threshold,
        train_cfg.seed,
    )?;
    let deploy_scores: Vec<f64> = flags.iter().map(|r| r.score).collect();
    let deploy_cov: Vec<f64> = flags.iter().map(|r| r.coverage).collect();

    Ok((
        SeedMetrics {
            seed: train_cfg.seed,
            bacc: balanced_accuracy(&cm),
            precision: precision(&cm),
            recall: recall(&cm),
            delta_fpr,
            delta_tpr,
            parity: parity(&deploy_scores, &deploy_cov, threshold, coverage_split)?,
            flags: count_flags(&deploy_scores, threshold),
        },
        flags,
    ))
}

fn summarize(seeds: &[SeedMetrics]) -> RowSummary {
    let col = |f: fn(&SeedMetrics) -> Measure| -> MeasureSummary {
        aggregate_measures(&seeds.iter().map(f).collect::<Vec<_>>())
    };
    let flags = seeds.iter().map(|s| s.flags as f64).sum::<f64>() / seeds.len() as f64;
    RowSummary {
        bacc: col(|s| s.bacc),
        precision: col(|s| s.precision),
        recall: col(|s| s.recall),
        delta_fpr: col(|s| s.delta_fpr),
        delta_tpr: col(|s| s.delta_tpr),
        parity: col(|s| s.parity),
        flags: flags.round() as u64,
        single_seed: seeds.len() == 1,
    }
}

/// Run every configuration of `grid` under every seed of `grid.seeds`.
///
/// Jobs run on a pool of `settings.jobs` threads; results are merged in
/// configuration order and are identical for any pool size. A failing
/// configuration yields a row with `error` set and no summary.
pub fn run_grid(
    train_ds: &Dataset,
    test_ds: &Dataset,
    scene: &Scene,
    grid: &ExperimentGrid,
    settings: &RunSettings,
) -> Result<Report, ExperimentError> {
    let configs = grid.configs()?;
    let deploy_tiles = tile_scene(scene, settings.window)?;
    let jobs: Vec<(RunConfig, u64)> = configs
        .iter()
        .flat_map(|&c| grid.seeds.iter().map(move |&k| (c, k)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    let outcomes: Vec<Result<(SeedMetrics, Vec<FlagRecord>), String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cfg, k)| {
                run_single(
                    train_ds,
                    test_ds,
                    &deploy_tiles,
                    cfg,
                    &settings.train_config(cfg, k),
                    settings.coverage_split,
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(configs.len());
    let mut resampled_flags: Vec<Vec<FlagRecord>> = Vec::new();
    let mut standard_flags: Vec<Vec<FlagRecord>> = Vec::new();
    for (ci, &config) in configs.iter().enumerate() {
        let n = grid.seeds.len();
        let chunk = &outcomes[ci * n..(ci + 1) * n];
        if let Some(err) = chunk.iter().find_map(|o| o.as_ref().err()) {
            rows.push(ReportRow {
                config,
                seeds: Vec::new(),
                summary: None,
                error: Some(err.clone()),
            });
            continue;
        }
        let mut seeds = Vec::with_capacity(n);
        for (metrics, flags) in chunk.iter().flatten() {
            seeds.push(metrics.clone());
            if config.resample {
                resampled_flags.push(flags.clone());
            } else {
                standard_flags.push(flags.clone());
            }
        }
        rows.push(ReportRow {
            config,
            summary: Some(summarize(&seeds)),
            seeds,
            error: None,
        });
    }

    let grid_cells = if resampled_flags.is_empty() || standard_flags.is_empty() {
        Vec::new()
    } else {
        let a: Vec<&[FlagRecord]> = resampled_flags.iter().map(Vec::as_slice).collect();
        let b: Vec<&[FlagRecord]> = standard_flags.iter().map(Vec::as_slice).collect();
        let a = aggregate_grid(&a, settings.cell_deg)?;
        let b = aggregate_grid(&b, settings.cell_deg)?;
        disagreement_map(&a, &b)?
    };

    Ok(Report {
        settings: settings.clone(),
        grid: grid.clone(),
        rows,
        grid_cells,
    })
}

/// Synthetic train/test/deployment inputs for the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInputs {
    pub train: GenConfig,
    pub test: GenConfig,
    pub scene: SceneConfig,
}

impl SyntheticInputs {
    /// Biased (bias = 1) 4,000/1,000 tile train/test sets and a 512² scene.
    pub fn biased(seed: u64) -> Self {
        let base = GenConfig {
            bias: 1.0,
            ..GenConfig::default()
        };
        Self {
            train: GenConfig {
                n_tiles: 4000,
                split: SplitTag::Train,
                id_prefix: "train".into(),
                seed: rng::derive_seed(seed, "data", 0),
                ..base.clone()
            },
            test: GenConfig {
                n_tiles: 1000,
                split: SplitTag::Test,
                id_prefix: "test".into(),
                seed: rng::derive_seed(seed, "data", 1),
                ..base
            },
            scene: SceneConfig {
                seed: rng::derive_seed(seed, "data", 2),
                ..SceneConfig::default()
            },
        }
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset, Scene), ExperimentError> {
        Ok((
            generate_dataset(&self.train)?,
            generate_dataset(&self.test)?,
            generate_scene(&self.scene)?,
        ))
    }
}

/// Metric selector for comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Bacc,
    Precision,
    Recall,
    Dfpr,
    Dtpr,
    DfprAbs,
    DtprAbs,
    Parity,
    Flags,
}

impl MetricName {
    pub const ALL: [MetricName; 9] = [
        MetricName::Bacc,
        MetricName::Precision,
        MetricName::Recall,
        MetricName::Dfpr,
        MetricName::Dtpr,
        MetricName::DfprAbs,
        MetricName::DtprAbs,
        MetricName::Parity,
        MetricName::Flags,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Bacc => "bacc",
            MetricName::Precision => "precision",
            MetricName::Recall => "recall",
            MetricName::Dfpr => "dfpr",
            MetricName::Dtpr => "dtpr",
            MetricName::DfprAbs => "dfpr_abs",
            MetricName::DtprAbs => "dtpr_abs",
            MetricName::Parity => "parity",
            MetricName::Flags => "flags",
        }
    }

    /// Defined per-seed values of this metric.
    pub fn values(self, seeds: &[SeedMetrics]) -> Vec<f64> {
        seeds
            .iter()
            .filter_map(|s| match self {
                MetricName::Bacc => s.bacc.value(),
                MetricName::Precision => s.precision.value(),
                MetricName::Recall => s.recall.value(),
                MetricName::Dfpr => s.delta_fpr.value(),
                MetricName::Dtpr => s.delta_tpr.value(),
                MetricName::DfprAbs => s.delta_fpr.value().map(f64::abs),
                MetricName::DtprAbs => s.delta_tpr.value().map(f64::abs),
                MetricName::Parity => s.parity.value(),
                MetricName::Flags => Some(s.flags as f64),
            })
            .collect()
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ExperimentError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `mean(a) − mean(b)`.
    pub difference: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Two-sided Welch t-test at [`SIGNIFICANCE_LEVEL`].
///
/// With zero variance on both sides the test degenerates: equal means give
/// `p = 1`, different means `p = 0`.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<Comparison, ExperimentError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ExperimentError::InsufficientSeeds(a.len(), b.len()));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (ma, sa) = stats(a);
    let (mb, sb) = stats(b);
    let difference = ma - mb;
    let se2 = sa + sb;
    let p_value = if se2 == 0.0 {
        if difference == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = difference / se2.sqrt();
        let df = se2 * se2
            / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Comparison {
        difference,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}

/// Compare `metric` between two configurations of a report.
pub fn compare(
    report: &Report,
    metric: MetricName,
    a: RunConfig,
    b: RunConfig,
) -> Result<Comparison, ExperimentError> {
    let row = |c: RunConfig| {
        report
            .row(c)
            .ok_or_else(|| ExperimentError::MissingRow(c.to_string()))
    };
    welch_test(&metric.values(&row(a)?.seeds), &metric.values(&row(b)?.seeds))
}

/// One line of the significance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: MetricName,
    pub a: RunConfig,
    pub b: RunConfig,
    pub comparison: Comparison,
}

/// Resampled vs standard for each model and imputation, and each
/// imputation vs zero for each model and resampling mode.
pub fn standard_comparisons(report: &Report) -> Vec<ComparisonRow> {
    const METRICS: [MetricName; 6] = [
        MetricName::Bacc,
        MetricName::Precision,
        MetricName::Recall,
        MetricName::DfprAbs,
        MetricName::DtprAbs,
        MetricName::Parity,
    ];
    let mut pairs = Vec::new();
    for row in &report.rows {
        let c = row.config;
        if c.resample {
            pairs.push((c, RunConfig { resample: false, ..c }));
        }
        if c.imputation != ImputationKind::Zero {
            pairs.push((
                c,
                RunConfig {
                    imputation: ImputationKind::Zero,
                    ..c
                },
            ));
        }
    }
    let mut out = Vec::new();
    for (a, b) in pairs {
        for metric in METRICS {
            if let Ok(comparison) = compare(report, metric, a, b) {
                out.push(ComparisonRow {
                    metric,
                    a,
                    b,
                    comparison,
                });
            }
        }
    }
    out
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "model",
    "imputation",
    "resampling",
    "bacc_mean",
    "bacc_std",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "dfpr_mean",
    "dfpr_std",
    "dtpr_mean",
    "dtpr_std",
    "parity_mean",
    "parity_std",
    "flags",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Write the report. CSV holds the summary table (one line per
/// configuration); JSON holds the full report including per-seed values.
pub fn emit_report(
    report: &Report,
    format: ReportFormat,
    out: impl io::Write,
) -> Result<(), ExperimentError> {
    match format {
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, report)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(REPORT_COLUMNS)?;
            for row in &report.rows {
                let mut rec = vec![
                    row.config.model.to_string(),
                    row.config.imputation.to_string(),
                    if row.config.resample { "on" } else { "off" }.to_string(),
                ];
                match &row.summary {
                    Some(s) => {
                        for m in [
                            &s.bacc,
                            &s.precision,
                            &s.recall,
                            &s.delta_fpr,
                            &s.delta_tpr,
                            &s.parity,
                        ] {
                            rec.push(m.mean.to_string());
                            rec.push(m.std.to_string());
                        }
                        rec.push(s.flags.to_string());
                    }
                    None => rec.extend(std::iter::repeat_n("n/a".to_string(), 13)),
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Significance table as CSV.
pub fn write_comparisons_csv(
    rows: &[ComparisonRow],
    out: impl io::Write,
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "metric",
        "config_a",
        "config_b",
        "difference",
        "p_value",
        "significant",
    ])?;
    for r in rows {
        w.write_record([
            r.metric.to_string(),
            r.a.to_string(),
            r.b.to_string(),
            r.comparison.difference.to_string(),
            r.comparison.p_value.to_string(),
            r.comparison.significant.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
