use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use covbias::experiment::{
    emit_report, expand_seeds, run_grid, standard_comparisons, write_comparisons_csv,
    ExperimentGrid, Report, ReportFormat, RunSettings, SyntheticInputs,
};
use covbias::impute::{ImputationKind, ImputationStrategy};
use covbias::metrics::{self, Measure, DEFAULT_COVERAGE_SPLIT, DEFAULT_THRESHOLD};
use covbias::model::{self, ModelKind, TrainConfig};
use covbias::resample::BinSpec;
use covbias::sweep::{
    self, aggregate_grid, disagreement_map, load_scene, save_scene, score_and_flag, tile_scene,
    write_file, write_flags_csv, write_grid_csv, WindowSpec, DEFAULT_CELL_DEG, DEFAULT_STRIDE,
};
use covbias::synthgen::{generate_dataset, generate_scene, GenConfig, SceneConfig};
use covbias::tds::{load_dataset, save_dataset};
use covbias::tiles::{SplitTag, TILE_SIZE};

#[derive(Parser)]
#[command(name = "covbias", version, about = "Coverage-bias audit and mitigation for tiled raster classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset or deployment scene.
    Gen(GenArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Score a labeled dataset and print test metrics as JSON.
    Eval(EvalArgs),
    /// Tile a scene, flag windows and aggregate flags on a lat/lon grid.
    Sweep(SweepArgs),
    /// Run the full configuration grid over seeds.
    Grid(GridArgs),
    /// Re-emit a saved JSON report, optionally with significance tests.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Dataset,
    Scene,
}

#[derive(Args)]
struct GenArgs {
    #[arg(value_enum)]
    kind: GenKind,
    /// Output `.tds` manifest path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    tiles: usize,
    #[arg(long, default_value_t = 0.5)]
    plume_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    #[arg(long, default_value = "train")]
    split: SplitTag,
    #[arg(long, default_value = "tile")]
    prefix: String,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 60)]
    plumes: usize,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long, default_value = "zero")]
    imputation: ImputationKind,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
}

impl ImputeArgs {
    fn strategy(&self) -> ImputationStrategy {
        ImputationStrategy {
            kind: self.imputation,
            noise_scale: self.noise_scale,
        }
    }
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64, imputation: ImputationStrategy, resample: bool) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed,
            imputation,
            resample,
            bins: BinSpec::new(self.bins)?,
            threshold: self.threshold,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "vanilla")]
    model: ModelKind,
    #[command(flatten)]
    impute: ImputeArgs,
    #[arg(long)]
    resample: bool,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint manifest.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the strategy recorded in the checkpoint.
    #[arg(long)]
    imputation: Option<ImputationKind>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_COVERAGE_SPLIT)]
    coverage_split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint manifest.
    #[arg(long)]
    model: PathBuf,
    /// Second checkpoint; enables the per-cell disagreement map.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    imputation: Option<ImputationKind>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_COVERAGE_SPLIT)]
    coverage_split: f64,
    #[arg(long, default_value_t = TILE_SIZE)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    #[arg(long, default_value_t = DEFAULT_CELL_DEG)]
    cell_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResampleMode {
    Off,
    On,
    Both,
}

#[derive(Args)]
struct GridArgs {
    /// Labeled training set; generated from `--seed` when omitted.
    #[arg(long, requires_all = ["test", "scene"])]
    train: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "scene"])]
    test: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "test"])]
    scene: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,multibranch")]
    models: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_value = "zero,median,sample,noise")]
    imputation: Vec<ImputationKind>,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, value_enum, default_value_t = ResampleMode::Both)]
    resample: ResampleMode,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = DEFAULT_COVERAGE_SPLIT)]
    coverage_split: f64,
    /// A repetition count, or a comma-separated list of explicit seeds.
    #[arg(long, default_value = "5")]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = DEFAULT_CELL_DEG)]
    cell_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report written by `grid`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Append the significance table for the standard comparisons.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Sweep(a) => sweep_cmd(a)?,
        Command::Grid(a) => return grid(a),
        Command::Report(a) => report(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen(a: GenArgs) -> Result<()> {
    match a.kind {
        GenKind::Dataset => {
            let cfg = GenConfig {
                n_tiles: a.tiles,
                plume_rate: a.plume_rate,
                bias: a.bias,
                split: a.split,
                id_prefix: a.prefix,
                seed: a.seed,
                ..GenConfig::default()
            };
            let ds = generate_dataset(&cfg)?;
            save_dataset(&ds, &a.out)?;
            eprintln!("wrote {} tiles to {}", ds.len(), a.out.display());
        }
        GenKind::Scene => {
            let defaults = SceneConfig::default();
            let cfg = SceneConfig {
                width_px: a.width,
                height_px: a.height,
                plume_count: a.plumes,
                extent: sweep::GeoExtent {
                    deg_per_px: defaults.extent.deg_per_px * defaults.width_px as f64 / a.width as f64,
                    ..defaults.extent
                },
                seed: a.seed,
                ..defaults
            };
            let scene = generate_scene(&cfg)?;
            save_scene(&scene, &a.out)?;
            eprintln!(
                "wrote {}x{} scene with {} plumes to {}",
                a.width,
                a.height,
                scene.plumes.len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let cfg = a.optim.config(a.seed, a.impute.strategy(), a.resample)?;
    let params = model::train(&ds, a.model, &cfg)?;
    model::save_checkpoint(&params, Some(&cfg), &a.out)?;
    eprintln!("wrote {} parameters to {}", params.len(), a.out.display());
    Ok(())
}

fn strategy_for(
    recorded: Option<&TrainConfig>,
    kind: Option<ImputationKind>,
    noise_scale: Option<f64>,
) -> ImputationStrategy {
    let base = recorded.map_or(ImputationStrategy::new(ImputationKind::Zero), |c| c.imputation);
    ImputationStrategy {
        kind: kind.unwrap_or(base.kind),
        noise_scale: noise_scale.unwrap_or(base.noise_scale),
    }
}

#[derive(Serialize)]
struct EvalOutput {
    tiles: usize,
    threshold: f64,
    coverage_split: f64,
    imputation: ImputationStrategy,
    confusion: metrics::ConfusionCounts,
    bacc: Measure,
    precision: Measure,
    recall: Measure,
    delta_fpr: Measure,
    delta_tpr: Measure,
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let (params, recorded) = model::load_checkpoint(&a.model)?;
    let strategy = strategy_for(recorded.as_ref(), a.imputation, a.noise_scale);
    let labels = ds
        .tiles()
        .iter()
        .map(|t| t.label().with_context(|| format!("tile `{}` is unlabeled", t.id())))
        .collect::<Result<Vec<_>>>()?;
    let scores = model::prepare_inputs(ds.tiles(), strategy, a.seed)
        .iter()
        .map(|x| model::forward(&params, x))
        .collect::<Result<Vec<_>, _>>()?;
    let cm = metrics::confusion(&scores, &labels, a.threshold)?;
    let (delta_fpr, delta_tpr) =
        metrics::delta_rates(&scores, &labels, &ds.coverages(), a.threshold, a.coverage_split)?;
    let out = EvalOutput {
        tiles: ds.len(),
        threshold: a.threshold,
        coverage_split: a.coverage_split,
        imputation: strategy,
        confusion: cm,
        bacc: metrics::balanced_accuracy(&cm),
        precision: metrics::precision(&cm),
        recall: metrics::recall(&cm),
        delta_fpr,
        delta_tpr,
    };
    let text = serde_json::to_string_pretty(&out)? + "\n";
    match a.out {
        Some(path) => fs::write(&path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let scene = load_scene(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let tiles = tile_scene(&scene, WindowSpec::new(a.window, a.stride)?)?;
    fs::create_dir_all(&a.out)?;

    let mut runs = Vec::new();
    for (name, path) in std::iter::once(("model", &a.model)).chain(a.baseline.as_ref().map(|p| ("baseline", p))) {
        let (params, recorded) = model::load_checkpoint(path)?;
        let strategy = strategy_for(recorded.as_ref(), a.imputation, a.noise_scale);
        let records = score_and_flag(&tiles, &params, strategy, a.threshold, a.seed)?;
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let cov: Vec<f64> = records.iter().map(|r| r.coverage).collect();
        let parity = metrics::parity(&scores, &cov, a.threshold, a.coverage_split)?;
        eprintln!(
            "{name}: {} windows, {} flagged, parity {parity}",
            records.len(),
            metrics::count_flags(&scores, a.threshold)
        );
        let label = path.display().to_string();
        write_file(&a.out.join(format!("flags_{name}.csv")), |buf| {
            write_flags_csv(&records, &label, buf)
        })?;
        runs.push(records);
    }

    let counts = runs
        .iter()
        .map(|r| aggregate_grid(&[r.as_slice()], a.cell_deg))
        .collect::<Result<Vec<_>, _>>()?;
    let empty = sweep::GridCounts {
        cell_deg: a.cell_deg,
        cells: Default::default(),
    };
    let stats = disagreement_map(&counts[0], counts.get(1).unwrap_or(&empty))?;
    write_file(&a.out.join("grid.csv"), |buf| write_grid_csv(&stats, buf))?;
    Ok(())
}

fn parse_seeds(spec: &str, top: u64) -> Result<Vec<u64>> {
    if spec.contains(',') {
        return spec
            .split(',')
            .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
            .collect();
    }
    let n: usize = spec.trim().parse().with_context(|| format!("bad --seeds `{spec}`"))?;
    if n == 0 {
        bail!("--seeds must be positive");
    }
    Ok(expand_seeds(top, n))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    inputs: ManifestInputs,
    grid: &'a ExperimentGrid,
    settings: &'a RunSettings,
    jobs: usize,
    configurations: usize,
    errors: Vec<String>,
}

#[derive(Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
enum ManifestInputs {
    Files {
        train: String,
        test: String,
        scene: String,
    },
    Generated(Box<SyntheticInputs>),
}

fn grid(a: GridArgs) -> Result<ExitCode> {
    let (train_ds, test_ds, scene, inputs) = match (&a.train, &a.test, &a.scene) {
        (Some(tr), Some(te), Some(sc)) => (
            load_dataset(tr).with_context(|| format!("loading {}", tr.display()))?,
            load_dataset(te).with_context(|| format!("loading {}", te.display()))?,
            load_scene(sc).with_context(|| format!("loading {}", sc.display()))?,
            ManifestInputs::Files {
                train: tr.display().to_string(),
                test: te.display().to_string(),
                scene: sc.display().to_string(),
            },
        ),
        _ => {
            let synth = SyntheticInputs::biased(a.seed);
            let (tr, te, sc) = synth.generate()?;
            (tr, te, sc, ManifestInputs::Generated(Box::new(synth)))
        }
    };

    let grid = ExperimentGrid {
        models: a.models.clone(),
        imputations: a.imputation.clone(),
        resampling: match a.resample {
            ResampleMode::Off => vec![false],
            ResampleMode::On => vec![true],
            ResampleMode::Both => vec![false, true],
        },
        seeds: parse_seeds(&a.seeds, a.seed)?,
    };
    let settings = RunSettings {
        train: a.optim.config(
            0,
            ImputationStrategy {
                kind: ImputationKind::Zero,
                noise_scale: a.noise_scale,
            },
            false,
        )?,
        coverage_split: a.coverage_split,
        window: WindowSpec::default(),
        cell_deg: a.cell_deg,
        jobs: a.jobs,
    };
    let report = run_grid(&train_ds, &test_ds, &scene, &grid, &settings)?;

    fs::create_dir_all(&a.out)?;
    write_report(&a.out.join("report.csv"), &report, ReportFormat::Csv)?;
    write_report(&a.out.join("report.json"), &report, ReportFormat::Json)?;
    let mut buf = Vec::new();
    write_comparisons_csv(&standard_comparisons(&report), &mut buf)?;
    fs::write(a.out.join("comparisons.csv"), buf)?;
    write_file(&a.out.join("grid.csv"), |buf| write_grid_csv(&report.grid_cells, buf))?;

    let errors: Vec<String> = report
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.config)))
        .collect();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: a.seed,
        inputs,
        grid: &grid,
        settings: &settings,
        jobs: settings.jobs,
        configurations: report.rows.len(),
        errors: errors.clone(),
    };
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    for e in &errors {
        eprintln!("configuration failed: {e}");
    }
    eprintln!("wrote {} rows to {}", report.rows.len(), a.out.display());
    Ok(if errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn write_report(path: &Path, report: &Report, format: ReportFormat) -> Result<()> {
    let mut buf = Vec::new();
    emit_report(report, format, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: Report = serde_json::from_str(&text)?;
    let mut buf = Vec::new();
    emit_report(&report, a.format, &mut buf)?;
    if a.compare {
        buf.push(b'\n');
        write_comparisons_csv(&standard_comparisons(&report), &mut buf)?;
    }
    match a.out {
        Some(path) => fs::write(path, buf)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&buf)?;
        }
    }
    Ok(())
}
