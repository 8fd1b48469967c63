use covbias::experiment::*;
use covbias::impute::ImputationKind;
use covbias::metrics::Measure;
use covbias::model::{ModelKind, TrainConfig};
use covbias::sweep::Scene;
use covbias::synthgen::{generate_dataset, generate_scene, GenConfig, SceneConfig};
use covbias::tiles::{Dataset, SplitTag, Tile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    simpson(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), 1e-13, 50)
}

/// Two-sided tail of Student's t with `df` degrees of freedom, from the
/// unnormalized density integrated on `[0, 1)` after `x = s + u / (1 − u)`.
fn t_two_sided(t: f64, df: f64) -> f64 {
    let density = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let tail_from = |s: f64| {
        let g = move |u: f64| {
            if u >= 1.0 {
                return 0.0;
            }
            let x = s + u / (1.0 - u);
            density(x) / ((1.0 - u) * (1.0 - u))
        };
        integrate(&g, 0.0, 1.0)
    };
    2.0 * tail_from(t.abs()) / (2.0 * tail_from(0.0))
}

fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (qa, qb) = (var(a) / a.len() as f64, var(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    (mean(a) - mean(b), t_two_sided(t, df))
}

#[test]
fn welch_p_values_match_quadrature_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in 0..40 {
        let n_a = 2 + k % 7;
        let n_b = 2 + (k * 3) % 5;
        let shift = 0.25 * (k % 9) as f64;
        let sa = Normal::new(0.0, 1.0 + 0.1 * (k % 4) as f64).unwrap();
        let sb = Normal::new(shift, 0.5 + 0.2 * (k % 3) as f64).unwrap();
        let a: Vec<f64> = (0..n_a).map(|_| sa.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n_b).map(|_| sb.sample(&mut rng)).collect();
        let got = welch_test(&a, &b).unwrap();
        let (diff, p) = welch_oracle(&a, &b);
        assert!((got.difference - diff).abs() < 1e-12);
        assert!((got.p_value - p).abs() < 0.02, "case {k}: {} vs oracle {p}", got.p_value);
        assert_eq!(got.significant, got.p_value < 0.05);
    }
}

fn tiny_inputs(unlabeled_test: bool) -> (Dataset, Dataset, Scene) {
    let base = GenConfig {
        bias: 1.0,
        ..GenConfig::default()
    };
    let train = generate_dataset(&GenConfig {
        n_tiles: 48,
        seed: 1,
        ..base.clone()
    })
    .unwrap();
    let mut test = generate_dataset(&GenConfig {
        n_tiles: 24,
        seed: 2,
        split: SplitTag::Test,
        id_prefix: "test".into(),
        ..base
    })
    .unwrap();
    if unlabeled_test {
        let mut tiles: Vec<Tile> = test.into_tiles();
        tiles[3] = tiles[3].with_label(None);
        test = Dataset::new(SplitTag::Test, (3, 32, 32), tiles).unwrap();
    }
    let scene = generate_scene(&SceneConfig {
        width_px: 80,
        height_px: 64,
        plume_count: 4,
        seed: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    (train, test, scene)
}

fn quick_settings() -> RunSettings {
    RunSettings {
        train: TrainConfig {
            epochs: 2,
            learning_rate: 0.2,
            ..TrainConfig::default()
        },
        ..RunSettings::default()
    }
}

fn report_text(report: &Report, format: ReportFormat) -> String {
    let mut buf = Vec::new();
    emit_report(report, format, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn single_config_single_seed_has_zero_std() {
    let (train, test, scene) = tiny_inputs(false);
    let grid = ExperimentGrid {
        models: vec![ModelKind::Vanilla],
        imputations: vec![ImputationKind::Median],
        resampling: vec![true],
        seeds: vec![7],
    };
    let report = run_grid(&train, &test, &scene, &grid, &quick_settings()).unwrap();
    assert_eq!(report.rows.len(), 1);
    let s = report.rows[0].summary.as_ref().unwrap();
    assert!(s.single_seed);
    assert_eq!(s.bacc.std, Measure::Value(0.0));
    assert_eq!(report.rows[0].seeds[0].seed, 7);
    // only resampled runs: no standard side to compare against
    assert!(report.grid_cells.is_empty());
}

#[test]
fn json_and_csv_agree_and_reruns_are_identical() {
    let (train, test, scene) = tiny_inputs(false);
    let grid = ExperimentGrid {
        models: ModelKind::ALL.to_vec(),
        imputations: vec![ImputationKind::Zero, ImputationKind::NoiseAugmented],
        resampling: vec![false, true],
        seeds: expand_seeds(3, 2),
    };
    let settings = quick_settings();
    let report = run_grid(&train, &test, &scene, &grid, &settings).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert!(!report.has_errors());
    assert!(!report.grid_cells.is_empty());

    let csv_text = report_text(&report, ReportFormat::Csv);
    let json_text = report_text(&report, ReportFormat::Json);
    let parsed: Report = serde_json::from_str(&json_text).unwrap();
    assert_eq!(parsed, report);

    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), REPORT_COLUMNS);
    let lines: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(lines.len(), parsed.rows.len());
    for (rec, row) in lines.iter().zip(&parsed.rows) {
        assert_eq!(&rec[0], row.config.model.as_str());
        assert_eq!(&rec[1], row.config.imputation.as_str());
        assert_eq!(&rec[2], if row.config.resample { "on" } else { "off" });
        let s = row.summary.as_ref().unwrap();
        let cells = [s.bacc, s.precision, s.recall, s.delta_fpr, s.delta_tpr, s.parity];
        for (i, m) in cells.iter().enumerate() {
            for (j, v) in [m.mean, m.std].iter().enumerate() {
                let field = &rec[3 + 2 * i + j];
                match v {
                    Measure::Value(x) => assert_eq!(field.parse::<f64>().unwrap(), *x),
                    Measure::Undefined => assert_eq!(field, "n/a"),
                    Measure::Infinite => assert_eq!(field, "inf"),
                }
            }
        }
        assert_eq!(rec[15].parse::<u64>().unwrap(), s.flags);
    }
    let order: Vec<RunConfig> = parsed.rows.iter().map(|r| r.config).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);

    let again = run_grid(&train, &test, &scene, &grid, &RunSettings { jobs: 3, ..settings }).unwrap();
    assert_eq!(report_text(&again, ReportFormat::Csv), csv_text);
    let rows_json = |r: &Report| serde_json::to_string(&r.rows).unwrap();
    assert_eq!(rows_json(&again), rows_json(&report));
}

#[test]
fn configurations_are_isolated() {
    let (train, test, scene) = tiny_inputs(false);
    let seeds = expand_seeds(11, 2);
    let settings = quick_settings();
    let full = run_grid(
        &train,
        &test,
        &scene,
        &ExperimentGrid {
            models: vec![ModelKind::MultiBranch],
            imputations: vec![ImputationKind::Zero, ImputationKind::PixelSample],
            resampling: vec![false, true],
            seeds: seeds.clone(),
        },
        &settings,
    )
    .unwrap();
    let subset = run_grid(
        &train,
        &test,
        &scene,
        &ExperimentGrid {
            models: vec![ModelKind::MultiBranch],
            imputations: vec![ImputationKind::PixelSample],
            resampling: vec![true],
            seeds,
        },
        &settings,
    )
    .unwrap();
    let row = &subset.rows[0];
    let checksum = |r: &ReportRow| serde_json::to_string(r).unwrap();
    assert_eq!(checksum(full.row(row.config).unwrap()), checksum(row));
}

#[test]
fn failing_configurations_become_error_rows() {
    let (train, test, scene) = tiny_inputs(true);
    let grid = ExperimentGrid {
        models: vec![ModelKind::Vanilla],
        imputations: vec![ImputationKind::Zero],
        resampling: vec![false, true],
        seeds: vec![1, 2],
    };
    let report = run_grid(&train, &test, &scene, &grid, &quick_settings()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.has_errors());
    for row in &report.rows {
        assert!(row.error.as_ref().unwrap().contains("unlabeled"));
        assert!(row.summary.is_none());
    }
    let csv_text = report_text(&report, ReportFormat::Csv);
    assert_eq!(csv_text.lines().count(), 3);
    assert!(csv_text.lines().nth(1).unwrap().ends_with("n/a,n/a"));
}

#[test]
fn comparisons_need_two_seeds_per_side() {
    let (train, test, scene) = tiny_inputs(false);
    let grid = ExperimentGrid {
        models: vec![ModelKind::Vanilla],
        imputations: vec![ImputationKind::Zero, ImputationKind::Median],
        resampling: vec![false],
        seeds: vec![5],
    };
    let report = run_grid(&train, &test, &scene, &grid, &quick_settings()).unwrap();
    let a = report.rows[1].config;
    let b = report.rows[0].config;
    assert!(matches!(
        compare(&report, MetricName::Bacc, a, b),
        Err(ExperimentError::InsufficientSeeds(1, 1))
    ));
    assert!(standard_comparisons(&report).is_empty());
}
