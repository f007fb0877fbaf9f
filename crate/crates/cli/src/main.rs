//! `cgcd`: generate synthetic scenarios, run the full continual discovery
//! pipeline, and re-evaluate saved checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cgcd_core::io::{
    read_dataset, write_json, Checkpoint, CsvDataset, DatasetManifest, MetricsFile, RunManifest,
    StageReportFile, DATA_MANIFEST_VERSION, REPORT_VERSION, RUN_MANIFEST_VERSION,
};
use cgcd_core::metrics::{discovery, forgetting, recall_at_k, ScenarioMetrics};
use cgcd_core::pipeline::{
    evaluate_step, generate_synthetic_scenario, run_scenario, LabeledDataset, Scenario,
    ScenarioConfig, StepData, REPORT_KS,
};

/// Missing input files exit with this code so scripts can tell "file not
/// found" from other failures.
const EXIT_MISSING_FILE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cgcd",
    about = "Continual generalized category discovery pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (takes precedence over CGCD_SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario as CSV files plus a manifest.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for the dataset.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full pipeline on a generated dataset.
    Run {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory holding the generated dataset and its manifest.
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory for reports and the checkpoint.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-evaluate a checkpoint against an evaluation CSV; prints metrics
    /// JSON to stdout.
    Eval {
        /// Checkpoint JSON written by `run`.
        checkpoint: PathBuf,
        /// Evaluation CSV with ground-truth labels.
        eval_csv: PathBuf,
    },
}

struct CliError {
    message: String,
    exit: u8,
}

impl CliError {
    fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            exit: 1,
        }
    }

    fn missing(path: &Path) -> Self {
        Self {
            message: format!("missing input file: {}", path.display()),
            exit: EXIT_MISSING_FILE,
        }
    }
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::new(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, out_dir } => cmd_generate(&common, &out_dir),
        Command::Run {
            common,
            data_dir,
            out_dir,
        } => cmd_run(&common, &data_dir, &out_dir),
        Command::Eval {
            checkpoint,
            eval_csv,
        } => cmd_eval(&checkpoint, &eval_csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}

fn parse_config(path: Option<&Path>) -> CliResult<ScenarioConfig> {
    match path {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::missing(path));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::new(format!("{}: {e}", path.display())))
        }
        None => Ok(ScenarioConfig::default()),
    }
}

fn load_config(common: &CommonOpts) -> CliResult<ScenarioConfig> {
    let mut cfg = parse_config(common.config.as_deref())?;
    if let Some(seed) = resolve_seed(common)? {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_seed(common: &CommonOpts) -> CliResult<Option<u64>> {
    if let Some(s) = common.seed {
        return Ok(Some(s));
    }
    match std::env::var("CGCD_SEED") {
        Ok(v) => {
            let parsed = v
                .parse::<u64>()
                .map_err(|e| CliError::new(format!("CGCD_SEED: {e}")))?;
            Ok(Some(parsed))
        }
        Err(_) => Ok(None),
    }
}

fn step_file(t: usize) -> String {
    format!("step_{t}.csv")
}

fn step_truth_file(t: usize) -> String {
    format!("step_{t}_truth.csv")
}

fn cmd_generate(common: &CommonOpts, out_dir: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    let seed = cfg.train.seed;
    let scenario = generate_synthetic_scenario(&cfg, seed)?;

    // render everything before touching the filesystem
    let mut files: Vec<(String, String)> = Vec::new();
    files.push((
        "initial.csv".into(),
        cgcd_core::io::dataset_to_csv(&CsvDataset::labeled(
            scenario.initial.features.clone(),
            scenario.initial.labels.clone(),
        ))?,
    ));
    for (t, step) in scenario.steps.iter().enumerate() {
        files.push((
            step_file(t + 1),
            cgcd_core::io::dataset_to_csv(&CsvDataset::unlabeled(step.features.clone()))?,
        ));
        files.push((
            step_truth_file(t + 1),
            cgcd_core::io::dataset_to_csv(&CsvDataset::labeled(
                step.features.clone(),
                step.truth.clone(),
            ))?,
        ));
    }
    files.push((
        "eval.csv".into(),
        cgcd_core::io::dataset_to_csv(&CsvDataset::labeled(
            scenario.eval.features.clone(),
            scenario.eval.labels.clone(),
        ))?,
    ));

    let manifest = DatasetManifest {
        format_version: DATA_MANIFEST_VERSION.into(),
        seed,
        config: cfg,
        files: files.iter().map(|(name, _)| name.clone()).collect(),
    };

    std::fs::create_dir_all(out_dir)?;
    for (name, text) in &files {
        std::fs::write(out_dir.join(name), text)?;
    }
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} dataset files to {}",
        files.len(),
        out_dir.display()
    );
    Ok(())
}

/// Lines describing where two config documents disagree.
fn config_diff(ours: &ScenarioConfig, manifest: &ScenarioConfig) -> Vec<String> {
    let a = serde_json::to_value(ours).unwrap_or_default();
    let b = serde_json::to_value(manifest).unwrap_or_default();
    let mut out = Vec::new();
    diff_values("", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                diff_values(
                    &sub,
                    ma.get(k).unwrap_or(&Value::Null),
                    mb.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        _ if a != b => out.push(format!("  {path}: requested {a} vs dataset manifest {b}")),
        _ => {}
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn load_scenario(data_dir: &Path, manifest: &DatasetManifest) -> CliResult<Scenario> {
    for name in &manifest.files {
        require_file(&data_dir.join(name))?;
    }
    let initial_csv = read_dataset(&data_dir.join("initial.csv"))?;
    let initial = LabeledDataset {
        labels: initial_csv.require_labels()?,
        features: initial_csv.features,
    };
    let initial_class_count = initial.labels.iter().max().map(|&m| m + 1).unwrap_or(0);

    let mut steps = Vec::new();
    let mut novel_per_step = Vec::new();
    let mut seen: std::collections::BTreeSet<usize> = (0..initial_class_count).collect();
    for t in 1..=manifest.config.steps {
        let data = read_dataset(&data_dir.join(step_file(t)))?;
        let truth_csv = read_dataset(&data_dir.join(step_truth_file(t)))?;
        let truth = truth_csv.require_labels()?;
        if truth.len() != data.features.len() {
            return Err(CliError::new(format!(
                "step {t}: truth file has {} rows but data has {}",
                truth.len(),
                data.features.len()
            )));
        }
        let mut novel: Vec<usize> = truth
            .iter()
            .copied()
            .filter(|c| !seen.contains(c))
            .collect();
        novel.sort_unstable();
        novel.dedup();
        seen.extend(novel.iter().copied());
        novel_per_step.push(novel);
        steps.push(StepData {
            features: data.features,
            truth,
        });
    }

    let eval_csv = read_dataset(&data_dir.join("eval.csv"))?;
    let eval = LabeledDataset {
        labels: eval_csv.require_labels()?,
        features: eval_csv.features,
    };

    Ok(Scenario {
        initial,
        steps,
        eval,
        novel_classes_per_step: novel_per_step,
        initial_class_count,
    })
}

fn cmd_run(common: &CommonOpts, data_dir: &Path, out_dir: &Path) -> CliResult<()> {
    let manifest_path = data_dir.join("manifest.json");
    require_file(&manifest_path)?;
    let data_manifest: DatasetManifest = cgcd_core::io::read_json(&manifest_path)?;
    if data_manifest.format_version != DATA_MANIFEST_VERSION {
        return Err(CliError::new(format!(
            "dataset manifest format `{}` is not supported (expected `{}`)",
            data_manifest.format_version, DATA_MANIFEST_VERSION
        )));
    }

    let mut cfg = match &common.config {
        Some(path) => {
            let requested = parse_config(Some(path))?;
            // the training seed may differ from the generation seed
            let diff: Vec<String> = config_diff(&requested, &data_manifest.config)
                .into_iter()
                .filter(|line| !line.trim_start().starts_with("train.seed:"))
                .collect();
            if !diff.is_empty() {
                return Err(CliError::new(format!(
                    "config does not match the dataset manifest:\n{}",
                    diff.join("\n")
                )));
            }
            requested
        }
        None => data_manifest.config.clone(),
    };
    if let Some(seed) = resolve_seed(common)? {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    let scenario = load_scenario(data_dir, &data_manifest)?;

    let mut timings: BTreeMap<String, u64> = BTreeMap::new();
    let start = Instant::now();
    let outcome = run_scenario(&cfg, &scenario)?;
    timings.insert("run_scenario".into(), start.elapsed().as_millis() as u64);

    // render all outputs, then write
    let mut stage_files = Vec::new();
    for report in &outcome.stage_reports {
        stage_files.push((
            format!("stage_{}.json", report.step),
            StageReportFile {
                format_version: REPORT_VERSION.into(),
                report: report.clone(),
            },
        ));
    }
    let metrics_file = MetricsFile {
        format_version: REPORT_VERSION.into(),
        metrics: outcome.metrics.clone(),
    };
    let old_truth: Vec<usize> = (0..scenario.initial_class_count).collect();
    let checkpoint = Checkpoint::from_parts(
        &outcome.model,
        &outcome.proxies,
        &outcome.weibulls,
        cfg.evt.reject_threshold,
        old_truth,
        outcome.initial_metrics.clone(),
        outcome
            .stage_reports
            .iter()
            .map(|r| r.metrics.clone())
            .collect(),
    );
    let run_manifest = RunManifest {
        format_version: RUN_MANIFEST_VERSION.into(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        stage_report_files: stage_files.iter().map(|(n, _)| n.clone()).collect(),
        metrics_file: "metrics.json".into(),
        checkpoint_file: "checkpoint.json".into(),
        timings_ms: timings,
    };

    std::fs::create_dir_all(out_dir)?;
    for (name, contents) in &stage_files {
        write_json(&out_dir.join(name), contents)?;
    }
    write_json(&out_dir.join("metrics.json"), &metrics_file)?;
    write_json(&out_dir.join("checkpoint.json"), &checkpoint)?;
    write_json(&out_dir.join("run_manifest.json"), &run_manifest)?;
    println!(
        "m_all = {:.4}, m_f = {:.4}, m_d = {:.4} ({} stage reports in {})",
        outcome
            .metrics
            .steps
            .last()
            .map(|s| s.m_all)
            .unwrap_or(outcome.metrics.initial_accuracy),
        outcome.metrics.m_f,
        outcome.metrics.m_d,
        stage_files.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, eval_csv: &Path) -> CliResult<()> {
    require_file(checkpoint_path)?;
    require_file(eval_csv)?;
    let ckpt: Checkpoint = cgcd_core::io::read_json(checkpoint_path)?;
    ckpt.validate_version()?;
    let model = ckpt.model()?;
    let classifier = ckpt.classifier()?;

    let csv = read_dataset(eval_csv)?;
    let eval = LabeledDataset {
        labels: csv.require_labels()?,
        features: csv.features,
    };
    let mut seen: Vec<usize> = eval.labels.clone();
    seen.sort_unstable();
    seen.dedup();

    let final_step = ckpt.step_metrics.len();
    let final_metrics = evaluate_step(
        &model,
        &classifier,
        &eval,
        &seen,
        &ckpt.old_truth_classes,
        final_step,
        ckpt.class_count,
    )?;

    let mut m_old_hist = vec![ckpt.initial_metrics.m_old];
    let mut steps = ckpt.step_metrics.clone();
    if let Some(last) = steps.last_mut() {
        *last = final_metrics.clone();
    }
    for s in &steps {
        m_old_hist.push(s.m_old);
    }
    let m_new_hist: Vec<f64> = steps.iter().map(|s| s.m_new).collect();

    let embedded = model.embed_batch(&eval.features)?;
    let ks: Vec<usize> = REPORT_KS
        .iter()
        .copied()
        .filter(|&k| k < eval.labels.len())
        .collect();
    let recall = recall_at_k(&embedded, &eval.labels, &ks)?;

    let metrics = ScenarioMetrics {
        initial_accuracy: if steps.is_empty() {
            final_metrics.m_old
        } else {
            ckpt.initial_metrics.m_old
        },
        steps,
        m_f: forgetting(&m_old_hist)?,
        m_d: if m_new_hist.is_empty() {
            0.0
        } else {
            discovery(&m_new_hist)?
        },
        recall_at_k: recall,
    };
    let file = MetricsFile {
        format_version: REPORT_VERSION.into(),
        metrics,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&file).map_err(|e| CliError::new(e.to_string()))?
    );
    Ok(())
}
