//! File formats: dataset CSVs, manifests, reports, and the model
//! checkpoint.
//!
//! Datasets are CSV with header `label,f0,...,f{D-1}`. A label of -1 marks
//! an unlabeled row; ground truth for unlabeled step files travels in a
//! sibling `*_truth.csv` that training code never reads. Everything else is
//! JSON with a top-level `format_version`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{Activation, EmbeddingModel, Proxy, ProxySet};
use crate::evt::{PsiClassifier, WeibullParams};
use crate::metrics::{ScenarioMetrics, StepMetrics};
use crate::pipeline::{ScenarioConfig, StageReport};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "cgcd-ckpt-v1";
pub const REPORT_VERSION: &str = "cgcd-report-v1";
pub const DATA_MANIFEST_VERSION: &str = "cgcd-data-v1";
pub const RUN_MANIFEST_VERSION: &str = "cgcd-run-v1";

/// Rows of a dataset file. `label` is -1 for unlabeled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
}

impl CsvDataset {
    pub fn labeled(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Self {
            features,
            labels: labels.into_iter().map(|l| l as i64).collect(),
        }
    }

    pub fn unlabeled(features: Vec<Vec<f64>>) -> Self {
        let n = features.len();
        Self {
            features,
            labels: vec![-1; n],
        }
    }

    /// Labels as class ids; errors on any unlabeled row.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                usize::try_from(l).map_err(|_| {
                    Error::Parse("dataset contains unlabeled rows where labels are required".into())
                })
            })
            .collect()
    }
}

/// Serializes a dataset to CSV text.
pub fn dataset_to_csv(data: &CsvDataset) -> Result<String> {
    let dim = data.features.first().map(|f| f.len()).unwrap_or(0);
    if data.features.len() != data.labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "csv: {} feature rows vs {} labels",
            data.features.len(),
            data.labels.len()
        )));
    }
    let mut out = String::from("label");
    for d in 0..dim {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');
    for (row, &label) in data.features.iter().zip(&data.labels) {
        if row.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "csv: row of width {} in a dataset of width {dim}",
                row.len()
            )));
        }
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses dataset CSV text.
pub fn dataset_from_csv(text: &str) -> Result<CsvDataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Parse(format!(
            "CSV header must start with `label`, got `{header}`"
        )));
    }
    for (d, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{d}") {
            return Err(Error::Parse(format!("unexpected CSV column `{c}`")));
        }
    }
    let dim = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                parts.len()
            )));
        }
        let label: i64 = parts[0]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: bad label: {e}", lineno + 2)))?;
        let row: Vec<f64> = parts[1..]
            .iter()
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Parse(format!("line {}: bad value: {e}", lineno + 2)))
            })
            .collect::<std::result::Result<_, _>>()?;
        if row.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Parse(format!(
                "line {}: non-finite value",
                lineno + 2
            )));
        }
        features.push(row);
        labels.push(label);
    }
    Ok(CsvDataset { features, labels })
}

pub fn write_dataset(path: &Path, data: &CsvDataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(dataset_to_csv(data)?.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<CsvDataset> {
    dataset_from_csv(&fs::read_to_string(path)?)
}

/// Manifest written next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub files: Vec<String>,
}

/// Manifest written by a completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub stage_report_files: Vec<String>,
    pub metrics_file: String,
    pub checkpoint_file: String,
    pub timings_ms: BTreeMap<String, u64>,
}

/// Stage report file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReportFile {
    pub format_version: String,
    #[serde(flatten)]
    pub report: StageReport,
}

/// Final metrics file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format_version: String,
    #[serde(flatten)]
    pub metrics: ScenarioMetrics,
}

/// Self-contained model snapshot plus the metric history needed to rebuild
/// the run summary offline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: String,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub proxies: Vec<Proxy>,
    pub class_count: usize,
    pub weibulls: Vec<WeibullParams>,
    pub reject_threshold: f64,
    /// Ground-truth ids of the classes trained in the initial stage.
    pub old_truth_classes: Vec<usize>,
    pub initial_metrics: StepMetrics,
    pub step_metrics: Vec<StepMetrics>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        model: &EmbeddingModel,
        proxies: &ProxySet,
        weibulls: &[WeibullParams],
        reject_threshold: f64,
        old_truth_classes: Vec<usize>,
        initial_metrics: StepMetrics,
        step_metrics: Vec<StepMetrics>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION.into(),
            layer_dims: model.layer_dims().to_vec(),
            weights: model.weights.clone(),
            biases: model.biases.clone(),
            activation: model.activation,
            proxies: proxies.proxies.clone(),
            class_count: proxies.class_count,
            weibulls: weibulls.to_vec(),
            reject_threshold,
            old_truth_classes,
            initial_metrics,
            step_metrics,
        }
    }

    pub fn validate_version(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: self.format_version.clone(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<EmbeddingModel> {
        EmbeddingModel::from_parts(
            self.layer_dims.clone(),
            self.weights.clone(),
            self.biases.clone(),
            self.activation,
        )
    }

    pub fn classifier(&self) -> Result<PsiClassifier> {
        let proxies = ProxySet::new(self.proxies.clone(), self.class_count)?;
        PsiClassifier::new(proxies, self.weibulls.clone(), self.reject_threshold)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
