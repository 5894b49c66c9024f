//! Dataset ingestion, per-sample metrics and aggregate reports.
//!
//! Pixel metrics are averaged per sample within a dataset and then
//! unweighted across datasets. Authentic samples have no positive pixels and
//! only contribute to image-level F1.

pub mod dataset;
pub mod metrics;

pub use dataset::{load_datasets, DatasetError, EvalSample, Listing};
pub use metrics::{image_f1, pixel_ap, pixel_auc, pixel_f1, MetricError, ScoreMap};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chain::ForensicResult;
use crate::messages::Label;
use crate::tools::MaskImage;

/// Threshold at which score maps are binarized for F1.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// A method's output for one sample, in the form the metrics consume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub score_map: ScoreMap,
    pub binary_mask: MaskImage,
    pub image_label: Label,
}

impl ScoredPrediction {
    /// Soft scores from an external method; the binary mask is `score >= 0.5`.
    pub fn from_scores(score_map: ScoreMap, image_label: Label) -> Self {
        let binary_mask = score_map.threshold(BINARY_THRESHOLD);
        Self {
            score_map,
            binary_mask,
            image_label,
        }
    }
}

/// Hard 0/1 score map from a pipeline result; authentic results map to an
/// all-zero mask.
pub fn result_to_prediction(r: &ForensicResult, dims: (u32, u32)) -> Result<ScoredPrediction, MetricError> {
    let mask = match &r.mask {
        Some(m) if m.dims() != dims => return Err(MetricError::DimensionMismatch(m.dims(), dims)),
        Some(m) if r.label == Label::Tampered => m.clone(),
        _ => MaskImage::zeros(dims.0, dims.1),
    };
    Ok(ScoredPrediction {
        score_map: ScoreMap::from_mask(&mask),
        binary_mask: mask,
        image_label: r.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub dataset: String,
    pub id: String,
    pub gt_label: Label,
    pub pred_label: Label,
    pub p_auc: Option<f64>,
    pub p_ap: Option<f64>,
    pub p_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub dataset: String,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub p_auc: Option<f64>,
    pub p_ap: Option<f64>,
    pub p_f1: Option<f64>,
    pub i_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub samples: usize,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub config_digest: String,
    pub datasets: Vec<DatasetSummary>,
    pub average: MetricSummary,
    pub rows: Vec<SampleRow>,
    /// Samples or metrics left out, with the reason.
    pub skipped: Vec<SkipRecord>,
    /// Samples whose prediction could not be produced.
    pub failed: Vec<SkipRecord>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Score aligned samples and predictions. A prediction of `Err(reason)`
/// records the sample as failed.
pub fn evaluate_dataset(
    samples: &[EvalSample],
    predictions: &[Result<ScoredPrediction, String>],
) -> Result<Report, MetricError> {
    if samples.len() != predictions.len() {
        return Err(MetricError::LengthMismatch(samples.len(), predictions.len()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = Vec::new();

    for (sample, pred) in samples.iter().zip(predictions) {
        let record = |reason: String| SkipRecord {
            dataset: sample.dataset.clone(),
            id: sample.id.clone(),
            reason,
        };
        let pred = match pred {
            Ok(p) => p,
            Err(reason) => {
                failed.push(record(reason.clone()));
                continue;
            }
        };
        let mut row = SampleRow {
            dataset: sample.dataset.clone(),
            id: sample.id.clone(),
            gt_label: sample.gt_label,
            pred_label: pred.image_label,
            p_auc: None,
            p_ap: None,
            p_f1: None,
        };
        if let Some(gt) = &sample.gt_mask {
            let mut score = |name: &str, r: Result<f64, MetricError>| match r {
                Ok(v) => Some(v),
                Err(MetricError::Undefined(why)) => {
                    skipped.push(record(format!("{name}: {why}")));
                    None
                }
                Err(e) => {
                    skipped.push(record(format!("{name}: {e}")));
                    None
                }
            };
            row.p_auc = score("p_auc", pixel_auc(&pred.score_map, gt));
            row.p_ap = score("p_ap", pixel_ap(&pred.score_map, gt));
            row.p_f1 = score("p_f1", pixel_f1(&pred.binary_mask, gt));
        }
        rows.push(row);
    }

    let mut names: Vec<&str> = samples.iter().map(|s| s.dataset.as_str()).collect();
    names.dedup();
    let mut seen = std::collections::HashSet::new();
    names.retain(|n| seen.insert(*n));

    let datasets: Vec<DatasetSummary> = names
        .iter()
        .map(|&name| {
            let ds_rows: Vec<&SampleRow> = rows.iter().filter(|r| r.dataset == name).collect();
            let preds: Vec<Label> = ds_rows.iter().map(|r| r.pred_label).collect();
            let gts: Vec<Label> = ds_rows.iter().map(|r| r.gt_label).collect();
            DatasetSummary {
                name: name.to_string(),
                samples: ds_rows.len(),
                metrics: MetricSummary {
                    p_auc: mean(ds_rows.iter().filter_map(|r| r.p_auc)),
                    p_ap: mean(ds_rows.iter().filter_map(|r| r.p_ap)),
                    p_f1: mean(ds_rows.iter().filter_map(|r| r.p_f1)),
                    i_f1: image_f1(&preds, &gts).ok(),
                },
            }
        })
        .collect();
    let average = MetricSummary {
        p_auc: mean(datasets.iter().filter_map(|d| d.metrics.p_auc)),
        p_ap: mean(datasets.iter().filter_map(|d| d.metrics.p_ap)),
        p_f1: mean(datasets.iter().filter_map(|d| d.metrics.p_f1)),
        i_f1: mean(datasets.iter().filter_map(|d| d.metrics.i_f1)),
    };
    Ok(Report {
        method: "ours".into(),
        config_digest: String::new(),
        datasets,
        average,
        rows,
        skipped,
        failed,
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text comparison table: one column group per dataset plus the
    /// average, each with P-AUC, P-AP, P-F1 and I-F1.
    pub fn to_table(&self) -> String {
        const METRICS: [&str; 4] = ["P-AUC", "P-AP", "P-F1", "I-F1"];
        const CELL: usize = 7;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let values = |m: &MetricSummary| [m.p_auc, m.p_ap, m.p_f1, m.i_f1].map(fmt);

        let mut groups: Vec<(String, [String; 4])> = self
            .datasets
            .iter()
            .map(|d| (d.name.clone(), values(&d.metrics)))
            .collect();
        groups.push(("Average".into(), values(&self.average)));

        let method_w = self.method.len().max("Method".len());
        let group_w = METRICS.len() * (CELL + 1) - 1;
        let mut out = String::new();
        let _ = write!(out, "{:<method_w$}", "Method");
        for (name, _) in &groups {
            let _ = write!(out, " | {name:^group_w$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<method_w$}", "");
        for _ in &groups {
            out.push_str(" |");
            for m in METRICS {
                let _ = write!(out, " {m:>CELL$}");
            }
        }
        out.push('\n');
        let width = out.lines().next().map_or(0, str::len);
        let _ = writeln!(out, "{}", "-".repeat(width));
        let _ = write!(out, "{:<method_w$}", self.method);
        for (_, vals) in &groups {
            out.push_str(" |");
            for v in vals {
                let _ = write!(out, " {v:>CELL$}");
            }
        }
        out.push('\n');
        if !self.skipped.is_empty() || !self.failed.is_empty() {
            let _ = writeln!(out, "\n{} skipped, {} failed", self.skipped.len(), self.failed.len());
            for s in &self.skipped {
                let _ = writeln!(out, "  skipped {}/{}: {}", s.dataset, s.id, s.reason);
            }
            for s in &self.failed {
                let _ = writeln!(out, "  failed  {}/{}: {}", s.dataset, s.id, s.reason);
            }
        }
        out
    }
}
