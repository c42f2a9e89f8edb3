//! Split-wise top-1 accuracy, the nearest-class-mean probe and run reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_classes, Dataset, ShotSplit, ShotTag};
use crate::error::{Error, Result};
use crate::model::{Model, NcmClassifier};

/// Column order of report CSV files.
pub const CSV_HEADER: &str = "method,seed,overall_acc,many_acc,mid_acc,few_acc,ncm_overall_acc";

/// Fraction of `pred` equal to `labels`; 0 for empty input.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy overall and per shot bucket. A bucket with no test instance
/// has no accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub mid: Option<f64>,
    pub few: Option<f64>,
    /// Test instances in the many, mid and few buckets.
    pub counts: [usize; 3],
}

/// `class_tags[j]` is the bucket of class `j`.
pub fn split_accuracy(
    pred: &[usize],
    labels: &[usize],
    class_tags: &[ShotTag],
) -> Result<SplitAccuracy> {
    if pred.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (&p, &y) in pred.iter().zip(labels) {
        let tag = *class_tags
            .get(y)
            .ok_or_else(|| Error::Validation(format!("label {y} has no shot tag")))?;
        let slot = match tag {
            ShotTag::Many => 0,
            ShotTag::Mid => 1,
            ShotTag::Few => 2,
        };
        totals[slot] += 1;
        hits[slot] += usize::from(p == y);
    }
    let frac = |s: usize| (totals[s] > 0).then(|| hits[s] as f64 / totals[s] as f64);
    Ok(SplitAccuracy {
        overall: accuracy(pred, labels),
        many: frac(0),
        mid: frac(1),
        few: frac(2),
        counts: totals,
    })
}

/// Buckets come from the training counts in `train_counts`.
pub fn top1_accuracy(
    model: &Model,
    test: &Dataset,
    train_counts: &[usize],
    split: &ShotSplit,
) -> Result<SplitAccuracy> {
    let tags = split.assign(train_counts)?;
    split_accuracy(&model.predict(test)?, test.labels(), &tags)
}

/// Top-1 accuracy of a nearest-class-mean classifier fitted on the model's
/// classifier inputs over `train`.
pub fn ncm_probe(model: &Model, train: &Dataset, test: &Dataset) -> Result<f64> {
    let dim = model.spec.embedding_dim();
    let ncm = NcmClassifier::fit(
        &model.embed(train)?,
        dim,
        train.labels(),
        train.num_classes(),
    )?;
    Ok(accuracy(
        &ncm.predict_all(&model.embed(test)?),
        test.labels(),
    ))
}

/// Shot tags of `test`'s classes from the training set's counts.
pub fn class_tags(train: &Dataset, split: &ShotSplit) -> Result<Vec<ShotTag>> {
    split_classes(train, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub overall_acc: f64,
    pub many_acc: Option<f64>,
    pub mid_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub ncm_overall_acc: Option<f64>,
    pub config: serde_json::Value,
    pub split_thresholds: ShotSplit,
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        seed: u64,
        acc: &SplitAccuracy,
        ncm: Option<f64>,
        config: serde_json::Value,
        split: ShotSplit,
    ) -> Self {
        EvalReport {
            method: method.into(),
            seed,
            overall_acc: acc.overall,
            many_acc: acc.many,
            mid_acc: acc.mid,
            few_acc: acc.few,
            ncm_overall_acc: ncm,
            config,
            split_thresholds: split,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    /// Data row matching [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        format!(
            "{},{},{:?},{},{},{},{}",
            self.method,
            self.seed,
            self.overall_acc,
            cell(self.many_acc),
            cell(self.mid_acc),
            cell(self.few_acc),
            cell(self.ncm_overall_acc)
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every rate in `[0, 1]`, and the split rates recombine into the overall
    /// rate when weighted by `counts`.
    pub fn check_consistency(&self, counts: [usize; 3]) -> Result<()> {
        let rates = [self.many_acc, self.mid_acc, self.few_acc];
        let all = std::iter::once(Some(self.overall_acc))
            .chain(rates)
            .chain([self.ncm_overall_acc]);
        if all.flatten().any(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Validation("accuracy outside [0, 1]".into()));
        }
        let total: usize = counts.iter().sum();
        if total > 0 {
            let weighted: f64 = rates
                .iter()
                .zip(counts)
                .map(|(r, n)| r.unwrap_or(0.0) * n as f64)
                .sum::<f64>()
                / total as f64;
            if (weighted - self.overall_acc).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "split accuracies recombine to {weighted}, overall is {}",
                    self.overall_acc
                )));
            }
        }
        Ok(())
    }
}

/// Parses one data row written by [`EvalReport::csv_row`] into
/// `(method, seed, [overall, many, mid, few, ncm])`.
pub fn parse_csv_row(row: &str) -> Result<(String, u64, [Option<f64>; 5])> {
    let bad = |m: String| Error::Parse {
        line: 1,
        message: m,
    };
    let cells: Vec<&str> = row.trim_end().split(',').collect();
    if cells.len() != 7 {
        return Err(bad(format!("expected 7 cells, got {}", cells.len())));
    }
    let seed = cells[1].parse().map_err(|e| bad(format!("seed: {e}")))?;
    let mut values = [None; 5];
    for (slot, cell) in values.iter_mut().zip(&cells[2..]) {
        if !cell.is_empty() {
            *slot = Some(cell.parse().map_err(|e| bad(format!("{cell:?}: {e}")))?);
        }
    }
    Ok((cells[0].to_string(), seed, values))
}

/// Writes `report` to `path` as pretty JSON or as a header plus one row.
pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report.to_json()? + "\n",
        ReportFormat::Csv => format!("{CSV_HEADER}\n{}\n", report.csv_row()),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
