//! Overlap, classification and cascade-aggregate metrics, and the report.

use crate::cascade::{PathologyClass, Stage};
use crate::dataset::Phase;
use crate::mask::{BinaryMask, Structure};
use crate::segment::PipelineMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("mask dims {0:?} and {1:?} differ")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("ROC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("label `{0}` is not in the matrix")]
    UnknownLabel(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.grid().data().iter().zip(b.grid().data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    Ok(ratio(inter, sa + sb))
}

fn ratio(inter: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice pooled over all slices of a volume.
pub fn dice_volume(pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<f64> {
    let (mut inter, mut total) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(truth) {
        if a.dims() != b.dims() {
            return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
        }
        for (&x, &y) in a.grid().data().iter().zip(b.grid().data()) {
            inter += (x != 0.0 && y != 0.0) as usize;
            total += (x != 0.0) as usize + (y != 0.0) as usize;
        }
    }
    Ok(ratio(inter, total))
}

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Binary matrix for one cascade stage, negative group first.
    pub fn for_stage(stage: Stage) -> Self {
        Self::new(stage.labels())
    }

    pub fn for_classes() -> Self {
        Self::new(PathologyClass::ALL.iter().map(|c| c.name()))
    }

    pub fn add_index(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn add(&mut self, truth: &str, predicted: &str) -> Result<()> {
        let idx = |l: &str| {
            self.labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| MetricsError::UnknownLabel(l.to_string()))
        };
        let (t, p) = (idx(truth)?, idx(predicted)?);
        self.add_index(t, p);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Per-class figures; `None` marks a zero denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
}

fn frac(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let n = cm.labels.len();
    let diag: u64 = (0..n).map(|i| cm.counts[i][i]).sum();
    let per_class = (0..n)
        .map(|i| {
            let tp = cm.counts[i][i];
            let predicted: u64 = (0..n).map(|r| cm.counts[r][i]).sum();
            let actual: u64 = cm.counts[i].iter().sum();
            let precision = frac(tp, predicted);
            let recall = frac(tp, actual);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics {
                label: cm.labels[i].clone(),
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    Ok(ClassificationMetrics {
        per_class,
        accuracy: diag as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over distinct scores, highest first. Tied scores move
/// the curve in one diagonal step.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    let positives = scores.iter().filter(|(_, t)| *t).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (prev_fpr, prev_tpr) = (fp as f64 / n, tp as f64 / p);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (fpr, tpr) = (fp as f64 / n, tp as f64 / p);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
    }
    Ok(RocCurve { points, auc })
}

/// Class accuracies derived from the four stage accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateAccuracy {
    /// Keyed `c1`..`c4`.
    pub per_classifier: BTreeMap<String, f64>,
    pub per_class: BTreeMap<PathologyClass, f64>,
    pub overall: f64,
}

/// A class's accuracy is the mean accuracy of the classifiers on its path.
pub fn aggregate_accuracy(a1: f64, a2: f64, a3: f64, a4: f64) -> AggregateAccuracy {
    use PathologyClass::*;
    let nor_arv = (a1 + a2) / 2.0;
    let hcm = (a1 + a3) / 2.0;
    let minf_dcm = (a1 + a3 + a4) / 3.0;
    let per_class: BTreeMap<PathologyClass, f64> = [
        (Nor, nor_arv),
        (Arv, nor_arv),
        (Hcm, hcm),
        (Minf, minf_dcm),
        (Dcm, minf_dcm),
    ]
    .into_iter()
    .collect();
    let overall = (nor_arv + nor_arv + hcm + minf_dcm + minf_dcm) / 5.0;
    let per_classifier = [a1, a2, a3, a4]
        .iter()
        .enumerate()
        .map(|(i, &a)| (format!("c{}", i + 1), a))
        .collect();
    AggregateAccuracy {
        per_classifier,
        per_class,
        overall,
    }
}

/// Overall accuracy published for the reference system.
pub const PUBLISHED_OVERALL_ACCURACY: f64 = 0.972;

/// Differences beyond this are flagged.
pub const PUBLISHED_TOLERANCE: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedComparison {
    pub published: f64,
    pub recomputed: f64,
    pub delta: f64,
    pub flagged: bool,
}

pub fn compare_published(recomputed: f64) -> PublishedComparison {
    let delta = recomputed - PUBLISHED_OVERALL_ACCURACY;
    PublishedComparison {
        published: PUBLISHED_OVERALL_ACCURACY,
        recomputed,
        delta,
        flagged: delta.abs() > PUBLISHED_TOLERANCE,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One evaluated classifier stage, pooled over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub labels: [String; 2],
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
    /// `None` when the evaluated cases hold a single class.
    pub roc: Option<RocCurve>,
    pub accuracy_mean: f64,
    pub accuracy_stdev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: PipelineMode,
    pub dice: BTreeMap<Structure, f64>,
    pub mean: f64,
    pub stdev: f64,
    pub per_repetition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub message: String,
}

/// Evaluation output. Maps are ordered so serialization is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Mean over repetitions of the mean per-case volume Dice.
    pub dice: BTreeMap<Phase, BTreeMap<Structure, f64>>,
    pub dice_stdev: BTreeMap<Phase, BTreeMap<Structure, f64>>,
    /// `c1`..`c4` binary matrices and the five-class `cascade` matrix.
    pub confusion: BTreeMap<String, ConfusionMatrix>,
    pub classification: BTreeMap<String, ClassificationMetrics>,
    pub roc: BTreeMap<String, Option<RocCurve>>,
    /// `None` when some stage had no evaluable case in its domain.
    pub aggregate: Option<AggregateAccuracy>,
    pub aggregate_stdev: f64,
    /// Accuracy of the end-to-end five-class prediction.
    pub cascade_accuracy: Option<f64>,
    pub published: Option<PublishedComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    pub errors: Vec<CaseFailure>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Same tables as the JSON, one row per value:
    /// `table,key,subkey,value`.
    pub fn to_csv(&self) -> std::result::Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "key", "subkey", "value"])?;
        for (phase, m) in &self.dice {
            for (s, v) in m {
                let sd = self.dice_stdev[phase][s];
                w.write_record(["dice", phase.name(), s.name(), &format!("{v:.6}")])?;
                w.write_record(["dice_stdev", phase.name(), s.name(), &format!("{sd:.6}")])?;
            }
        }
        for (name, cm) in &self.confusion {
            for (i, row) in cm.counts.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    let cell = format!("{}->{}", cm.labels[i], cm.labels[j]);
                    w.write_record(["confusion", name, &cell, &c.to_string()])?;
                }
            }
        }
        for (name, m) in &self.classification {
            w.write_record(["accuracy", name, "", &format!("{:.6}", m.accuracy)])?;
            for c in &m.per_class {
                w.write_record(["precision", name, &c.label, &opt(c.precision)])?;
                w.write_record(["recall", name, &c.label, &opt(c.recall)])?;
                w.write_record(["f1", name, &c.label, &opt(c.f1)])?;
            }
        }
        for (name, roc) in &self.roc {
            w.write_record(["auc", name, "", &opt(roc.as_ref().map(|r| r.auc))])?;
        }
        w.write_record(["cascade_accuracy", "", "", &opt(self.cascade_accuracy)])?;
        if let Some(agg) = &self.aggregate {
            for (k, v) in &agg.per_classifier {
                w.write_record(["aggregate", "per_classifier", k, &format!("{v:.6}")])?;
            }
            for (k, v) in &agg.per_class {
                w.write_record(["aggregate", "per_class", k.name(), &format!("{v:.6}")])?;
            }
            w.write_record(["aggregate", "overall", "", &format!("{:.6}", agg.overall)])?;
            w.write_record(["aggregate", "overall_stdev", "", &format!("{:.6}", self.aggregate_stdev)])?;
        }
        if let Some(p) = &self.published {
            w.write_record(["aggregate", "published", "", &format!("{:.6}", p.published)])?;
            w.write_record(["aggregate", "published_delta", "", &format!("{:.6}", p.delta)])?;
            w.write_record(["aggregate", "published_flagged", "", &p.flagged.to_string()])?;
        }
        if let Some(rows) = &self.ablation {
            for r in rows {
                for (s, v) in &r.dice {
                    w.write_record(["ablation", r.mode.label(), s.name(), &format!("{v:.6}")])?;
                }
                w.write_record(["ablation", r.mode.label(), "mean", &format!("{:.6}", r.mean)])?;
                w.write_record(["ablation", r.mode.label(), "stdev", &format!("{:.6}", r.stdev)])?;
            }
        }
        for e in &self.errors {
            w.write_record(["error", &e.case_id, "", &e.message])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
