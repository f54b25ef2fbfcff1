//! Evaluation metrics: ICC(3,1) (pooled across participants or averaged
//! within them), MAE, and detection F1 / accuracy / precision / recall.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::Task;
use crate::error::{Error, Result};
use crate::losses::{MAX_INTENSITY, OCCURRENCE_THRESHOLD};
use crate::siamese::DetectionRule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub participant: String,
    pub frame: u32,
    pub au: usize,
    pub label: u8,
    pub prediction: f64,
}

/// Paired (label, prediction) rows keyed by participant, frame and AU.
#[derive(Clone, Debug, Default)]
pub struct PredictionSet {
    au_names: Vec<String>,
    rows: Vec<PredictionRow>,
    keys: HashSet<(String, u32, usize)>,
}

impl PredictionSet {
    pub fn new(au_names: Vec<String>) -> Self {
        PredictionSet {
            au_names,
            ..Default::default()
        }
    }

    pub fn au_names(&self) -> &[String] {
        &self.au_names
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: PredictionRow) -> Result<()> {
        if row.au >= self.au_names.len() {
            return Err(Error::Data(format!("AU index {} out of {}", row.au, self.au_names.len())));
        }
        if row.label > MAX_INTENSITY {
            return Err(Error::Data(format!("label {} out of range", row.label)));
        }
        if !row.prediction.is_finite() {
            return Err(Error::NonFinite { op: "prediction" });
        }
        let key = (row.participant.clone(), row.frame, row.au);
        if !self.keys.insert(key) {
            return Err(Error::Data(format!(
                "duplicate prediction for participant {} frame {} AU {}",
                row.participant, row.frame, self.au_names[row.au]
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &PredictionSet) -> Result<()> {
        if other.au_names != self.au_names {
            return Err(Error::Data("prediction sets use different AU lists".into()));
        }
        other.rows.iter().try_for_each(|r| self.push(r.clone()))
    }

    pub fn participants(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.participant.as_str()).collect()
    }

    pub fn au_rows(&self, au: usize) -> impl Iterator<Item = &PredictionRow> {
        self.rows.iter().filter(move |r| r.au == au)
    }

    fn pairs(&self, au: usize) -> Vec<(f64, f64)> {
        self.au_rows(au).map(|r| (r.label as f64, r.prediction)).collect()
    }

    /// CSV with header `participant,frame,au,label,prediction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("participant,frame,au,label,prediction\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.participant, r.frame, self.au_names[r.au], r.label, r.prediction
            );
        }
        out
    }

    /// Parses the CSV written by [`PredictionSet::to_csv`]. AU names are
    /// collected in order of first appearance.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Data(format!("{source}: empty file")))?;
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if cols != ["participant", "frame", "au", "label", "prediction"] {
            return Err(Error::Row {
                path: source.into(),
                row: 1,
                message: format!("expected header participant,frame,au,label,prediction, got `{header}`"),
            });
        }
        let mut parsed = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row_err = |message: String| Error::Row {
                path: source.into(),
                row: i + 1,
                message,
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(row_err(format!("expected 5 fields, got {}", f.len())));
            }
            let frame = f[1].parse().map_err(|_| row_err(format!("bad frame `{}`", f[1])))?;
            let label: u8 = f[3].parse().map_err(|_| row_err(format!("bad label `{}`", f[3])))?;
            let prediction: f64 = f[4].parse().map_err(|_| row_err(format!("bad prediction `{}`", f[4])))?;
            let au = match names.iter().position(|n| n == f[2]) {
                Some(a) => a,
                None => {
                    names.push(f[2].to_string());
                    names.len() - 1
                }
            };
            parsed.push((
                i + 1,
                PredictionRow {
                    participant: f[0].to_string(),
                    frame,
                    au,
                    label,
                    prediction,
                },
            ));
        }
        let mut set = PredictionSet::new(names);
        for (line, row) in parsed {
            set.push(row).map_err(|e| Error::Row {
                path: source.into(),
                row: line,
                message: e.to_string(),
            })?;
        }
        Ok(set)
    }
}

/// Shrout–Fleiss ICC(3,1) (two-way mixed, consistency, single rater) with
/// the two raters being the label and the prediction. Returns 0 when the
/// denominator vanishes.
pub fn icc31(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Data(format!("ICC needs at least 2 targets, got {n}")));
    }
    let k = 2.0;
    let nf = n as f64;
    let rater_a = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let rater_b = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let grand = (rater_a + rater_b) / 2.0;
    let mut between = 0.0;
    let mut residual = 0.0;
    for &(a, b) in pairs {
        let target = (a + b) / 2.0;
        between += (target - grand).powi(2);
        residual += (a - target - rater_a + grand).powi(2) + (b - target - rater_b + grand).powi(2);
    }
    let bms = k * between / (nf - 1.0);
    let ems = residual / ((nf - 1.0) * (k - 1.0));
    let denom = bms + (k - 1.0) * ems;
    if denom.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((bms - ems) / denom)
}

/// ICC(3,1) over every frame of every participant pooled together.
pub fn icc_across(preds: &PredictionSet, au: usize) -> Result<f64> {
    icc31(&preds.pairs(au))
}

/// Mean over participants of the per-participant ICC(3,1). Participants with
/// fewer than two frames are skipped.
pub fn icc_within(preds: &PredictionSet, au: usize) -> Result<f64> {
    let mut by_participant: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in preds.au_rows(au) {
        by_participant
            .entry(r.participant.as_str())
            .or_default()
            .push((r.label as f64, r.prediction));
    }
    let values: Vec<f64> = by_participant
        .values()
        .filter(|p| p.len() >= 2)
        .map(|p| icc31(p))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Data("no participant with at least 2 frames".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn mae(preds: &PredictionSet, au: usize) -> Result<f64> {
    let pairs = preds.pairs(au);
    if pairs.is_empty() {
        return Err(Error::Data("MAE of an empty slice".into()));
    }
    Ok(pairs.iter().map(|(l, p)| (l - p).abs()).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

impl Confusion {
    pub fn metrics(self) -> DetectionMetrics {
        let Confusion { tp, fp, fn_, tn } = self;
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            f1,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            confusion: self,
        }
    }
}

/// Ground truth is `label >= 2`; predictions are binarized with `rule`.
pub fn detection_metrics(preds: &PredictionSet, au: usize, rule: DetectionRule) -> Result<DetectionMetrics> {
    let mut c = Confusion::default();
    let mut any = false;
    for r in preds.au_rows(au) {
        any = true;
        match (r.label >= OCCURRENCE_THRESHOLD, rule.occurs(r.prediction)) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    if !any {
        return Err(Error::Data("detection metrics of an empty slice".into()));
    }
    Ok(c.metrics())
}

/// One metric across AUs plus their arithmetic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub per_au: Vec<f64>,
    pub average: f64,
}

impl MetricRow {
    fn new(metric: &str, per_au: Vec<f64>) -> Self {
        let average = per_au.iter().sum::<f64>() / per_au.len().max(1) as f64;
        MetricRow {
            metric: metric.to_string(),
            per_au,
            average,
        }
    }
}

pub const ICC_ACROSS: &str = "ICC(3,1)";
pub const ICC_WITHIN: &str = "ICC(3,1) within";
pub const MAE: &str = "MAE";
pub const F1: &str = "F1";
pub const ACCURACY: &str = "Accuracy";
pub const PRECISION: &str = "Precision";
pub const RECALL: &str = "Recall";

/// Metric rows for one prediction set.
pub fn metric_rows(preds: &PredictionSet, task: Task, rule: Option<DetectionRule>) -> Result<Vec<MetricRow>> {
    let aus = 0..preds.au_names().len();
    match task {
        Task::Intensity => Ok(vec![
            MetricRow::new(ICC_ACROSS, aus.clone().map(|a| icc_across(preds, a)).collect::<Result<_>>()?),
            MetricRow::new(ICC_WITHIN, aus.clone().map(|a| icc_within(preds, a)).collect::<Result<_>>()?),
            MetricRow::new(MAE, aus.map(|a| mae(preds, a)).collect::<Result<_>>()?),
        ]),
        Task::Detection => {
            let rule = rule.unwrap_or(DetectionRule::AtLeast(0.5));
            let per: Vec<DetectionMetrics> = aus.map(|a| detection_metrics(preds, a, rule)).collect::<Result<_>>()?;
            Ok(vec![
                MetricRow::new(F1, per.iter().map(|m| m.f1).collect()),
                MetricRow::new(ACCURACY, per.iter().map(|m| m.accuracy).collect()),
                MetricRow::new(PRECISION, per.iter().map(|m| m.precision).collect()),
                MetricRow::new(RECALL, per.iter().map(|m| m.recall).collect()),
            ])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub participants: Vec<String>,
    pub rows: usize,
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub task: Task,
    pub au_names: Vec<String>,
    /// Always `"concatenate"`: predictions of every fold pooled, then scored.
    pub pooling: String,
    pub metrics: Vec<MetricRow>,
    /// Mean over folds of the per-fold metrics.
    pub fold_mean: Vec<MetricRow>,
    pub folds: Vec<FoldMetrics>,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Pools the folds' predictions and scores them once per AU; per-fold
/// metrics are kept alongside. Folds must cover disjoint participants.
pub fn build_report(
    method: &str,
    task: Task,
    folds: &[PredictionSet],
    rule: Option<DetectionRule>,
) -> Result<MetricReport> {
    let first = folds.first().ok_or_else(|| Error::Data("no folds to report".into()))?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, f) in folds.iter().enumerate() {
        for p in f.participants() {
            if let Some(j) = seen.insert(p, i) {
                return Err(Error::Protocol(format!("participant {p} appears in folds {j} and {i}")));
            }
        }
    }
    let mut pooled = PredictionSet::new(first.au_names().to_vec());
    let mut fold_metrics = Vec::with_capacity(folds.len());
    for (i, f) in folds.iter().enumerate() {
        pooled.extend(f)?;
        fold_metrics.push(FoldMetrics {
            fold: i,
            participants: f.participants().into_iter().map(String::from).collect(),
            rows: f.len(),
            metrics: metric_rows(f, task, rule)?,
        });
    }
    let metrics = metric_rows(&pooled, task, rule)?;
    let fold_mean = metrics
        .iter()
        .enumerate()
        .map(|(m, row)| {
            let per_au = (0..row.per_au.len())
                .map(|a| fold_metrics.iter().map(|f| f.metrics[m].per_au[a]).sum::<f64>() / folds.len() as f64)
                .collect();
            MetricRow::new(&row.metric, per_au)
        })
        .collect();
    Ok(MetricReport {
        method: method.to_string(),
        task,
        au_names: first.au_names().to_vec(),
        pooling: "concatenate".into(),
        metrics,
        fold_mean,
        folds: fold_metrics,
    })
}

/// Table with one row per (metric, method): `metric,method,<AUs...>,Average`.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = String::from("metric,method");
    for name in &first.au_names {
        let _ = write!(out, ",{name}");
    }
    out.push_str(",Average\n");
    for (m, row) in first.metrics.iter().enumerate() {
        for r in reports {
            let Some(mr) = r.metrics.get(m).filter(|x| x.metric == row.metric) else {
                continue;
            };
            let _ = write!(out, "{},{}", mr.metric, r.method);
            for v in &mr.per_au {
                let _ = write!(out, ",{v:.4}");
            }
            let _ = writeln!(out, ",{:.4}", mr.average);
        }
    }
    out
}
