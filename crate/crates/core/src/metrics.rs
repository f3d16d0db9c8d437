//! Classification and detection metrics and the evaluation report.
//!
//! Average precision is the area under the precision envelope (all-point
//! interpolation). Scores are ranked in descending order with ties kept in
//! input order, so every metric depends on scores only through their ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::params::ParamCount;

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(HctError::Usage("metric over an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(HctError::Usage(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

/// `correct / total`
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `m[label][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs(preds, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(HctError::Data(format!("class index {} out of range for {classes}", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let classes = preds.iter().chain(labels).max().unwrap() + 1;
    let m = confusion_matrix(preds, labels, classes)?;
    let rates: Vec<f64> = m
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Micro-averaged multi-label recall `TP / (TP + FN)` at `threshold`.
pub fn multilabel_recall(probs: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(HctError::Usage(format!("recall over {} scores and {} labels", probs.len(), labels.len())));
    }
    let (mut tp, mut pos) = (0usize, 0usize);
    for (p, l) in probs.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(HctError::Usage("score and label widths differ".into()));
        }
        for (&s, &on) in p.iter().zip(l) {
            if on {
                pos += 1;
                tp += (s >= threshold) as usize;
            }
        }
    }
    if pos == 0 {
        return Err(HctError::Usage("recall needs at least one positive label".into()));
    }
    Ok(tp as f64 / pos as f64)
}

/// Indices sorted by descending score, ties in index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the precision envelope for a ranked list of hit flags, with
/// `total_positives` in the denominator of recall.
fn envelope_ap(hits: &[bool], total_positives: usize) -> f64 {
    if total_positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| p).sum::<f64>() / total_positives as f64
}

/// AP of one class; `None` when there is no positive.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "scores and positives must align");
    let npos = positives.iter().filter(|&&p| p).count();
    if npos == 0 {
        return None;
    }
    let hits: Vec<bool> = ranking(scores).into_iter().map(|i| positives[i]).collect();
    Some(envelope_ap(&hits, npos))
}

/// Mean AP with the per-class values behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

impl MeanAp {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self { map, per_class }
    }
}

/// Per-class AP over `[N][K]` scores and multi-hot labels; classes without
/// positives are left out of the mean.
pub fn map_classification(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MeanAp> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(HctError::Usage(format!("mAP over {} scores and {} labels", scores.len(), labels.len())));
    }
    let k = scores[0].len();
    if scores.iter().any(|s| s.len() != k) || labels.iter().any(|l| l.len() != k) {
        return Err(HctError::Usage("ragged score or label rows".into()));
    }
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(HctError::Numerical("non-finite score".into()));
    }
    let per_class = (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let p: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            average_precision(&s, &p)
        })
        .collect();
    Ok(MeanAp::from_per_class(per_class))
}

/// One-hot rows for single-label targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<Vec<bool>> {
    labels.iter().map(|&y| (0..classes).map(|c| c == y).collect()).collect()
}

/// Box `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
pub type BBox = [f64; 4];

fn check_box(b: &BBox) -> Result<()> {
    if !(b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]) {
        return Err(HctError::Data(format!("malformed box {b:?}")));
    }
    Ok(())
}

/// `|A ∩ B| / |A ∪ B|`
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r[2] - r[0]) * (r[3] - r[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Clip the detection belongs to.
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
}

/// Per class: detections in descending score order are greedily matched to
/// the unmatched ground truth of the same clip with the highest IoU, if at
/// least `threshold`. Classes without ground truth are left out of the mean.
pub fn map_detection(dets: &[Detection], gts: &[GroundTruth], classes: usize, threshold: f64) -> Result<MeanAp> {
    for d in dets {
        check_box(&d.bbox)?;
        if !d.score.is_finite() {
            return Err(HctError::Numerical("non-finite detection score".into()));
        }
    }
    for g in gts {
        check_box(&g.bbox)?;
    }
    if let Some(c) = dets.iter().map(|d| d.class).chain(gts.iter().map(|g| g.class)).find(|&c| c >= classes) {
        return Err(HctError::Data(format!("detection class {c} out of range for {classes}")));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        if cg.is_empty() {
            per_class.push(None);
            continue;
        }
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        let scores: Vec<f64> = cd.iter().map(|d| d.score).collect();
        let mut used = vec![false; cg.len()];
        let mut hits = Vec::with_capacity(cd.len());
        for i in ranking(&scores) {
            let d = cd[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in cg.iter().enumerate() {
                if used[j] || g.image != d.image {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox)?;
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            hits.push(best.is_some());
        }
        per_class.push(Some(envelope_ap(&hits, cg.len())));
    }
    Ok(MeanAp::from_per_class(per_class))
}

/// Metrics of one task; absent entries do not apply to the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub map: Option<f64>,
    pub acc: Option<f64>,
    pub b_acc: Option<f64>,
    pub recall: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
}

impl TaskMetrics {
    /// mAP, Acc and B-Acc of a single-label task from `[N][K]` scores.
    pub fn single_label(scores: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let k = scores.first().map_or(0, Vec::len);
        let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let ap = map_classification(scores, &one_hot(labels, k))?;
        Ok(Self {
            map: ap.map,
            acc: Some(accuracy(&preds, labels)?),
            b_acc: Some(balanced_accuracy(&preds, labels)?),
            recall: None,
            per_class_ap: ap.per_class,
        })
    }

    /// mAP and micro recall of a multi-label task from probabilities.
    pub fn multi_label(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Self> {
        let ap = map_classification(probs, labels)?;
        Ok(Self {
            map: ap.map,
            acc: None,
            b_acc: None,
            recall: multilabel_recall(probs, labels, 0.5).ok(),
            per_class_ap: ap.per_class,
        })
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: usize,
    pub phase: TaskMetrics,
    pub step: TaskMetrics,
    pub action: TaskMetrics,
    /// Per-box instrument classification of the kept boxes.
    pub instrument: TaskMetrics,
    /// Instrument detection mAP at IoU 0.5.
    pub detection_map: Option<f64>,
    pub params: Option<ParamCount>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `phase mAP/Acc | step mAP/Acc | instrument mAP@0.5IoU | action mAP`,
    /// followed by balanced accuracy, recall and parameter lines.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = String::new();
        let w = method.chars().count().max(6);
        let _ = writeln!(
            s,
            "{:<w$}  {:>8} {:>8}  {:>8} {:>8}  {:>10}  {:>8}",
            "", "Phase", "", "Step", "", "Instrument", "Action"
        );
        let _ = writeln!(
            s,
            "{:<w$}  {:>8} {:>8}  {:>8} {:>8}  {:>10}  {:>8}",
            "Method", "mAP", "Acc", "mAP", "Acc", "mAP", "mAP"
        );
        let _ = writeln!(
            s,
            "{:<w$}  {:>8} {:>8}  {:>8} {:>8}  {:>10}  {:>8}",
            method,
            cell(self.phase.map),
            cell(self.phase.acc),
            cell(self.step.map),
            cell(self.step.acc),
            cell(self.detection_map),
            cell(self.action.map)
        );
        let _ = writeln!(
            s,
            "B-Acc: phase {}  step {}   Recall: action {}   Box Acc: instrument {}",
            cell(self.phase.b_acc),
            cell(self.step.b_acc),
            cell(self.action.recall),
            cell(self.instrument.acc)
        );
        if let Some(p) = self.params {
            let _ = writeln!(s, "Params: {} total, {} tunable ({:.1}%)", p.total, p.tunable, 100.0 * p.fraction);
        }
        s
    }
}
