//! Ranking and thresholded metrics over multi-label confidence matrices,
//! plus per-task evaluation reports.
//!
//! Matrices are laid out samples x classes. "Old classes" always means the
//! leading `old_count` columns, matching the model's slot order (classes in
//! learning order).

use crate::data::{LabeledImage, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses::{max_entropy, EntropyForm};
use crate::model::CscModel;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 20;

/// Denominator used for the false-positive rate over old classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprDefinition {
    /// FP / (FP + TP): the fraction of predicted positives that are wrong,
    /// i.e. 1 - precision pooled over the scope. The default.
    PredictedPositives,
    /// FP / (FP + TN): the classical per-negative rate.
    AllNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub threshold: f64,
    pub fpr_definition: FprDefinition,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            threshold: DEFAULT_THRESHOLD,
            fpr_definition: FprDefinition::PredictedPositives,
        }
    }
}

fn check_same_shape(a: (usize, usize), b: (usize, usize), context: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Average precision of one class: precision evaluated at every positive,
/// averaged over the positives. Ranking is by descending score with ties
/// broken by ascending sample index; no interpolation. Returns `None` when
/// the class has no positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Result<Option<f64>> {
    if scores.len() != targets.len() {
        return Err(Error::shape(
            "average_precision",
            format!("{} targets", scores.len()),
            format!("{}", targets.len()),
        ));
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResult {
    /// Mean over classes that have at least one positive.
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes skipped for lack of positives.
    pub excluded: Vec<usize>,
}

/// mAP over class columns; classes without positives are excluded from the
/// mean and reported.
pub fn mean_average_precision(scores: &Array2<f64>, targets: &Array2<bool>) -> Result<MapResult> {
    check_same_shape(scores.dim(), targets.dim(), "mean_average_precision")?;
    let k = scores.ncols();
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let s: Vec<f64> = scores.column(c).to_vec();
        let t: Vec<bool> = targets.column(c).to_vec();
        let ap = average_precision(&s, &t)?;
        match ap {
            Some(v) => {
                sum += v;
                counted += 1;
            }
            None => excluded.push(c),
        }
        per_class.push(ap);
    }
    Ok(MapResult {
        map: if counted == 0 { 0.0 } else { sum / counted as f64 },
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    /// Macro F1: mean of per-class F1 with 0/0 treated as 0.
    pub cf1: f64,
    /// Micro F1 over pooled counts.
    pub of1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub overall_precision: f64,
    pub overall_recall: f64,
    /// CR - CP; positive values mean recall outruns precision.
    pub cr_minus_cp: f64,
    /// OR - OP.
    pub or_minus_op: f64,
}

fn safe_div(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    safe_div(2.0 * p * r, p + r)
}

/// Per-class (macro) and pooled (micro) precision/recall/F1 on binary
/// prediction matrices.
pub fn f1_scores(predictions: &Array2<bool>, targets: &Array2<bool>) -> Result<F1Summary> {
    check_same_shape(predictions.dim(), targets.dim(), "f1_scores")?;
    let k = predictions.ncols();
    if k == 0 {
        return Err(Error::shape("f1_scores", "at least 1 class", "0"));
    }
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for (p, t) in predictions.column(c).iter().zip(targets.column(c)) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        let prec = safe_div(tp as f64, (tp + fp) as f64);
        let rec = safe_div(tp as f64, (tp + fne) as f64);
        p_sum += prec;
        r_sum += rec;
        f_sum += f1_of(prec, rec);
        tp_all += tp;
        fp_all += fp;
        fn_all += fne;
    }
    let kf = k as f64;
    let op = safe_div(tp_all as f64, (tp_all + fp_all) as f64);
    let or = safe_div(tp_all as f64, (tp_all + fn_all) as f64);
    Ok(F1Summary {
        cf1: f_sum / kf,
        of1: f1_of(op, or),
        macro_precision: p_sum / kf,
        macro_recall: r_sum / kf,
        overall_precision: op,
        overall_recall: or,
        cr_minus_cp: (r_sum - p_sum) / kf,
        or_minus_op: or - op,
    })
}

/// Pooled false-positive rate over the class columns in `scope`.
/// With no predicted positives (default definition) or no negatives
/// (all-negatives definition) in scope the rate is 0.
pub fn false_positive_rate(
    predictions: &Array2<bool>,
    targets: &Array2<bool>,
    scope: Range<usize>,
    definition: FprDefinition,
) -> Result<f64> {
    check_same_shape(predictions.dim(), targets.dim(), "false_positive_rate")?;
    if scope.end > predictions.ncols() {
        return Err(Error::shape(
            "false_positive_rate scope",
            format!("within 0..{}", predictions.ncols()),
            format!("{scope:?}"),
        ));
    }
    let (mut tp, mut fp, mut tn) = (0u64, 0u64, 0u64);
    for c in scope {
        for (p, t) in predictions.column(c).iter().zip(targets.column(c)) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
    }
    Ok(match definition {
        FprDefinition::PredictedPositives => safe_div(fp as f64, (fp + tp) as f64),
        FprDefinition::AllNegatives => safe_div(fp as f64, (fp + tn) as f64),
    })
}

/// Confidences at or above the threshold count as predicted positives.
pub fn threshold_predictions(confidences: &Array2<f64>, threshold: f64) -> Array2<bool> {
    confidences.mapv(|v| v >= threshold)
}

/// Histogram of predicted-positive confidences inside a class scope, split
/// into true positives and false positives. Bins partition [0, 1] evenly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bins: usize,
    pub tp_counts: Vec<u64>,
    pub fp_counts: Vec<u64>,
}

impl ConfidenceHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = 1.0 / self.bins as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    pub fn total_predicted_positives(&self) -> u64 {
        self.tp_counts.iter().sum::<u64>() + self.fp_counts.iter().sum::<u64>()
    }

    /// CSV with columns bin_left, bin_right, tp_count, fp_count.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("bin_left,bin_right,tp_count,fp_count\n");
        for b in 0..self.bins {
            let (lo, hi) = self.bin_edges(b);
            out.push_str(&format!(
                "{lo:.3},{hi:.3},{},{}\n",
                self.tp_counts[b], self.fp_counts[b]
            ));
        }
        out
    }
}

pub fn confidence_histogram(
    confidences: &Array2<f64>,
    targets: &Array2<bool>,
    scope: Range<usize>,
    threshold: f64,
) -> Result<ConfidenceHistogram> {
    check_same_shape(confidences.dim(), targets.dim(), "confidence_histogram")?;
    let mut hist = ConfidenceHistogram {
        bins: HISTOGRAM_BINS,
        tp_counts: vec![0; HISTOGRAM_BINS],
        fp_counts: vec![0; HISTOGRAM_BINS],
    };
    for c in scope {
        for (conf, t) in confidences.column(c).iter().zip(targets.column(c)) {
            if *conf < threshold {
                continue;
            }
            let bin = ((conf * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            if *t {
                hist.tp_counts[bin] += 1;
            } else {
                hist.fp_counts[bin] += 1;
            }
        }
    }
    Ok(hist)
}

/// Metrics of one task evaluation. `mean_entropy` is the literal entropy of
/// old-class confidences averaged over samples (0 at the first task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub fpr: f64,
    pub cr_minus_cp: f64,
    pub or_minus_op: f64,
    pub mean_entropy: f64,
    pub classes_without_positives: Vec<usize>,
    pub notes: Vec<String>,
}

/// Computes a full task evaluation from a confidence matrix. The leading
/// `old_count` columns are the previous tasks' classes.
pub fn evaluate_predictions(
    confidences: &Array2<f64>,
    targets: &Array2<bool>,
    task_id: usize,
    old_count: usize,
    opts: &MetricOptions,
) -> Result<(TaskEval, ConfidenceHistogram)> {
    check_same_shape(confidences.dim(), targets.dim(), "evaluate_predictions")?;
    if old_count > confidences.ncols() {
        return Err(Error::shape(
            "evaluate_predictions old_count",
            format!("at most {}", confidences.ncols()),
            format!("{old_count}"),
        ));
    }
    let map_result = mean_average_precision(confidences, targets)?;
    let predictions = threshold_predictions(confidences, opts.threshold);
    let f1 = f1_scores(&predictions, targets)?;
    let fpr = false_positive_rate(&predictions, targets, 0..old_count, opts.fpr_definition)?;
    let hist = confidence_histogram(confidences, targets, 0..old_count, opts.threshold)?;

    let mut entropy_sum = 0.0;
    for row in confidences.rows() {
        let row_vec: Vec<f64> = row.to_vec();
        entropy_sum += max_entropy(&row_vec, old_count, EntropyForm::Literal, 1e-7)?;
    }
    let mean_entropy = safe_div(entropy_sum, confidences.nrows() as f64);

    let mut notes = Vec::new();
    if !map_result.excluded.is_empty() {
        notes.push(format!(
            "{} classes had no test positives and were excluded from mAP",
            map_result.excluded.len()
        ));
    }
    if old_count > 0 && hist.total_predicted_positives() == 0 {
        notes.push("no predicted positives among old classes; FPR reported as 0".into());
    }
    if old_count == 0 {
        notes.push("no old classes yet; FPR and mean_entropy are trivially 0".into());
    }

    Ok((
        TaskEval {
            task_id,
            map: map_result.map,
            cf1: f1.cf1,
            of1: f1.of1,
            fpr,
            cr_minus_cp: f1.cr_minus_cp,
            or_minus_op: f1.or_minus_op,
            mean_entropy,
            classes_without_positives: map_result.excluded,
            notes,
        },
        hist,
    ))
}

/// Runs the model over the whole test split and evaluates it on the classes
/// seen through task `t`. Targets map full labels through the schedule's
/// learning order.
pub fn evaluate_task(
    model: &CscModel,
    test_split: &[LabeledImage],
    schedule: &TaskSchedule,
    t: usize,
    opts: &MetricOptions,
) -> Result<(TaskEval, ConfidenceHistogram)> {
    let known = schedule.cumulative_count(t)?;
    if model.known_classes() != known {
        return Err(Error::config(format!(
            "model covers {} classes but task {t} expects {known}",
            model.known_classes()
        )));
    }
    if test_split.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let rows: Vec<Vec<f64>> = test_split
        .par_iter()
        .map(|s| model.predict(&s.image).map(|v| v.to_vec()))
        .collect::<Result<_>>()?;
    let n = test_split.len();
    let mut confidences = Array2::zeros((n, known));
    let mut targets = Array2::from_elem((n, known), false);
    for (i, (sample, row)) in test_split.iter().zip(rows).enumerate() {
        for slot in 0..known {
            confidences[(i, slot)] = row[slot];
            targets[(i, slot)] = sample.labels[schedule.class_of_slot(slot)];
        }
    }
    let old_count = if t > 1 {
        schedule.cumulative_count(t - 1)?
    } else {
        0
    };
    evaluate_predictions(&confidences, &targets, t, old_count, opts)
}

/// Aggregate over the tasks of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
    /// Arithmetic mean of the per-task mAPs.
    pub average_map: f64,
    /// mAP after the final task.
    pub last_map: f64,
    /// Old-class confidence histogram of the final task.
    pub histogram: ConfidenceHistogram,
}

impl EvalReport {
    pub fn from_tasks(per_task: Vec<TaskEval>, histogram: ConfidenceHistogram) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::config("cannot build a report from zero tasks"));
        }
        let average_map = per_task.iter().map(|t| t.map).sum::<f64>() / per_task.len() as f64;
        let last_map = per_task.last().unwrap().map;
        Ok(EvalReport {
            per_task,
            average_map,
            last_map,
            histogram,
        })
    }
}
