//! Cross-validation folds, ROC analysis and the ablation report.

use std::fmt::Write as _;

use ffrmil_core::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::mil::{Bag, MilModel, Mode};

/// Checkpoints evaluated per fold.
pub const EVAL_CHECKPOINTS: usize = 10;
pub const TARGET_SENSITIVITY: f64 = 0.70;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold of every patient, by cohort index.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn test(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Positives and negatives are shuffled separately and dealt round-robin,
/// negatives continuing where the positives stopped, so fold sizes differ
/// by at most one and every fold gets ⌊P/k⌋ or ⌈P/k⌉ positives.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(invalid(format!("folds must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(invalid(format!("{} patients cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        assignment[i] = slot % k;
    }
    Ok(FoldPlan { k, assignment })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// Thresholds in decreasing order, starting at +∞ (nothing positive).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocResult {
    /// The highest threshold whose sensitivity reaches `target`.
    pub fn operating_point(&self, target: f64) -> RocPoint {
        *self
            .points
            .iter()
            .find(|p| p.sensitivity >= target)
            .unwrap_or_else(|| self.points.last().expect("nonempty curve"))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,sensitivity,specificity\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.sensitivity, p.specificity);
        }
        s
    }
}

/// ROC over every distinct score, AUC by the trapezoidal rule. A score of
/// at least the threshold counts as positive.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(invalid("ROC needs at least one positive and one negative"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        specificity: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        let (tp0, fp0) = (tp, fp);
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / p as f64,
            specificity: 1.0 - fp as f64 / n as f64,
        });
    }
    Ok(RocResult {
        points,
        auc: auc / (p * n) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub name: &'static str,
    pub positives: usize,
    pub negatives: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub const RANGE_NAMES: [&str; 3] = ["FFR <= 0.7", "0.7 < FFR < 0.9", "FFR >= 0.9"];

fn range_of(ffr: f64) -> usize {
    if ffr <= 0.7 {
        0
    } else if ffr < 0.9 {
        1
    } else {
        2
    }
}

/// Sensitivity and specificity at `threshold` within three FFR ranges.
/// Cells without any patient of the relevant class are `None`.
pub fn range_breakdown(scores: &[f64], labels: &[bool], ffr: &[f64], threshold: f64) -> Result<[RangeRow; 3]> {
    if scores.len() != labels.len() || ffr.len() != labels.len() {
        return Err(invalid("scores, labels and FFR values differ in length"));
    }
    let mut tp = [0usize; 3];
    let mut pos = [0usize; 3];
    let mut tn = [0usize; 3];
    let mut neg = [0usize; 3];
    for ((&s, &l), &f) in scores.iter().zip(labels).zip(ffr) {
        let r = range_of(f);
        let predicted = s >= threshold;
        if l {
            pos[r] += 1;
            tp[r] += predicted as usize;
        } else {
            neg[r] += 1;
            tn[r] += !predicted as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(std::array::from_fn(|r| RangeRow {
        name: RANGE_NAMES[r],
        positives: pos[r],
        negatives: neg[r],
        sensitivity: ratio(tp[r], pos[r]),
        specificity: ratio(tn[r], neg[r]),
    }))
}

/// Metrics of one checkpoint on one test fold.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetrics {
    pub auc: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub scores: Vec<f64>,
    pub ranges: [RangeRow; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEval {
    pub models: Vec<ModelMetrics>,
    pub auc_mean: f64,
    pub auc_sd: f64,
    /// ROC of the checkpoint-averaged probabilities.
    pub mean_roc: RocResult,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Evaluates the last [`EVAL_CHECKPOINTS`] checkpoints on the test bags.
pub fn evaluate_fold<T: Scalar>(checkpoints: &[MilModel<T>], test: &[Bag], ffr: &[f64], mode: Mode) -> Result<FoldEval> {
    evaluate_last(checkpoints, EVAL_CHECKPOINTS, test, ffr, mode)
}

pub fn evaluate_last<T: Scalar>(
    checkpoints: &[MilModel<T>],
    count: usize,
    test: &[Bag],
    ffr: &[f64],
    mode: Mode,
) -> Result<FoldEval> {
    if checkpoints.len() < count {
        return Err(invalid(format!(
            "{} checkpoints available, {count} required",
            checkpoints.len()
        )));
    }
    if let Some(m) = checkpoints.iter().find(|m| m.mode != mode) {
        return Err(invalid(format!("checkpoint trained for mode {}, evaluating {mode}", m.mode)));
    }
    let labels: Vec<bool> = test.iter().map(|b| b.label).collect();
    let mut models = Vec::with_capacity(count);
    let mut avg = vec![0.0; test.len()];
    for m in &checkpoints[checkpoints.len() - count..] {
        let scores = test.iter().map(|b| m.predict(b)).collect::<Result<Vec<_>>>()?;
        for (a, s) in avg.iter_mut().zip(&scores) {
            *a += s / count as f64;
        }
        let roc = roc_auc(&scores, &labels)?;
        let op = roc.operating_point(TARGET_SENSITIVITY);
        let ranges = range_breakdown(&scores, &labels, ffr, op.threshold)?;
        models.push(ModelMetrics {
            auc: roc.auc,
            threshold: op.threshold,
            sensitivity: op.sensitivity,
            specificity: op.specificity,
            scores,
            ranges,
        });
    }
    let aucs: Vec<f64> = models.iter().map(|m| m.auc).collect();
    Ok(FoldEval {
        auc_mean: mean(&aucs),
        auc_sd: sd(&aucs),
        mean_roc: roc_auc(&avg, &labels)?,
        models,
    })
}

/// Cross-validated summary of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub mode: Mode,
    /// Fold-averaged AUC of checkpoint slot `j`, for each slot.
    pub slot_auc: Vec<f64>,
    pub auc_mean: f64,
    /// SD across checkpoint slots of the fold-averaged AUC.
    pub auc_sd_checkpoints: f64,
    /// SD across folds of the checkpoint-averaged AUC.
    pub auc_sd_folds: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Per range: mean sensitivity and specificity over the cells that are
    /// defined, `None` when never defined.
    pub ranges: [(Option<f64>, Option<f64>); 3],
}

pub fn summarize(mode: Mode, folds: &[FoldEval]) -> Result<CvSummary> {
    let slots = folds.first().map(|f| f.models.len()).ok_or_else(|| invalid("no folds"))?;
    if folds.iter().any(|f| f.models.len() != slots) {
        return Err(invalid("folds evaluated different checkpoint counts"));
    }
    let slot = |f: &dyn Fn(&ModelMetrics) -> f64| -> Vec<f64> {
        (0..slots)
            .map(|j| mean(&folds.iter().map(|fe| f(&fe.models[j])).collect::<Vec<_>>()))
            .collect()
    };
    let slot_auc = slot(&|m| m.auc);
    let sens = slot(&|m| m.sensitivity);
    let spec = slot(&|m| m.specificity);
    let fold_auc: Vec<f64> = folds.iter().map(|f| f.auc_mean).collect();
    let ranges = std::array::from_fn(|r| {
        let collect = |f: &dyn Fn(&RangeRow) -> Option<f64>| {
            let v: Vec<f64> = folds
                .iter()
                .flat_map(|fe| fe.models.iter().filter_map(|m| f(&m.ranges[r])))
                .collect();
            (!v.is_empty()).then(|| mean(&v))
        };
        (collect(&|row| row.sensitivity), collect(&|row| row.specificity))
    });
    Ok(CvSummary {
        mode,
        auc_mean: mean(&slot_auc),
        auc_sd_checkpoints: sd(&slot_auc),
        auc_sd_folds: sd(&fold_auc),
        sensitivity: mean(&sens),
        specificity: mean(&spec),
        slot_auc,
        ranges,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text comparison table plus the per-range breakdown of each mode.
pub fn format_report(rows: &[CvSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>16} {:>12} {:>12} {:>12}",
        "Method", "AUC", "AUC sd(fold)", "Sensitivity", "Specificity"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>16} {:>12.3} {:>12.2} {:>12.2}",
            r.mode.label(),
            format!("{:.3} ± {:.3}", r.auc_mean, r.auc_sd_checkpoints),
            r.auc_sd_folds,
            r.sensitivity,
            r.specificity
        );
    }
    for r in rows {
        let _ = writeln!(s, "\n{} by FFR range", r.mode.label());
        let _ = writeln!(s, "{:<18} {:>12} {:>12}", "Range", "Sensitivity", "Specificity");
        for (name, (se, sp)) in RANGE_NAMES.iter().zip(&r.ranges) {
            let _ = writeln!(s, "{:<18} {:>12} {:>12}", name, cell(*se), cell(*sp));
        }
    }
    s
}
