use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::{average_precision, match_detections, GroundTruth, ScoredDetection};
use crate::dataset::ClassMap;
use crate::par::{self, Exec};

/// Truths and predictions of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub truths: Vec<GroundTruth>,
    pub preds: Vec<ScoredDetection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub class_id: u32,
    pub ap: f64,
    pub truths: usize,
    pub preds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassSummary>,
    /// Arithmetic mean of the per-class APs.
    pub map: f64,
    /// Precision, recall and counts at the confidence threshold that
    /// maximizes F1 over all classes (lower threshold on ties).
    pub precision: f64,
    pub recall: f64,
    /// Mean IOU of the true positives at that operating point.
    pub mean_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when there are no predictions.
    pub conf_threshold: Option<f64>,
}

struct Ranked {
    class_id: u32,
    confidence: f64,
    iou: Option<f64>,
}

/// [`evaluate_with`] using the default execution mode.
pub fn evaluate(scenes: &[Scene], iou_threshold: f64) -> EvalReport {
    evaluate_with(Exec::default(), scenes, iou_threshold)
}

/// Per-image matching (parallel over scenes), then per-class AP and the
/// best-F1 operating point.
pub fn evaluate_with(exec: Exec, scenes: &[Scene], iou_threshold: f64) -> EvalReport {
    let matches = par::map(exec, scenes, |s| match_detections(&s.preds, &s.truths, iou_threshold));

    // Global ranking: confidence descending, then scene and prediction order.
    let mut ranked = Vec::new();
    for (scene, m) in scenes.iter().zip(&matches) {
        for (p, o) in scene.preds.iter().zip(&m.outcomes) {
            ranked.push(Ranked {
                class_id: p.class_id,
                confidence: p.confidence,
                iou: o.truth.map(|_| o.iou),
            });
        }
    }
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut truth_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for t in scenes.iter().flat_map(|s| &s.truths) {
        *truth_counts.entry(t.class_id).or_default() += 1;
    }
    let classes: BTreeSet<u32> = truth_counts
        .keys()
        .copied()
        .chain(ranked.iter().map(|r| r.class_id))
        .collect();

    let per_class: Vec<ClassSummary> = classes
        .iter()
        .map(|&c| {
            let flags: Vec<bool> = ranked
                .iter()
                .filter(|r| r.class_id == c)
                .map(|r| r.iou.is_some())
                .collect();
            let truths = truth_counts.get(&c).copied().unwrap_or(0);
            ClassSummary {
                class_id: c,
                ap: average_precision(&flags, truths),
                truths,
                preds: flags.len(),
            }
        })
        .collect();
    let map = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };

    let total_truths: usize = truth_counts.values().sum();
    let mut report = EvalReport {
        iou_threshold,
        per_class,
        map,
        precision: if total_truths == 0 { 1.0 } else { 0.0 },
        recall: if total_truths == 0 { 1.0 } else { 0.0 },
        mean_iou: 0.0,
        tp: 0,
        fp: 0,
        fn_: total_truths,
        conf_threshold: None,
    };

    let mut best_f1 = f64::NEG_INFINITY;
    let (mut tp, mut fp, mut iou_sum) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < ranked.len() {
        let conf = ranked[i].confidence;
        while i < ranked.len() && ranked[i].confidence == conf {
            match ranked[i].iou {
                Some(v) => {
                    tp += 1;
                    iou_sum += v;
                }
                None => fp += 1,
            }
            i += 1;
        }
        let (p, r, f1) = prf(tp, fp, total_truths);
        if f1 >= best_f1 {
            best_f1 = f1;
            report.precision = p;
            report.recall = r;
            report.tp = tp;
            report.fp = fp;
            report.fn_ = total_truths - tp;
            report.mean_iou = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
            report.conf_threshold = Some(conf);
        }
    }
    report
}

/// Precision, recall and F1 for the given counts.
pub(crate) fn prf(tp: usize, fp: usize, truths: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if truths == 0 { 1.0 } else { tp as f64 / truths as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

impl EvalReport {
    fn class_label(names: &ClassMap, id: u32) -> String {
        names
            .name(id)
            .map(str::to_string)
            .unwrap_or_else(|| format!("class{id}"))
    }

    /// Aligned text table: per-class AP rows followed by the
    /// Precision / Recall / mAP@50 / IOU summary.
    pub fn render_table(&self, names: &ClassMap) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>8}", "Class", "Truths", "Preds", "AP@50");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<12} {:>7} {:>7} {:>8.4}",
                Self::class_label(names, c.class_id),
                c.truths,
                c.preds,
                c.ap
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>9} {:>9} {:>9} {:>9}", "Precision", "Recall", "mAP@50", "IOU");
        let _ = writeln!(
            s,
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            self.precision, self.recall, self.map, self.mean_iou
        );
        let threshold = match self.conf_threshold {
            Some(t) => format!("confidence >= {t:.4}"),
            None => "no predictions".to_string(),
        };
        let _ = writeln!(
            s,
            "TP {}  FP {}  FN {}  at {threshold} (IOU match >= {})",
            self.tp, self.fp, self.fn_, self.iou_threshold
        );
        let _ = writeln!(
            s,
            "# IOU: mean IOU over true-positive matches at the best-F1 confidence threshold"
        );
        s
    }

    /// `key=value` lines with full float precision.
    pub fn render_kv(&self, names: &ClassMap) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "map50={}", self.map);
        let _ = writeln!(s, "iou={}", self.mean_iou);
        let _ = writeln!(s, "tp={}", self.tp);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        match self.conf_threshold {
            Some(t) => {
                let _ = writeln!(s, "conf_threshold={t}");
            }
            None => {
                let _ = writeln!(s, "conf_threshold=none");
            }
        }
        for c in &self.per_class {
            let _ = writeln!(s, "ap.{}={}", Self::class_label(names, c.class_id), c.ap);
        }
        s
    }
}
