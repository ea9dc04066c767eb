/// `(recall, precision)` after each ranked prediction.
pub fn pr_curve(ranked_tp: &[bool], truth_count: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            let recall = if truth_count == 0 {
                0.0
            } else {
                tp as f64 / truth_count as f64
            };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP over TP/FP flags ranked by descending
/// confidence.
///
/// Precision is replaced by its running maximum from the right (the
/// envelope) and integrated over recall. With no truths the AP is 1 when
/// there are also no predictions and 0 otherwise.
pub fn average_precision(ranked_tp: &[bool], truth_count: usize) -> f64 {
    if truth_count == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(ranked_tp, truth_count);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(recall, _), &p) in curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    ap
}
