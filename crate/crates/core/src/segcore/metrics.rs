//! Segmentation metrics: mIoU with absent-class skipping and per-class
//! AUC of the precision/recall curve.

use ndarray::Array2;
use std::collections::BTreeMap;

/// A reported metric value with provenance, serialized into run outputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub per_class: BTreeMap<String, f64>,
    /// False when the metric had no support (e.g. AUC with zero positives).
    pub defined: bool,
    pub corpus: String,
    pub model_id: String,
}

/// Per-class (tp, fp, fn) pixel counts.
pub fn confusion_counts(pred: &Array2<u8>, gt: &Array2<u8>, n_classes: usize) -> Vec<(u64, u64, u64)> {
    assert_eq!(pred.dim(), gt.dim(), "pred/gt shape mismatch");
    let mut c = vec![(0u64, 0u64, 0u64); n_classes];
    for (p, g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (*p as usize, *g as usize);
        assert!(p < n_classes && g < n_classes, "class id out of range");
        if p == g {
            c[p].0 += 1;
        } else {
            c[p].1 += 1;
            c[g].2 += 1;
        }
    }
    c
}

/// Per-class IoU; `None` for classes absent from both pred and gt.
pub fn iou_per_class(pred: &Array2<u8>, gt: &Array2<u8>, n_classes: usize) -> Vec<Option<f64>> {
    confusion_counts(pred, gt, n_classes)
        .into_iter()
        .map(|(tp, fp, fnn)| {
            let union = tp + fp + fnn;
            if union == 0 {
                None
            } else {
                Some(tp as f64 / union as f64)
            }
        })
        .collect()
}

/// Mean IoU over the classes present in pred ∪ gt; classes absent from both
/// are skipped entirely.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, n_classes: usize) -> f64 {
    let per = iou_per_class(pred, gt, n_classes);
    let vals: Vec<f64> = per.into_iter().flatten().collect();
    assert!(!vals.is_empty(), "degenerate empty masks");
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Area under the precision/recall curve for one class: trapezoidal
/// integration over the thresholds given by the sorted unique scores, with
/// an anchor point at recall 0 carrying the highest-threshold precision.
/// Returns `None` when the ground truth has no positive pixels.
pub fn auc_pr(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&b| b).count();
    if n_pos == 0 || scores.is_empty() {
        return None;
    }
    // sort indices by descending score; walk unique thresholds
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut pts: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // consume every pixel tied at this threshold
        while i < order.len() && scores[order[i]] == t {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        pts.push((recall, precision));
    }
    // anchor: recall 0 at the first (highest-threshold) precision
    let first_p = pts[0].1;
    let mut auc = 0.0;
    let mut prev = (0.0, first_p);
    for &(r, p) in &pts {
        auc += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    Some(auc)
}

/// AUC-PR of one class channel of a probability map against a mask.
pub fn auc_pr_map(prob: &Array2<f64>, gt: &Array2<u8>, class_id: u8) -> Option<f64> {
    assert_eq!(prob.dim(), gt.dim());
    let scores: Vec<f64> = prob.iter().cloned().collect();
    let pos: Vec<bool> = gt.iter().map(|&g| g == class_id).collect();
    auc_pr(&scores, &pos)
}

/// Fold one prediction into a running per-class confusion accumulator, for
/// corpus-level scores across many images.
pub fn add_confusion(acc: &mut [(u64, u64, u64)], pred: &Array2<u8>, gt: &Array2<u8>) {
    for (c, add) in confusion_counts(pred, gt, acc.len()).into_iter().enumerate() {
        acc[c].0 += add.0;
        acc[c].1 += add.1;
        acc[c].2 += add.2;
    }
}

/// Per-class IoU from accumulated confusion counts.
pub fn iou_from_confusion(acc: &[(u64, u64, u64)]) -> Vec<Option<f64>> {
    acc.iter()
        .map(|&(tp, fp, fnn)| {
            let union = tp + fp + fnn;
            if union == 0 {
                None
            } else {
                Some(tp as f64 / union as f64)
            }
        })
        .collect()
}

/// Corpus-level mean IoU from accumulated confusion counts, skipping
/// classes with no support anywhere.
pub fn miou_from_confusion(acc: &[(u64, u64, u64)]) -> f64 {
    let vals: Vec<f64> = iou_from_confusion(acc).into_iter().flatten().collect();
    assert!(!vals.is_empty(), "degenerate empty confusion");
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // 1-based ranks; ties share the average of their positions
        let r = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks on ties. Returns 0 when
/// either side is constant (no ordering to correlate).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    assert!(a.len() >= 2, "need at least two points");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
