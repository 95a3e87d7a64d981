//! Precision/recall, average precision and mean AP over an IoU ladder.
//!
//! Inputs are per-image lists: `dets[i]` and `truths[i]` belong to image `i`.

use crate::data::{iou, Detection, GroundTruthBox};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_ladder() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Confidence threshold at which P and R are reported.
pub const OPERATING_CONFIDENCE: f64 = 0.25;

/// Outcome of greedy matching: detections in rank order with a TP flag.
#[derive(Debug, Clone)]
pub struct Ranked {
    /// `(score, is_true_positive)` sorted by descending score.
    pub hits: Vec<(f64, bool)>,
    pub num_truths: usize,
}

/// Score-descending greedy matching for one class. Each detection takes the
/// unmatched truth of its image with the highest IoU, if that IoU reaches
/// `iou_threshold`. Ties in score keep input order (image, then position).
pub fn match_detections(
    dets: &[Vec<Detection>],
    truths: &[Vec<GroundTruthBox>],
    class_id: usize,
    iou_threshold: f64,
) -> Ranked {
    let mut order: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let class_truths: Vec<Vec<[f64; 4]>> = truths
        .iter()
        .map(|ts| {
            ts.iter()
                .filter(|t| t.class_id == class_id)
                .map(|t| t.corners())
                .collect()
        })
        .collect();
    let mut used: Vec<Vec<bool>> = class_truths.iter().map(|t| vec![false; t.len()]).collect();
    let num_truths = class_truths.iter().map(Vec::len).sum();

    let hits = order
        .into_iter()
        .map(|(img, d)| {
            let dc = d.corners();
            let mut best: Option<(usize, f64)> = None;
            if let Some(ts) = class_truths.get(img) {
                for (j, t) in ts.iter().enumerate() {
                    if used[img][j] {
                        continue;
                    }
                    let v = iou(dc, *t);
                    if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            (d.score, best.is_some())
        })
        .collect();
    Ranked { hits, num_truths }
}

/// Area under the precision envelope (all-point interpolation).
pub fn ap_from_ranked(r: &Ranked) -> f64 {
    if r.num_truths == 0 {
        return 0.0;
    }
    let n = r.hits.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &(_, hit)) in r.hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / r.num_truths as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev_r) * precision[i];
        prev_r = recall[i];
    }
    ap
}

/// AP of one class at one IoU threshold. Empty truth sets give 0.
pub fn average_precision(
    dets: &[Vec<Detection>],
    truths: &[Vec<GroundTruthBox>],
    class_id: usize,
    iou_threshold: f64,
) -> f64 {
    ap_from_ranked(&match_detections(dets, truths, class_id, iou_threshold))
}

/// Evaluation summary. Metric fields are fractions in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// AP at IoU 0.5 per class; `None` for classes absent from the truths.
    pub per_class_ap50: Vec<Option<f64>>,
    /// AP averaged over the IoU ladder, per class.
    pub per_class_ap50_95: Vec<Option<f64>>,
    pub map50: f64,
    /// Mean over the 0.50:0.05:0.95 ladder (reported under the "mAP50-90" label).
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub conf_threshold: f64,
    pub params: u64,
    pub flops: u64,
}

/// mAP over `num_classes`, skipping classes with no truths. The ladder must
/// contain 0.5 for mAP50.
pub fn mean_ap(
    dets: &[Vec<Detection>],
    truths: &[Vec<GroundTruthBox>],
    num_classes: usize,
    ladder: &[f64],
) -> Result<MetricsReport> {
    if dets.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} detection lists for {} images",
            dets.len(),
            truths.len()
        )));
    }
    let present: Vec<bool> = (0..num_classes)
        .map(|c| truths.iter().flatten().any(|t| t.class_id == c))
        .collect();
    let n = present.iter().filter(|&&p| p).count();
    if n == 0 {
        return Err(Error::Evaluation("no ground-truth objects to evaluate against".into()));
    }
    let i50 = ladder
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-12)
        .ok_or_else(|| Error::Evaluation("IoU ladder must contain 0.5".into()))?;

    let mut per50 = vec![None; num_classes];
    let mut per_ladder = vec![None; num_classes];
    for c in (0..num_classes).filter(|&c| present[c]) {
        let aps: Vec<f64> = ladder.iter().map(|&t| average_precision(dets, truths, c, t)).collect();
        per50[c] = Some(aps[i50]);
        per_ladder[c] = Some(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let mean = |v: &[Option<f64>]| v.iter().flatten().sum::<f64>() / n as f64;
    let (precision, recall) = precision_recall(dets, truths, num_classes, OPERATING_CONFIDENCE);
    Ok(MetricsReport {
        map50: mean(&per50),
        map50_95: mean(&per_ladder),
        per_class_ap50: per50,
        per_class_ap50_95: per_ladder,
        precision,
        recall,
        conf_threshold: OPERATING_CONFIDENCE,
        params: 0,
        flops: 0,
    })
}

/// Micro-averaged precision and recall at IoU 0.5 over detections scoring at
/// least `conf`. Precision is 0 when nothing passes the threshold.
pub fn precision_recall(
    dets: &[Vec<Detection>],
    truths: &[Vec<GroundTruthBox>],
    num_classes: usize,
    conf: f64,
) -> (f64, f64) {
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| d.iter().filter(|x| x.score >= conf).copied().collect())
        .collect();
    let (mut tp, mut fp, mut total) = (0usize, 0usize, 0usize);
    for c in 0..num_classes {
        let r = match_detections(&kept, truths, c, 0.5);
        let hits = r.hits.iter().filter(|h| h.1).count();
        tp += hits;
        fp += r.hits.len() - hits;
        total += r.num_truths;
    }
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
    (p, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(c: usize, cx: f64) -> GroundTruthBox {
        GroundTruthBox::new(c, cx, 0.5, 0.1, 0.1).unwrap()
    }

    fn det(c: usize, cx: f64, score: f64) -> Detection {
        Detection {
            class_id: c,
            score,
            cx,
            cy: 0.5,
            w: 0.1,
            h: 0.1,
        }
    }

    #[test]
    fn single_match_is_perfect() {
        let ap = average_precision(&[vec![det(0, 0.5, 0.9)]], &[vec![gt(0, 0.5)]], 0, 0.5);
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_detections_is_zero() {
        assert_eq!(average_precision(&[vec![]], &[vec![gt(0, 0.5)]], 0, 0.5), 0.0);
    }

    #[test]
    fn two_classes_one_and_zero_average_to_half() {
        let truths = vec![vec![gt(0, 0.2), gt(1, 0.7)]];
        let dets = vec![vec![det(0, 0.2, 0.8)]];
        let r = mean_ap(&dets, &truths, 2, &iou_ladder()).unwrap();
        assert_eq!(r.per_class_ap50, vec![Some(1.0), Some(0.0)]);
        assert_eq!(r.map50, 0.5);
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let truths = vec![vec![gt(0, 0.2), gt(0, 0.7)], vec![gt(0, 0.4)]];
        let dets: Vec<Vec<Detection>> = truths
            .iter()
            .map(|ts| ts.iter().map(|t| det(0, t.cx, 0.9)).collect())
            .collect();
        let r = mean_ap(&dets, &truths, 1, &iou_ladder()).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
    }

    #[test]
    fn absent_classes_are_excluded_and_empty_truths_error() {
        let truths = vec![vec![gt(0, 0.5)]];
        let dets = vec![vec![det(0, 0.5, 0.9), det(2, 0.1, 0.9)]];
        let r = mean_ap(&dets, &truths, 3, &iou_ladder()).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.per_class_ap50[2], None);
        assert!(matches!(
            mean_ap(&[vec![]], &[vec![]], 3, &iou_ladder()),
            Err(Error::Evaluation(_))
        ));
    }
}
