use super::model::HeadOutput;
use crate::data::{iou, Detection, GroundTruthBox};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cell holding the box center on a `gh x gw` grid.
pub fn center_cell(cx: f64, cy: f64, grid: (usize, usize)) -> (usize, usize) {
    let (gh, gw) = grid;
    let gx = ((cx * gw as f64).floor().max(0.0) as usize).min(gw - 1);
    let gy = ((cy * gh as f64).floor().max(0.0) as usize).min(gh - 1);
    (gx, gy)
}

/// Normalized `(cx, cy, w, h)` from regression terms at cell `(gx, gy)`:
/// `cx = (gx - 0.5 + 2 sigmoid(tx)) / gw`, `w = exp(tw) / gw`.
pub fn decode_box(gx: usize, gy: usize, t: [f64; 4], grid: (usize, usize)) -> [f64; 4] {
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    [
        (gx as f64 - 0.5 + 2.0 * sigmoid(t[0])) / gw,
        (gy as f64 - 0.5 + 2.0 * sigmoid(t[1])) / gh,
        t[2].exp() / gw,
        t[3].exp() / gh,
    ]
}

/// Inverse of [`decode_box`] at the center cell: `(gx, gy, [tx, ty, tw, th])`.
pub fn encode_box(b: &GroundTruthBox, grid: (usize, usize)) -> (usize, usize, [f64; 4]) {
    let (gx, gy) = center_cell(b.cx, b.cy, grid);
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    let ox = b.cx * gw - gx as f64;
    let oy = b.cy * gh - gy as f64;
    (
        gx,
        gy,
        [
            logit((ox + 0.5) / 2.0),
            logit((oy + 0.5) / 2.0),
            (b.w * gw).ln(),
            (b.h * gh).ln(),
        ],
    )
}

/// Greedy NMS within each class: keep the best-scoring box, drop every
/// same-class box overlapping it by more than `iou_threshold`, repeat.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let dc = d.corners();
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || iou(k.corners(), dc) <= iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

/// Per-image detections scoring at least `conf_threshold`, after per-class
/// NMS. Scores are `sigmoid(obj) * sigmoid(best class)`; boxes are clamped to
/// the image.
pub fn decode_predictions(pred: &HeadOutput, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    for (name, v) in [("confidence", conf_threshold), ("NMS IoU", nms_iou)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Usage(format!("{name} threshold {v} is not in (0,1)")));
        }
    }
    let s = pred.logits.shape();
    let k = pred.num_classes;
    if s.len() != 4 || s[1] != 5 + k {
        return Err(Error::dim(format!("head output {s:?} does not carry 5+{k} channels")));
    }
    let (b, d, gh, gw) = (s[0], s[1], s[2], s[3]);
    let plane = gh * gw;
    let data = pred.logits.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let at = |c: usize, cell: usize| data[(bi * d + c) * plane + cell];
        let mut dets = Vec::new();
        for cell in 0..plane {
            let obj = sigmoid(at(0, cell));
            let (cls, cls_logit) = (0..k)
                .map(|c| (c, at(1 + c, cell)))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            let score = obj * sigmoid(cls_logit);
            if !(score >= conf_threshold) {
                continue;
            }
            let t = [at(1 + k, cell), at(2 + k, cell), at(3 + k, cell), at(4 + k, cell)];
            let [cx, cy, w, h] = decode_box(cell % gw, cell / gw, t, (gh, gw));
            let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
            let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
            let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
            let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
            if !(x2 > x1 && y2 > y1) {
                continue;
            }
            dets.push(Detection {
                class_id: cls,
                score,
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: x2 - x1,
                h: y2 - y1,
            });
        }
        out.push(nms(dets, nms_iou));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn det(score: f64) -> Detection {
        Detection {
            class_id: 0,
            score,
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        }
    }

    #[test]
    fn nms_keeps_the_higher_duplicate() {
        let kept = nms(vec![det(0.8), det(0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_ignores_other_classes() {
        let mut b = det(0.8);
        b.class_id = 1;
        assert_eq!(nms(vec![det(0.9), b], 0.5).len(), 2);
    }

    #[test]
    fn negative_infinity_logits_yield_nothing() {
        let pred = HeadOutput {
            logits: Tensor::full(&[1, 8, 8, 8], f64::NEG_INFINITY),
            num_classes: 3,
        };
        let d = decode_predictions(&pred, 0.01, 0.5).unwrap();
        assert!(d[0].is_empty());
    }

    #[test]
    fn encode_then_decode_round_trips() {
        let b = GroundTruthBox::new(1, 0.437, 0.912, 0.031, 0.07).unwrap();
        let (gx, gy, t) = encode_box(&b, (8, 8));
        let r = decode_box(gx, gy, t, (8, 8));
        for (x, y) in r.iter().zip([b.cx, b.cy, b.w, b.h]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholds_outside_unit_interval_are_rejected() {
        let pred = HeadOutput {
            logits: Tensor::zeros(&[1, 8, 8, 8]),
            num_classes: 3,
        };
        assert!(decode_predictions(&pred, 0.0, 0.5).is_err());
        assert!(decode_predictions(&pred, 0.5, 1.0).is_err());
    }
}
