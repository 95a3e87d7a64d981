//! Brute-force precision/recall oracle and a random case generator, shared by
//! the metric tests and the acceptance run.

#![allow(dead_code)]

use fusenet_core::data::{Detection, GroundTruthBox};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Images<T> = Vec<Vec<T>>;

pub fn oracle_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.0 - a.2 / 2.0, a.0 + a.2 / 2.0, a.1 - a.3 / 2.0, a.1 + a.3 / 2.0);
    let (bx0, bx1, by0, by1) = (b.0 - b.2 / 2.0, b.0 + b.2 / 2.0, b.1 - b.3 / 2.0, b.1 + b.3 / 2.0);
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    inter / (a.2 * a.3 + b.2 * b.3 - inter)
}

/// All detections of `class`, as `(score, image, index)` in descending score order.
pub fn ranked(dets: &Images<Detection>, class: usize) -> Vec<(f64, usize, usize)> {
    let mut all = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class {
                all.push((d.score, img, k));
            }
        }
    }
    // stable: equal scores keep image-then-position order
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    all
}

/// True-positive count among the first `k` ranked detections, matched from scratch.
pub fn true_positives(
    dets: &Images<Detection>,
    truths: &Images<GroundTruthBox>,
    class: usize,
    thr: f64,
    k: usize,
) -> usize {
    let order = ranked(dets, class);
    let mut claimed: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0;
    for &(_, img, idx) in order.iter().take(k) {
        let d = &dets[img][idx];
        let mut pick: Option<usize> = None;
        let mut pick_iou = f64::NEG_INFINITY;
        for (j, t) in truths[img].iter().enumerate() {
            if t.class_id != class || claimed[img][j] {
                continue;
            }
            let v = oracle_iou((d.cx, d.cy, d.w, d.h), (t.cx, t.cy, t.w, t.h));
            if v >= thr && v > pick_iou {
                pick = Some(j);
                pick_iou = v;
            }
        }
        if let Some(j) = pick {
            claimed[img][j] = true;
            tp += 1;
        }
    }
    tp
}

/// Enumerates every rank cutoff, then integrates the interpolated precision
/// `p(r) = max { p_k : r_k >= r }` over the distinct recall levels.
pub fn oracle_ap(dets: &Images<Detection>, truths: &Images<GroundTruthBox>, class: usize, thr: f64) -> f64 {
    let total = truths.iter().flatten().filter(|t| t.class_id == class).count();
    if total == 0 {
        return 0.0;
    }
    let n = ranked(dets, class).len();
    let points: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = true_positives(dets, truths, class, thr, k) as f64;
            (tp / total as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

pub fn random_case(
    rng: &mut ChaCha8Rng,
    classes: usize,
    max_boxes: usize,
) -> (Images<Detection>, Images<GroundTruthBox>) {
    let images = rng.gen_range(1..=3);
    let mut truths: Images<GroundTruthBox> = vec![Vec::new(); images];
    let mut dets: Images<Detection> = vec![Vec::new(); images];
    let n_truth = rng.gen_range(1..=max_boxes);
    let n_det = rng.gen_range(0..=max_boxes);
    for _ in 0..n_truth {
        let img = rng.gen_range(0..images);
        let t = GroundTruthBox::new(
            rng.gen_range(0..classes),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.3),
            rng.gen_range(0.05..0.3),
        )
        .unwrap();
        truths[img].push(t);
    }
    for _ in 0..n_det {
        let img = rng.gen_range(0..images);
        let score = rng.gen_range(0.0..1.0);
        let d = match truths[img].get(rng.gen_range(0..truths[img].len().max(1))) {
            // perturbed copy of a truth, sometimes with the wrong class
            Some(t) if rng.gen_bool(0.75) => Detection {
                class_id: if rng.gen_bool(0.85) {
                    t.class_id
                } else {
                    rng.gen_range(0..classes)
                },
                score,
                cx: t.cx + rng.gen_range(-0.04..0.04),
                cy: t.cy + rng.gen_range(-0.04..0.04),
                w: t.w * rng.gen_range(0.7..1.4),
                h: t.h * rng.gen_range(0.7..1.4),
            },
            _ => Detection {
                class_id: rng.gen_range(0..classes),
                score,
                cx: rng.gen_range(0.1..0.9),
                cy: rng.gen_range(0.1..0.9),
                w: rng.gen_range(0.05..0.3),
                h: rng.gen_range(0.05..0.3),
            },
        };
        dets[img].push(d);
    }
    (dets, truths)
}
