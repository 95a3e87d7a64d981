use std::f64::consts::PI;

use super::config::BoxLoss;
use super::decode::center_cell;
use crate::data::GroundTruthBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, UnaryOp, Var};

const EPS: f64 = 1e-9;

/// A truth box bound to one head cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    /// Row of the flattened `[B*H*W, 5+K]` head output.
    pub row: usize,
    pub gx: usize,
    pub gy: usize,
    pub truth: GroundTruthBox,
}

/// Center-cell assignment. When two truths share a cell the larger one wins.
/// Targets come back sorted by row.
pub fn assign_targets(truths: &[Vec<GroundTruthBox>], grid: (usize, usize)) -> Vec<Target> {
    let (gh, gw) = grid;
    let mut best: std::collections::BTreeMap<usize, Target> = Default::default();
    for (bi, ts) in truths.iter().enumerate() {
        for t in ts {
            let (gx, gy) = center_cell(t.cx, t.cy, grid);
            let row = (bi * gh + gy) * gw + gx;
            let cand = Target { row, gx, gy, truth: *t };
            match best.get(&row) {
                Some(cur) if cur.truth.w * cur.truth.h >= t.w * t.h => {}
                _ => {
                    best.insert(row, cand);
                }
            }
        }
    }
    best.into_values().collect()
}

/// Loss nodes on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub obj: Var,
    pub cls: Var,
    pub bbox: Var,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents {
            total: g.value(self.total).item(),
            obj: g.value(self.obj).item(),
            cls: g.value(self.cls).item(),
            bbox: g.value(self.bbox).item(),
        }
    }
}

/// Mean binary cross-entropy with logits against constant targets.
fn bce(g: &mut Graph, logits: Var, targets: Tensor) -> Result<Var> {
    let sp = g.unary(UnaryOp::Softplus, logits);
    let t = g.constant(targets);
    let tx = g.mul(t, logits)?;
    let l = g.sub(sp, tx)?;
    Ok(g.mean_all(l))
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    Tensor::new(&[n, 1], v).expect("column length matches")
}

/// `obj + cls + box` for a head output `[B, 5+K, H, W]` and per-image truths.
///
/// Objectness BCE averages over every cell; class BCE and the box term
/// average over assigned cells and are zero when nothing is assigned.
pub fn compute_loss(
    g: &mut Graph,
    head: Var,
    truths: &[Vec<GroundTruthBox>],
    num_classes: usize,
    box_loss: BoxLoss,
) -> Result<LossVars> {
    let s = g.shape(head).to_vec();
    let k = num_classes;
    if s.len() != 4 || s[1] != 5 + k || s[0] != truths.len() {
        return Err(Error::dim(format!(
            "head {s:?} does not match {} images with 5+{k} channels",
            truths.len()
        )));
    }
    if let Some(t) = truths.iter().flatten().find(|t| t.class_id >= k) {
        return Err(Error::Input(format!("class {} outside 0..{k}", t.class_id)));
    }
    let (b, d, gh, gw) = (s[0], s[1], s[2], s[3]);
    let cells = b * gh * gw;
    let flat = g.permute(head, &[0, 2, 3, 1])?;
    let flat = g.reshape(flat, &[cells, d])?;
    let targets = assign_targets(truths, (gh, gw));

    let obj_logits = g.slice(flat, 1, 0, 1)?;
    let mut obj_t = Tensor::zeros(&[cells, 1]);
    for t in &targets {
        obj_t.data_mut()[t.row] = 1.0;
    }
    let obj = bce(g, obj_logits, obj_t)?;

    let (cls, bbox) = if targets.is_empty() {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let rows: Vec<usize> = targets.iter().map(|t| t.row).collect();
        let sel = g.index_select(flat, &rows)?;
        let cls_logits = g.slice(sel, 1, 1, k)?;
        let onehot = Tensor::from_fn(&[rows.len(), k], |i| {
            f64::from(u8::from(targets[i / k].truth.class_id == i % k))
        });
        let cls = bce(g, cls_logits, onehot)?;
        let t = g.slice(sel, 1, 1 + k, 4)?;
        let bbox = box_term(g, t, &targets, (gh, gw), box_loss)?;
        (cls, bbox)
    };
    let total = g.add(obj, cls)?;
    let total = g.add(total, bbox)?;
    Ok(LossVars { total, obj, cls, bbox })
}

struct Decoded {
    cx: Var,
    cy: Var,
    w: Var,
    h: Var,
}

fn decode_on_tape(g: &mut Graph, t: Var, targets: &[Target], grid: (usize, usize)) -> Result<Decoded> {
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    let tx = g.slice(t, 1, 0, 1)?;
    let ty = g.slice(t, 1, 1, 1)?;
    let tw = g.slice(t, 1, 2, 1)?;
    let th = g.slice(t, 1, 3, 1)?;
    let sx = g.sigmoid(tx);
    let sx = g.scale(sx, 2.0 / gw);
    let ox = g.constant(column(targets.iter().map(|t| (t.gx as f64 - 0.5) / gw)));
    let cx = g.add(sx, ox)?;
    let sy = g.sigmoid(ty);
    let sy = g.scale(sy, 2.0 / gh);
    let oy = g.constant(column(targets.iter().map(|t| (t.gy as f64 - 0.5) / gh)));
    let cy = g.add(sy, oy)?;
    let ew = g.unary(UnaryOp::Exp, tw);
    let w = g.scale(ew, 1.0 / gw);
    let eh = g.unary(UnaryOp::Exp, th);
    let h = g.scale(eh, 1.0 / gh);
    Ok(Decoded { cx, cy, w, h })
}

fn box_term(g: &mut Graph, t: Var, targets: &[Target], grid: (usize, usize), kind: BoxLoss) -> Result<Var> {
    let p = decode_on_tape(g, t, targets, grid)?;
    let tcx = g.constant(column(targets.iter().map(|t| t.truth.cx)));
    let tcy = g.constant(column(targets.iter().map(|t| t.truth.cy)));
    let tw = g.constant(column(targets.iter().map(|t| t.truth.w)));
    let th = g.constant(column(targets.iter().map(|t| t.truth.h)));
    match kind {
        BoxLoss::L1 => {
            let mut acc = None;
            for (a, b) in [(p.cx, tcx), (p.cy, tcy), (p.w, tw), (p.h, th)] {
                let dlt = g.sub(a, b)?;
                let ad = g.unary(UnaryOp::Abs, dlt);
                acc = Some(match acc {
                    None => ad,
                    Some(s) => g.add(s, ad)?,
                });
            }
            let sum = acc.expect("four terms");
            let m = g.mean_all(sum);
            Ok(g.scale(m, 0.25))
        }
        BoxLoss::Ciou => ciou_loss(g, &p, tcx, tcy, tw, th),
    }
}

fn corners(g: &mut Graph, c: Var, size: Var) -> Result<(Var, Var)> {
    let half = g.scale(size, 0.5);
    Ok((g.sub(c, half)?, g.add(c, half)?))
}

/// Mean `1 - IoU + rho^2 / c^2 + alpha v`.
fn ciou_loss(g: &mut Graph, p: &Decoded, tcx: Var, tcy: Var, tw: Var, th: Var) -> Result<Var> {
    let (px1, px2) = corners(g, p.cx, p.w)?;
    let (py1, py2) = corners(g, p.cy, p.h)?;
    let (tx1, tx2) = corners(g, tcx, tw)?;
    let (ty1, ty2) = corners(g, tcy, th)?;

    let ix2 = g.minimum(px2, tx2)?;
    let ix1 = g.maximum(px1, tx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.unary(UnaryOp::Relu, iw);
    let iy2 = g.minimum(py2, ty2)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.unary(UnaryOp::Relu, ih);
    let inter = g.mul(iw, ih)?;
    let pa = g.mul(p.w, p.h)?;
    let ta = g.mul(tw, th)?;
    let union = g.add(pa, ta)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, EPS);
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(px2, tx2)?;
    let ex1 = g.minimum(px1, tx1)?;
    let ew = g.sub(ex2, ex1)?;
    let ey2 = g.maximum(py2, ty2)?;
    let ey1 = g.minimum(py1, ty1)?;
    let eh = g.sub(ey2, ey1)?;
    let ew2 = g.unary(UnaryOp::Square, ew);
    let eh2 = g.unary(UnaryOp::Square, eh);
    let c2 = g.add(ew2, eh2)?;
    let c2 = g.add_scalar(c2, EPS);
    let dx = g.sub(p.cx, tcx)?;
    let dy = g.sub(p.cy, tcy)?;
    let dx2 = g.unary(UnaryOp::Square, dx);
    let dy2 = g.unary(UnaryOp::Square, dy);
    let rho2 = g.add(dx2, dy2)?;
    let dist = g.div(rho2, c2)?;

    let pr = g.div(p.w, p.h)?;
    let pa = g.unary(UnaryOp::Atan, pr);
    let tr = g.div(tw, th)?;
    let ta = g.unary(UnaryOp::Atan, tr);
    let da = g.sub(ta, pa)?;
    let da2 = g.unary(UnaryOp::Square, da);
    let v = g.scale(da2, 4.0 / (PI * PI));
    let one_minus_iou = g.scale(iou, -1.0);
    let one_minus_iou = g.add_scalar(one_minus_iou, 1.0 + EPS);
    let denom = g.add(one_minus_iou, v)?;
    let alpha = g.div(v, denom)?;
    let av = g.mul(alpha, v)?;

    let neg_iou = g.scale(iou, -1.0);
    let l = g.add_scalar(neg_iou, 1.0);
    let l = g.add(l, dist)?;
    let l = g.add(l, av)?;
    Ok(g.mean_all(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::decode::encode_box;

    fn gt(c: usize, cx: f64, cy: f64, s: f64) -> GroundTruthBox {
        GroundTruthBox::new(c, cx, cy, s, s).unwrap()
    }

    #[test]
    fn larger_box_wins_a_shared_cell() {
        let t = assign_targets(&[vec![gt(0, 0.51, 0.51, 0.03), gt(1, 0.52, 0.53, 0.08)]], (8, 8));
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].truth.class_id, 1);
        assert_eq!(t[0].row, 4 * 8 + 4);
    }

    #[test]
    fn empty_image_is_background_objectness_only() {
        let mut g = Graph::new();
        let head = g.input(Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f64 * 0.3).sin()));
        let l = compute_loss(&mut g, head, &[vec![]], 3, BoxLoss::Ciou).unwrap();
        let v = l.values(&g);
        assert_eq!(v.cls, 0.0);
        assert_eq!(v.bbox, 0.0);
        assert_eq!(v.total, v.obj);
        g.backward(l.total).unwrap();
    }

    #[test]
    fn saturated_exact_prediction_has_near_zero_loss() {
        let truths = vec![gt(2, 0.3, 0.6, 0.07), gt(0, 0.81, 0.12, 0.05)];
        let (k, gh, gw) = (3, 8, 8);
        let mut logits = Tensor::zeros(&[1, 5 + k, gh, gw]);
        let plane = gh * gw;
        for v in &mut logits.data_mut()[..plane] {
            *v = -30.0;
        }
        for t in &truths {
            let (gx, gy, reg) = encode_box(t, (gh, gw));
            let cell = gy * gw + gx;
            let d = logits.data_mut();
            d[cell] = 30.0;
            for c in 0..k {
                d[(1 + c) * plane + cell] = if c == t.class_id { 30.0 } else { -30.0 };
            }
            for (j, r) in reg.iter().enumerate() {
                d[(1 + k + j) * plane + cell] = *r;
            }
        }
        for kind in [BoxLoss::Ciou, BoxLoss::L1] {
            let mut g = Graph::new();
            let head = g.constant(logits.clone());
            let l = compute_loss(&mut g, head, std::slice::from_ref(&truths), k, kind).unwrap();
            assert!(l.values(&g).total < 1e-3, "{kind:?}: {:?}", l.values(&g));
        }
    }
}
