use crate::error::{Error, Result};

/// An annotated object: class and a normalized center-size box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    /// Validating constructor; zero-area or out-of-range boxes are rejected.
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = [cx, cy, w, h].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 || w > 1.0 || h > 1.0 {
            return Err(Error::Input(format!("degenerate box: cx={cx} cy={cy} w={w} h={h}")));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::Input(format!("box center ({cx}, {cy}) outside the unit square")));
        }
        Ok(GroundTruthBox { class_id, cx, cy, w, h })
    }

    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }
}

/// A scored prediction in normalized center-size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Detection {
    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }
}

/// `[x1, y1, x2, y2]` of a center-size box.
pub fn corners(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Intersection over union of two corner boxes; 0 when either has no area.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
