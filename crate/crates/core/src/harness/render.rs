use crate::data::Detection;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

pub fn class_color(class_id: usize) -> [f64; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Inclusive pixel extents `(x0, y0, x1, y1)` covered by a normalized box.
pub fn box_pixels(d: &Detection, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let [x1, y1, x2, y2] = d.corners();
    let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let qx = |v: f64, n: usize, lo: usize| (((v * n as f64).ceil() as isize - 1).max(lo as isize) as usize).min(n - 1);
    let (a, b) = (px(x1, width), px(y1, height));
    (a, b, qx(x2, width, a), qx(y2, height, b))
}

/// Copy of `image` (`[3,H,W]`) with a one-pixel class-colored outline per detection.
pub fn draw_detections(image: &Tensor, dets: &[Detection]) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Input(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = image.clone();
    let data = out.data_mut();
    for d in dets {
        let (x0, y0, x1, y1) = box_pixels(d, w, h);
        let color = class_color(d.class_id);
        let mut put = |x: usize, y: usize| {
            for (k, c) in color.iter().enumerate() {
                data[(k * h + y) * w + x] = *c;
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    Ok(out)
}

/// One line per box: `class score x0 y0 x1 y1` with inclusive pixel extents.
pub fn sidecar(dets: &[Detection], width: usize, height: usize) -> String {
    let mut s = String::from("# class score x0 y0 x1 y1\n");
    for d in dets {
        let (x0, y0, x1, y1) = box_pixels(d, width, height);
        s.push_str(&format!("{} {:.4} {x0} {y0} {x1} {y1}\n", d.class_id, d.score));
    }
    s
}
