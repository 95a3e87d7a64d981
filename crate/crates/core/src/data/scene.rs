use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one synthetic aerial-style scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Square image side in pixels.
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side as a fraction of the image side; sampled biased towards the low end.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// 0 = clean background, 1 = heavy texture and distractor blobs.
    pub clutter: f64,
    pub occlusion_prob: f64,
    pub num_classes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            size: 64,
            min_objects: 1,
            max_objects: 6,
            min_size_frac: 0.02,
            max_size_frac: 0.10,
            clutter: 0.3,
            occlusion_prob: 0.2,
            num_classes: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("scene size must be positive"));
        }
        if !(self.min_size_frac > 0.0 && self.min_size_frac <= self.max_size_frac && self.max_size_frac <= 1.0) {
            return Err(Error::config(format!(
                "object size range [{}, {}] must lie in (0, 1] of the image side",
                self.min_size_frac, self.max_size_frac
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("clutter and occlusion_prob must lie in [0, 1]"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        Ok(())
    }
}

/// A rendered scene with its exact annotations.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `[3,H,W]`, values on the 8-bit grid `k/255`.
    pub image: Tensor,
    pub truths: Vec<GroundTruthBox>,
    pub occluded: Vec<bool>,
    /// Pixels `(x, y)` painted for each object, before occluders.
    pub footprints: Vec<Vec<(usize, usize)>>,
}

#[derive(Clone, Copy)]
enum Shape {
    Square,
    Disc,
    Triangle,
}

fn class_style(class_id: usize, num_classes: usize) -> (Shape, [f64; 3]) {
    let shape = match class_id % 3 {
        0 => Shape::Square,
        1 => Shape::Disc,
        _ => Shape::Triangle,
    };
    let hue = class_id as f64 / num_classes as f64;
    (shape, hue_to_rgb(hue))
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    // channels stay in [0.15, 0.9]
    let [r, g, b] = [f(5.0), f(3.0), f(1.0)];
    [0.15 + 0.75 * r, 0.15 + 0.75 * g, 0.15 + 0.75 * b]
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in [0,1]^2 relative to the object box
    match shape {
        Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
        Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
    }
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.px[y * self.size + x] = c;
    }

    /// Fill the pixels whose centers fall in the box `[x0, x0+w) x [y0, y0+h)` and satisfy `keep`.
    fn fill(
        &mut self,
        x0: f64,
        y0: f64,
        w: f64,
        h: f64,
        c: [f64; 3],
        keep: impl Fn(f64, f64) -> bool,
    ) -> Vec<(usize, usize)> {
        let mut painted = Vec::new();
        let xs = x0.floor().max(0.0) as usize;
        let ys = y0.floor().max(0.0) as usize;
        let xe = ((x0 + w).ceil() as usize).min(self.size);
        let ye = ((y0 + h).ceil() as usize).min(self.size);
        for y in ys..ye {
            for x in xs..xe {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (u, v) = ((cx - x0) / w, (cy - y0) / h);
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && keep(u, v) {
                    self.put(x, y, c);
                    painted.push((x, y));
                }
            }
        }
        painted
    }
}

/// Render a scene deterministically from `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let sz = n as f64;

    // background: earthy base, low-frequency undulation, pixel noise
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.5));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) / sz,
                rng.gen_range(0.5..3.0) / sz,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06) * (0.5 + spec.clutter),
            )
        })
        .collect();
    let noise = 0.02 + 0.04 * spec.clutter;
    let mut canvas = Canvas {
        size: n,
        px: vec![[0.0; 3]; n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let mut t = 0.0;
            for &(fx, fy, ph, amp) in &waves {
                t += amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
            }
            let c = std::array::from_fn(|k| base[k] + t + rng.gen_range(-noise..noise));
            canvas.put(x, y, c);
        }
    }

    // distractors: desaturated blobs in the object size range
    let blobs = (spec.clutter * 12.0).round() as usize;
    for _ in 0..blobs {
        let side = rng.gen_range(spec.min_size_frac..=spec.max_size_frac) * sz;
        let (x0, y0) = (
            rng.gen_range(0.0..(sz - side).max(1e-9)),
            rng.gen_range(0.0..(sz - side).max(1e-9)),
        );
        let gray = rng.gen_range(0.2..0.8);
        let tint: [f64; 3] = std::array::from_fn(|_| gray + rng.gen_range(-0.08..0.08));
        let round = rng.gen_bool(0.5);
        canvas.fill(x0, y0, side, side, tint, |u, v| {
            !round || (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25
        });
    }

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut truths = Vec::with_capacity(count);
    let mut occluded = Vec::with_capacity(count);
    let mut footprints = Vec::with_capacity(count);
    let mut occluders = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.num_classes);
        let u: f64 = rng.gen();
        let frac = spec.min_size_frac + (spec.max_size_frac - spec.min_size_frac) * u * u;
        let aspect: f64 = rng.gen_range(0.75..1.333);
        let w = (frac * sz * aspect.sqrt()).min(sz);
        let h = (frac * sz / aspect.sqrt()).min(sz);
        let x0 = rng.gen_range(0.0..=(sz - w));
        let y0 = rng.gen_range(0.0..=(sz - h));
        let (shape, color) = class_style(class_id, spec.num_classes);
        let jitter: [f64; 3] = std::array::from_fn(|k| color[k] + rng.gen_range(-0.08..0.08));
        let mut painted = canvas.fill(x0, y0, w, h, jitter, |u, v| inside(shape, u, v));
        if painted.is_empty() {
            // sub-pixel object: light the pixel holding its center
            let (px, py) = (
                ((x0 + w / 2.0) as usize).min(n - 1),
                ((y0 + h / 2.0) as usize).min(n - 1),
            );
            canvas.put(px, py, jitter);
            painted.push((px, py));
        }
        let occ = rng.gen_bool(spec.occlusion_prob);
        if occ {
            let ow = w * rng.gen_range(0.25..0.5);
            let oh = h * rng.gen_range(0.25..0.5);
            let ox = if rng.gen_bool(0.5) { x0 } else { x0 + w - ow };
            let oy = if rng.gen_bool(0.5) { y0 } else { y0 + h - oh };
            let gray = rng.gen_range(0.35..0.65);
            occluders.push((ox, oy, ow, oh, [gray; 3]));
        }
        truths.push(GroundTruthBox::new(
            class_id,
            (x0 + w / 2.0) / sz,
            (y0 + h / 2.0) / sz,
            w / sz,
            h / sz,
        )?);
        occluded.push(occ);
        footprints.push(painted);
    }
    for (ox, oy, ow, oh, c) in occluders {
        canvas.fill(ox, oy, ow, oh, c, |_, _| true);
    }

    let mut data = vec![0.0; 3 * n * n];
    for (i, p) in canvas.px.iter().enumerate() {
        for k in 0..3 {
            data[k * n * n + i] = quantize(p[k]);
        }
    }
    Ok(Scene {
        image: Tensor::new(&[3, n, n], data)?,
        truths,
        occluded,
        footprints,
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
