//! On-disk dataset layout: `NAME.ppm` (binary P6) next to `NAME.txt` with one
//! `class_id cx cy w h` line per object, coordinates normalized.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::boxes::GroundTruthBox;
use super::scene::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::par::{map_range, Exec};
use crate::tensor::Tensor;

/// Encode a `[3,H,W]` image with values in `[0,1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("PPM needs a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Input(format!("unreadable PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header"))?
                .to_string(),
        );
    }
    pos += 1; // single whitespace byte after maxval
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit, non-empty images are supported"));
    }
    let body = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = body[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn format_annotations(truths: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for t in truths {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", t.class_id, t.cx, t.cy, t.w, t.h);
    }
    s
}

pub fn parse_annotations(text: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Input(format!("annotation line {}: expected 5 fields", no + 1)));
        }
        let class_id = f[0]
            .parse::<usize>()
            .map_err(|_| Error::Input(format!("annotation line {}: bad class id", no + 1)))?;
        let mut v = [0.0; 4];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("annotation line {}: bad number {s:?}", no + 1)))?;
        }
        out.push(GroundTruthBox::new(class_id, v[0], v[1], v[2], v[3])?);
    }
    Ok(out)
}

/// Images with their annotations, in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
    pub truths: Vec<Vec<GroundTruthBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `count` scenes with seeds `first_seed, first_seed + 1, ...`.
    pub fn synthetic(template: &SceneSpec, first_seed: u64, count: usize, exec: Exec) -> Result<Self> {
        let scenes = map_range(exec, count, |i| {
            generate_scene(&SceneSpec {
                seed: first_seed + i as u64,
                ..template.clone()
            })
        });
        let mut ds = Dataset::default();
        for (i, s) in scenes.into_iter().enumerate() {
            let s = s?;
            ds.names.push(format!("scene_{:05}", first_seed + i as u64));
            ds.images.push(s.image);
            ds.truths.push(s.truths);
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for ((name, img), truths) in self.names.iter().zip(&self.images).zip(&self.truths) {
            write_ppm(&dir.join(format!("{name}.ppm")), img)?;
            fs::write(dir.join(format!("{name}.txt")), format_annotations(truths))?;
        }
        Ok(())
    }

    /// Every `*.ppm` in `dir` (sorted by name) with its sibling `.txt`; a missing
    /// annotation file means an image without objects.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
        let mut stems: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "ppm").then(|| p.file_stem()?.to_str().map(str::to_string))?
            })
            .collect();
        stems.sort();
        let mut ds = Dataset::default();
        for stem in stems {
            let img = read_ppm(&dir.join(format!("{stem}.ppm")))?;
            let ann = dir.join(format!("{stem}.txt"));
            let truths = if ann.exists() {
                parse_annotations(&fs::read_to_string(&ann)?)?
            } else {
                Vec::new()
            };
            ds.names.push(stem);
            ds.images.push(img);
            ds.truths.push(truths);
        }
        Ok(ds)
    }
}
