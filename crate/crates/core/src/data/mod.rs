//! Boxes, synthetic scenes and the on-disk dataset format.

mod boxes;
mod io;
mod scene;

pub use boxes::{corners, iou, Detection, GroundTruthBox};
pub use io::{decode_ppm, encode_ppm, format_annotations, parse_annotations, read_ppm, write_ppm, Dataset};
pub use scene::{generate_scene, Scene, SceneSpec};
