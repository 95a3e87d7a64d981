use crate::data::{Dataset, Detection};
use crate::detector::{count_params_flops, decode_predictions, Detector};
use crate::error::{Error, Result};
use crate::metrics::{iou_ladder, mean_ap, MetricsReport};
use crate::par::{map_range, Exec};

/// Score floor used when collecting detections for AP.
pub const EVAL_CONF: f64 = 0.001;
pub const EVAL_NMS_IOU: f64 = 0.5;

/// Detections for every image, one tape per image, merged in image order.
pub fn detect_all(
    model: &Detector,
    data: &Dataset,
    conf: f64,
    nms_iou: f64,
    exec: Exec,
) -> Result<Vec<Vec<Detection>>> {
    map_range(exec, data.len(), |i| -> Result<Vec<Detection>> {
        let img = &data.images[i];
        let s = img.shape().to_vec();
        let out = model.predict(&img.clone().reshaped(&[1, s[0], s[1], s[2]])?)?;
        Ok(decode_predictions(&out, conf, nms_iou)?.remove(0))
    })
    .into_iter()
    .collect()
}

/// Full-dataset decode plus mAP, with the model's cost attached.
pub fn evaluate(model: &Detector, data: &Dataset, exec: Exec) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Evaluation("evaluation set is empty".into()));
    }
    let dets = detect_all(model, data, EVAL_CONF, EVAL_NMS_IOU, exec)?;
    let mut report = mean_ap(&dets, &data.truths, model.config.num_classes, &iou_ladder())?;
    let mut cfg = model.config.clone();
    if let Some(img) = data.images.first() {
        cfg.image_size = img.shape()[1];
    }
    let cost = count_params_flops(&cfg)?;
    report.params = cost.params;
    report.flops = cost.flops;
    Ok(report)
}

pub const EVAL_CSV_HEADER: &str = "class,AP50,AP50-90";

/// One row per class present in the truths, then `all` with the means.
pub fn eval_csv(report: &MetricsReport) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for (c, (a, b)) in report.per_class_ap50.iter().zip(&report.per_class_ap50_95).enumerate() {
        if let (Some(a), Some(b)) = (a, b) {
            s.push_str(&format!("{c},{a:.6},{b:.6}\n"));
        }
    }
    s.push_str(&format!("all,{:.6},{:.6}\n", report.map50, report.map50_95));
    s
}
