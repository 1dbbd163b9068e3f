//! Non-maximum suppression, average precision and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, DetectionBox, GtBox};
use crate::data::class_name;
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

fn by_confidence(dets: &[DetectionBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy per-class suppression, descending confidence (ties: lower index first).
/// Survivors are returned in the order they were kept.
pub fn nms(dets: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut kept: Vec<DetectionBox> = Vec::new();
    for i in by_confidence(dets) {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Ranks one class's detections over all images and marks each true or false
/// positive at `iou_threshold`. A detection claims the unmatched ground truth
/// of its class with the highest IoU (ties: lower index) if that IoU reaches
/// the threshold. Returns `(confidence, is_tp)` in rank order.
fn match_class(dets: &[Vec<DetectionBox>], gts: &[Vec<GtBox>], iou_threshold: f64, class_id: usize) -> Vec<(f64, bool)> {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((d.confidence, img, k));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(conf, img, k)| {
            let d = &dets[img][k];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if g.class_id != class_id || used[img][j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            (conf, best.is_some())
        })
        .collect()
}

fn class_instances(gts: &[Vec<GtBox>], class_id: usize) -> usize {
    gts.iter().flatten().filter(|g| g.class_id == class_id).count()
}

/// All-point interpolated AP from a ranked TP/FP list.
fn ap_from_ranking(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of one class over a set of images; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<DetectionBox>], gts: &[Vec<GtBox>], iou_threshold: f64, class_id: usize) -> Option<f64> {
    let n_gt = class_instances(gts, class_id);
    (n_gt > 0).then(|| ap_from_ranking(&match_class(dets, gts, iou_threshold, class_id), n_gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub instances: usize,
    /// AP at each of [`iou_thresholds`]; absent when the class has no instances.
    pub ap: Option<[f64; 10]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub iou_thresholds: [f64; 10],
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class and IoU threshold.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,name,instances,iou,ap\n");
        for c in &self.per_class {
            if let Some(ap) = &c.ap {
                for (t, v) in self.iou_thresholds.iter().zip(ap) {
                    s.push_str(&format!("{},{},{},{:.2},{:.6}\n", c.class_id, c.name, c.instances, t, v));
                }
            }
        }
        s
    }
}

/// Applies NMS per image, then computes AP over every surviving detection and
/// micro-averaged P/R over the survivors with confidence ≥ `conf_threshold`
/// at IoU 0.50.
pub fn evaluate(
    dets: &[Vec<DetectionBox>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    conf_threshold: f64,
    nms_threshold: f64,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if dets.len() != gts.len() {
        return Err(Error::contract(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let kept: Vec<Vec<DetectionBox>> = dets.iter().map(|d| nms(d, nms_threshold)).collect();
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut tp, mut fp, mut n_gt) = (0usize, 0usize, 0usize);
    for c in 0..num_classes {
        let instances = class_instances(gts, c);
        n_gt += instances;
        let at50 = match_class(&kept, gts, thresholds[0], c);
        for &(conf, hit) in &at50 {
            if conf >= conf_threshold {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let ap = (instances > 0).then(|| {
            std::array::from_fn(|i| {
                if i == 0 {
                    ap_from_ranking(&at50, instances)
                } else {
                    ap_from_ranking(&match_class(&kept, gts, thresholds[i], c), instances)
                }
            })
        });
        per_class.push(ClassReport { class_id: c, name: class_name(c).unwrap_or("class").to_string(), instances, ap });
    }
    let present: Vec<&[f64; 10]> = per_class.iter().filter_map(|c| c.ap.as_ref()).collect();
    let k = present.len().max(1) as f64;
    let map50 = present.iter().map(|a| a[0]).sum::<f64>() / k;
    let map50_95 = present.iter().map(|a| a.iter().sum::<f64>() / 10.0).sum::<f64>() / k;
    Ok(EvalReport {
        images: gts.len(),
        iou_thresholds: thresholds,
        conf_threshold,
        nms_threshold,
        precision: if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 },
        recall: if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 },
        map50,
        map50_95,
        per_class,
    })
}
