//! Axis-aligned IoU, greedy detection matching, per-class AP and mAP@50.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices of `dets` by descending score; equal scores keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// True-positive flag for each detection, in input order.
///
/// Detections are visited by descending score. Each one claims the unmatched
/// ground truth of the same image and class with the highest IoU (first one on
/// ties); it is a true positive when that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    let mut labels = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let overlap = iou(&d.bbox, &g.bbox);
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        if let Some((j, overlap)) = best {
            if overlap >= iou_threshold {
                matched[j] = true;
                labels[i] = true;
            }
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall after each detection, given TP flags in score order.
pub fn pr_curve(labels_in_score_order: &[bool], num_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    labels_in_score_order
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += usize::from(is_tp);
            PrPoint {
                recall: if num_gt == 0 {
                    0.0
                } else {
                    tp as f64 / num_gt as f64
                },
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect()
}

pub fn average_precision(
    labels_in_score_order: &[bool],
    num_gt: usize,
    interp: ApInterpolation,
) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(labels_in_score_order, num_gt);
    // envelope[k] = max precision over points k.. (recall is non-decreasing)
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let ap = match interp {
        ApInterpolation::AllPoints => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (p, env) in curve.iter().zip(&envelope) {
                ap += (p.recall - prev) * env;
                prev = p.recall;
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .iter()
                        .zip(&envelope)
                        .find(|(p, _)| p.recall >= t)
                        .map_or(0.0, |(_, &env)| env)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    ap.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    /// `None` for classes without ground truth; they do not enter the mean.
    pub ap: Option<f64>,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground truth; 0 if there are none.
    pub map50: f64,
}

pub const MAP50_IOU: f64 = 0.5;

pub fn map50(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<EvalReport> {
    evaluate(
        dets,
        gts,
        num_classes,
        MAP50_IOU,
        ApInterpolation::AllPoints,
    )
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
    interp: ApInterpolation,
) -> Result<EvalReport> {
    for d in dets {
        if d.class_id >= num_classes || !d.score.is_finite() || !d.bbox.is_valid() {
            return Err(Error::Config(format!("invalid detection {d:?}")));
        }
    }
    for g in gts {
        if g.class_id >= num_classes || !g.bbox.is_valid() {
            return Err(Error::Config(format!("invalid ground truth {g:?}")));
        }
    }
    let labels = match_detections(dets, gts, iou_threshold);
    let order = score_order(dets);
    let mut classes = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let num_gt = gts.iter().filter(|g| g.class_id == class_id).count();
        let class_labels: Vec<bool> = order
            .iter()
            .filter(|&&i| dets[i].class_id == class_id)
            .map(|&i| labels[i])
            .collect();
        classes.push(ClassReport {
            class_id,
            num_gt,
            ap: (num_gt > 0).then(|| average_precision(&class_labels, num_gt, interp)),
            curve: pr_curve(&class_labels, num_gt),
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map50 = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalReport { classes, map50 })
}

#[derive(Debug, Deserialize)]
struct BoxRecord {
    image_id: u64,
    class_id: usize,
    #[serde(default)]
    score: Option<f64>,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

fn read_box_records(path: &Path) -> Result<Vec<BoxRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Reads `image_id,class_id,score,xmin,ymin,xmax,ymax` rows.
pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    read_box_records(path)?
        .into_iter()
        .map(|r| {
            let score = r.score.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("detection on image {} has no score", r.image_id),
            })?;
            Ok(Detection {
                image_id: r.image_id,
                class_id: r.class_id,
                score,
                bbox: BBox::new(r.xmin, r.ymin, r.xmax, r.ymax),
            })
        })
        .collect()
}

/// Same columns as detections; the score column may be empty and is ignored.
pub fn read_ground_truth_csv(path: &Path) -> Result<Vec<GroundTruth>> {
    Ok(read_box_records(path)?
        .into_iter()
        .map(|r| GroundTruth {
            image_id: r.image_id,
            class_id: r.class_id,
            bbox: BBox::new(r.xmin, r.ymin, r.xmax, r.ymax),
        })
        .collect())
}
