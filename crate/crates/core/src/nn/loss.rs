use std::sync::Arc;

use super::detector::{ArchConfig, PredictionGrid};
use crate::autodiff::{CustomOp, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{BBox, Detection, GroundTruth};

/// Ground truth encoded on the prediction grid. A cell is positive when it
/// contains a box center; if several centers share a cell the first box wins.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    pub batch: usize,
    pub grid_size: usize,
    pub num_classes: usize,
    pub objectness: Vec<bool>,
    pub class_ids: Vec<usize>,
    /// `[dx, dy, ln(w / cell_w), ln(h / cell_h)]` per cell.
    pub boxes: Vec<[f64; 4]>,
}

fn cell_dims(arch: &ArchConfig) -> (f64, f64) {
    let s = arch.grid_size as f64;
    (
        arch.input_shape[2] as f64 / s,
        arch.input_shape[1] as f64 / s,
    )
}

impl GridTargets {
    pub fn encode(images: &[&[GroundTruth]], arch: &ArchConfig) -> Result<Self> {
        let s = arch.grid_size;
        let cells = images.len() * s * s;
        let (cell_w, cell_h) = cell_dims(arch);
        let mut targets = Self {
            batch: images.len(),
            grid_size: s,
            num_classes: arch.num_classes,
            objectness: vec![false; cells],
            class_ids: vec![0; cells],
            boxes: vec![[0.0; 4]; cells],
        };
        for (b, gts) in images.iter().enumerate() {
            for gt in gts.iter() {
                if gt.class_id >= arch.num_classes {
                    return Err(Error::Config(format!(
                        "ground-truth class {} outside 0..{}",
                        gt.class_id, arch.num_classes
                    )));
                }
                let bb = &gt.bbox;
                let (w, h) = (bb.width(), bb.height());
                if w <= 0.0 || h <= 0.0 {
                    continue;
                }
                let (cx, cy) = (
                    (bb.xmin + bb.xmax) / 2.0 / cell_w,
                    (bb.ymin + bb.ymax) / 2.0 / cell_h,
                );
                let col = (cx.floor().max(0.0) as usize).min(s - 1);
                let row = (cy.floor().max(0.0) as usize).min(s - 1);
                let idx = (b * s + row) * s + col;
                if targets.objectness[idx] {
                    continue;
                }
                targets.objectness[idx] = true;
                targets.class_ids[idx] = gt.class_id;
                targets.boxes[idx] = [
                    cx - col as f64,
                    cy - row as f64,
                    (w / cell_w).ln(),
                    (h / cell_h).ln(),
                ];
            }
        }
        Ok(targets)
    }

    pub fn positives(&self) -> usize {
        self.objectness.iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.objectness + self.class + self.boxes
    }
}

fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_shapes(pred: &[usize], t: &GridTargets) -> Result<()> {
    let expected = [t.batch, t.grid_size, t.grid_size, 5 + t.num_classes];
    if pred != expected {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            lhs: pred.to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

/// Loss components for raw prediction values laid out `[b, s, s, 1 + C + 4]`.
pub fn loss_terms(pred: &[f64], t: &GridTargets) -> LossTerms {
    let width = 5 + t.num_classes;
    let cells = t.objectness.len();
    let positives = t.positives();
    let mut obj = 0.0;
    let mut cls = 0.0;
    let mut boxes = 0.0;
    for i in 0..cells {
        let cell = &pred[i * width..(i + 1) * width];
        let target = if t.objectness[i] { 1.0 } else { 0.0 };
        obj += bce_with_logits(cell[0], target);
        if t.objectness[i] {
            let logits = &cell[1..1 + t.num_classes];
            cls += log_sum_exp(logits) - logits[t.class_ids[i]];
            let offsets = &cell[1 + t.num_classes..];
            for (p, q) in offsets.iter().zip(&t.boxes[i]) {
                boxes += (p - q) * (p - q);
            }
        }
    }
    let (cls, boxes) = if positives == 0 {
        (0.0, 0.0)
    } else {
        (cls / positives as f64, boxes / (4 * positives) as f64)
    };
    LossTerms {
        objectness: obj / cells as f64,
        class: cls,
        boxes,
    }
}

struct DetectionLoss {
    targets: Arc<GridTargets>,
}

impl CustomOp for DetectionLoss {
    fn name(&self) -> &str {
        "detection_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [pred] = inputs else {
            return Err(Error::InvalidShape {
                op: "detection_loss",
                msg: format!("expected 1 operand, got {}", inputs.len()),
            });
        };
        check_shapes(pred.shape(), &self.targets)?;
        Ok(Tensor::scalar(
            loss_terms(pred.values(), &self.targets).total(),
        ))
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let t = &*self.targets;
        let pred = inputs[0].values();
        let width = 5 + t.num_classes;
        let cells = t.objectness.len();
        let positives = t.positives().max(1) as f64;
        let g = grad[0];
        let mut out = vec![0.0; pred.len()];
        for i in 0..cells {
            let cell = &pred[i * width..(i + 1) * width];
            let dst = &mut out[i * width..(i + 1) * width];
            let target = if t.objectness[i] { 1.0 } else { 0.0 };
            dst[0] = g * (sigmoid(cell[0]) - target) / cells as f64;
            if t.objectness[i] {
                let logits = &cell[1..1 + t.num_classes];
                let lse = log_sum_exp(logits);
                for (k, &z) in logits.iter().enumerate() {
                    let onehot = if k == t.class_ids[i] { 1.0 } else { 0.0 };
                    dst[1 + k] = g * ((z - lse).exp() - onehot) / positives;
                }
                for k in 0..4 {
                    let j = 1 + t.num_classes + k;
                    dst[j] = g * 2.0 * (cell[j] - t.boxes[i][k]) / (4.0 * positives);
                }
            }
        }
        vec![out]
    }
}

/// Binary cross-entropy on objectness (all cells) + cross-entropy on classes
/// and squared error on box offsets (positive cells), each mean-reduced.
pub fn detection_loss(
    pred: &PredictionGrid,
    targets: &GridTargets,
    tape: &mut Tape,
) -> Result<Tensor> {
    check_shapes(pred.tensor.shape(), targets)?;
    tape.apply_custom(
        Arc::new(DetectionLoss {
            targets: Arc::new(targets.clone()),
        }),
        &[&pred.tensor],
    )
}

/// One detection per cell whose objectness probability exceeds 0.5, scored
/// `p(obj) * max_c p(c)`, boxes clipped to the image.
pub fn decode_detections(
    pred: &PredictionGrid,
    image_ids: &[u64],
    arch: &ArchConfig,
) -> Vec<Detection> {
    let (cell_w, cell_h) = cell_dims(arch);
    let (img_w, img_h) = (arch.input_shape[2] as f64, arch.input_shape[1] as f64);
    let s = pred.grid_size;
    let c = pred.num_classes;
    let mut out = Vec::new();
    for (b, &image_id) in image_ids.iter().enumerate().take(pred.batch()) {
        for row in 0..s {
            for col in 0..s {
                let cell = pred.cell(b, row, col);
                let p_obj = sigmoid(cell[0]);
                if p_obj <= 0.5 {
                    continue;
                }
                let logits = &cell[1..1 + c];
                let lse = log_sum_exp(logits);
                let (class_id, best) =
                    logits
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (k, &z)| if z > acc.1 { (k, z) } else { acc },
                        );
                let score = p_obj * (best - lse).exp();
                let off = &cell[1 + c..];
                let cx = (col as f64 + off[0]) * cell_w;
                let cy = (row as f64 + off[1]) * cell_h;
                let w = off[2].clamp(-10.0, 10.0).exp() * cell_w;
                let h = off[3].clamp(-10.0, 10.0).exp() * cell_h;
                let xmin = (cx - w / 2.0).clamp(0.0, img_w);
                let ymin = (cy - h / 2.0).clamp(0.0, img_h);
                let xmax = (cx + w / 2.0).clamp(xmin, img_w);
                let ymax = (cy + h / 2.0).clamp(ymin, img_h);
                out.push(Detection {
                    image_id,
                    class_id,
                    score: score.clamp(0.0, 1.0),
                    bbox: BBox {
                        xmin,
                        ymin,
                        xmax,
                        ymax,
                    },
                });
            }
        }
    }
    out
}
