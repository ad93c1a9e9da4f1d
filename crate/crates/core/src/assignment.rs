//! Many-to-one assignment of predictions to ground truth by maximum IoU.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub match_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { match_iou: 0.5 }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) {
            return Err(validation(format!("match_iou {} must lie in (0, 1)", self.match_iou)));
        }
        Ok(())
    }
}

/// Index of the ground truth with the highest IoU against `pred`, if that IoU
/// reaches `match_iou`. Ties go to the lowest index.
pub fn assign_one(pred: &BBox, gt_boxes: &[BBox], cfg: &AssignConfig) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gt_boxes.iter().enumerate() {
        let v = iou(pred, gt);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best.filter(|&(_, v)| v >= cfg.match_iou).map(|(g, _)| g)
}

pub fn assign_gt(pred_boxes: &[BBox], gt_boxes: &[BBox], cfg: &AssignConfig) -> Vec<Option<usize>> {
    pred_boxes.iter().map(|p| assign_one(p, gt_boxes, cfg)).collect()
}
